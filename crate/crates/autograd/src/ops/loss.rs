use crate::float::Float;
use crate::tensor::Tensor;
use crate::var::Var;

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<T: Float> Var<T> {
    /// Mean binary cross-entropy of logits against a constant label:
    /// `-mean(log sigmoid(x))` for `target = true`, `-mean(log(1 - sigmoid(x)))` otherwise.
    pub fn bce_with_logits(&self, target: bool) -> Var<T> {
        let x = self.value();
        let n = x.numel().max(1) as f64;
        let sign = if target { -1.0 } else { 1.0 };
        let loss = x.data().iter().map(|v| softplus(sign * v.as_f64())).sum::<f64>() / n;
        drop(x);
        Var::from_op(
            Tensor::scalar(T::of(loss)),
            vec![self.clone()],
            Box::new(move |grad, parents, _| {
                let g = grad.data()[0].as_f64() / n;
                let t = if target { 1.0 } else { 0.0 };
                vec![Some(parents[0].value().map(|v| T::of(g * (sigmoid(v.as_f64()) - t))))]
            }),
        )
    }

    /// `mean(|y - m * self|)` over all elements, with `y` and `m` constant.
    pub fn masked_l1(&self, target: &Tensor<T>, mask: &Tensor<T>) -> Var<T> {
        let x = self.value();
        assert_eq!(x.shape(), target.shape(), "masked_l1 target shape mismatch");
        assert_eq!(x.shape(), mask.shape(), "masked_l1 mask shape mismatch");
        let n = x.numel().max(1) as f64;
        let loss = x
            .data()
            .iter()
            .zip(target.data())
            .zip(mask.data())
            .map(|((&p, &y), &m)| (y - m * p).abs().as_f64())
            .sum::<f64>()
            / n;
        drop(x);
        let (target, mask) = (target.clone(), mask.clone());
        Var::from_op(
            Tensor::scalar(T::of(loss)),
            vec![self.clone()],
            Box::new(move |grad, parents, _| {
                let g = T::of(grad.data()[0].as_f64() / n);
                let x = parents[0].value();
                let data = x
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(mask.data())
                    .map(|((&p, &y), &m)| {
                        let r = y - m * p;
                        let s = if r > T::zero() {
                            T::one()
                        } else if r < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        -g * s * m
                    })
                    .collect();
                vec![Some(Tensor::from_vec(x.shape(), data).expect("shape"))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0 && softplus(-800.0) < 1e-300);
    }

    #[test]
    fn bce_zero_logits() {
        let x = Var::<f64>::constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!((x.bce_with_logits(true).item() - 2f64.ln()).abs() < 1e-15);
        assert!((x.bce_with_logits(false).item() - 2f64.ln()).abs() < 1e-15);
    }
}
