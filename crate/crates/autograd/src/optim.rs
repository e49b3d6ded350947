use crate::float::Float;
use crate::tensor::Tensor;
use crate::var::Var;

/// Adam with bias correction, matching the common reference formulation.
#[derive(Debug, Clone)]
pub struct Adam<T: Float> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter. Parameters without a gradient
    /// are treated as having a zero gradient. The parameter list must be the
    /// same (same order, same shapes) on every call.
    pub fn step(&mut self, params: &[Var<T>]) {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(&p.shape())).collect();
            self.second = self.first.clone();
        }
        assert_eq!(self.first.len(), params.len(), "parameter list changed between steps");
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for ((p, m), v) in params.iter().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad_ref();
            let Some(g) = grad.as_ref() else {
                // zero gradient: moments decay, parameter still moves by momentum
                for x in m.data_mut() {
                    *x *= b1;
                }
                for x in v.data_mut() {
                    *x *= b2;
                }
                drop(grad);
                p.update_value(|val| {
                    for ((w, &mv), &vv) in val.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                        *w -= lr * (mv / c1) / ((vv / c2).sqrt() + eps);
                    }
                });
                continue;
            };
            for ((mv, vv), &gv) in m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            }
            drop(grad);
            p.update_value(|val| {
                for ((w, &mv), &vv) in val.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                    *w -= lr * (mv / c1) / ((vv / c2).sqrt() + eps);
                }
            });
        }
    }
}
