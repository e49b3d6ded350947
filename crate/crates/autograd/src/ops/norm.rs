use crate::float::Float;
use crate::tensor::Tensor;
use crate::var::Var;

impl<T: Float> Var<T> {
    /// Instance normalization without affine parameters: every (sample,
    /// channel) plane is shifted to zero mean and scaled to unit variance.
    pub fn instance_norm(&self, eps: f64) -> Var<T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = (h * w) as f64;
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = vec![T::zero(); n * c];
        for b in 0..n {
            for ch in 0..c {
                let plane = x.plane(b, ch);
                let mean = plane.iter().map(|v| v.as_f64()).sum::<f64>() / hw;
                let var = plane.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / hw;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[b * c + ch] = T::of(is);
                let (m, s) = (T::of(mean), T::of(is));
                for (o, &v) in out.plane_mut(b, ch).iter_mut().zip(plane) {
                    *o = (v - m) * s;
                }
            }
        }
        drop(x);
        let normalized = out.clone();
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |grad, _, _| {
                let (n, c, h, w) = grad.dims4();
                let hw = T::of((h * w) as f64);
                let mut dx = Tensor::zeros(grad.shape());
                for b in 0..n {
                    for ch in 0..c {
                        let g = grad.plane(b, ch);
                        let xh = normalized.plane(b, ch);
                        let mean_g = g.iter().copied().sum::<T>() / hw;
                        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / hw;
                        let s = inv_std[b * c + ch];
                        for ((d, &gv), &xv) in dx.plane_mut(b, ch).iter_mut().zip(g).zip(xh) {
                            *d = s * (gv - mean_g - xv * mean_gx);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Concatenates NCHW variables along the channel axis.
    pub fn concat_channels(parts: &[&Var<T>]) -> Var<T> {
        let out = {
            let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let refs: Vec<&Tensor<T>> = values.iter().map(|v| &**v).collect();
            Tensor::concat_channels(&refs)
        };
        let channels: Vec<usize> = parts.iter().map(|p| p.value().dims4().1).collect();
        Var::from_op(
            out,
            parts.iter().map(|p| (*p).clone()).collect(),
            Box::new(move |grad, _, needs| {
                let (n, total, h, w) = grad.dims4();
                let hw = h * w;
                let mut offset = 0;
                let mut grads = Vec::with_capacity(channels.len());
                for (&pc, &need) in channels.iter().zip(needs) {
                    if need {
                        let mut data = Vec::with_capacity(n * pc * hw);
                        for b in 0..n {
                            let start = (b * total + offset) * hw;
                            data.extend_from_slice(&grad.data()[start..start + pc * hw]);
                        }
                        grads.push(Some(Tensor::from_vec(&[n, pc, h, w], data).expect("shape")));
                    } else {
                        grads.push(None);
                    }
                    offset += pc;
                }
                grads
            }),
        )
    }
}
