use crate::float::Float;
use crate::tensor::Tensor;
use crate::var::Var;

impl<T: Float> Var<T> {
    fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<T> {
        let out = self.value().map(f);
        let y = out.clone();
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(move |grad, parents, _| {
                let x = parents[0].value();
                let data = x.data().iter().zip(y.data()).zip(grad.data()).map(|((&xv, &yv), &g)| g * df(xv, yv)).collect();
                vec![Some(Tensor::from_vec(x.shape(), data).expect("shape"))]
            }),
        )
    }

    pub fn relu(&self) -> Var<T> {
        self.unary(|v| v.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<T> {
        let s = T::of(slope);
        self.unary(move |v| if v > T::zero() { v } else { v * s }, move |x, _| if x > T::zero() { T::one() } else { s })
    }

    pub fn tanh(&self) -> Var<T> {
        self.unary(|v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&self) -> Var<T> {
        self.unary(|v| T::one() / (T::one() + (-v).exp()), |_, y| y * (T::one() - y))
    }

    pub fn abs(&self) -> Var<T> {
        self.unary(|v| v.abs(), |x, _| if x > T::zero() { T::one() } else if x < T::zero() { -T::one() } else { T::zero() })
    }

    pub fn scale(&self, alpha: f64) -> Var<T> {
        let a = T::of(alpha);
        self.unary(move |v| v * a, move |_, _| a)
    }

    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let out = self.value().zip_map(&other.value(), |a, b| a + b);
        Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(|grad, _, needs| vec![needs[0].then(|| grad.clone()), needs[1].then(|| grad.clone())]),
        )
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let out = self.value().zip_map(&other.value(), |a, b| a - b);
        Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(|grad, _, needs| vec![needs[0].then(|| grad.clone()), needs[1].then(|| grad.map(|g| -g))]),
        )
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let out = self.value().zip_map(&other.value(), |a, b| a * b);
        Var::from_op(
            out,
            vec![self.clone(), other.clone()],
            Box::new(|grad, parents, needs| {
                let ga = needs[0].then(|| grad.zip_map(&parents[1].value(), |g, b| g * b));
                let gb = needs[1].then(|| grad.zip_map(&parents[0].value(), |g, a| g * a));
                vec![ga, gb]
            }),
        )
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&self, c: &Tensor<T>) -> Var<T> {
        let out = self.value().zip_map(c, |a, b| a * b);
        let c = c.clone();
        Var::from_op(out, vec![self.clone()], Box::new(move |grad, _, _| vec![Some(grad.zip_map(&c, |g, b| g * b))]))
    }

    pub fn sum(&self) -> Var<T> {
        let out = Tensor::scalar(self.value().sum());
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(|grad, parents, _| vec![Some(Tensor::full(parents[0].value().shape(), grad.data()[0]))]),
        )
    }

    pub fn mean(&self) -> Var<T> {
        let n = self.value().numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Adds a single-channel noise image, broadcast over channels and scaled by
    /// a learned per-channel weight: `y[n,c] = x[n,c] + w[c] * noise[n,0]`.
    pub fn add_scaled_noise(&self, weight: &Var<T>, noise: &Tensor<T>) -> Var<T> {
        let (n, c, h, w) = self.value().dims4();
        let (nn, nc, nh, nw) = noise.dims4();
        assert!(nn == n && nc == 1 && nh == h && nw == w, "noise must be (N, 1, H, W) matching features");
        assert_eq!(weight.value().numel(), c, "noise weight must have one entry per channel");
        let mut out = self.value().clone();
        {
            let wv = weight.value();
            for b in 0..n {
                let np = noise.plane(b, 0).to_vec();
                for (ch, &wc) in wv.data().iter().enumerate() {
                    for (o, &z) in out.plane_mut(b, ch).iter_mut().zip(&np) {
                        *o += wc * z;
                    }
                }
            }
        }
        let noise = noise.clone();
        Var::from_op(
            out,
            vec![self.clone(), weight.clone()],
            Box::new(move |grad, _, needs| {
                let dw = needs[1].then(|| {
                    let (n, c, _, _) = grad.dims4();
                    let mut g = vec![T::zero(); c];
                    for b in 0..n {
                        let np = noise.plane(b, 0);
                        for (ch, gv) in g.iter_mut().enumerate() {
                            *gv += grad.plane(b, ch).iter().zip(np).map(|(&a, &z)| a * z).sum::<T>();
                        }
                    }
                    Tensor::from_vec(&[c], g).expect("shape")
                });
                vec![needs[0].then(|| grad.clone()), dw]
            }),
        )
    }
}
