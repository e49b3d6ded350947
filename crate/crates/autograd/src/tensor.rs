use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::float::Float;
use crate::ShapeError;

/// Dense row-major n-dimensional array. Image tensors use NCHW layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, ShapeError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(ShapeError::Length { shape: shape.to_vec(), len: data.len() });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Samples i.i.d. `Normal(mean, std)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], mean: f64, std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(mean + std * z)
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// `(n, c, h, w)` of a 4-D tensor.
    ///
    /// # Panics
    ///
    /// Panics if the tensor is not 4-D.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape.as_slice() {
            &[n, c, h, w] => (n, c, h, w),
            other => panic!("expected a 4-D NCHW tensor, got shape {other:?}"),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, ShapeError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(ShapeError::Length { shape: shape.to_vec(), len: self.data.len() });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// `self += other` elementwise.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len().max(1) as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One NCHW plane `(n, c)` as a slice of `h * w` values.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let (_, cc, h, w) = self.dims4();
        let hw = h * w;
        let start = (n * cc + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let (_, cc, h, w) = self.dims4();
        let hw = h * w;
        let start = (n * cc + c) * hw;
        &mut self.data[start..start + hw]
    }

    /// Converts element type.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    /// Concatenates 4-D tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let (n, _, h, w) = parts[0].dims4();
        let mut total_c = 0;
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4();
            assert!(pn == n && ph == h && pw == w, "concat spatial/batch mismatch");
            total_c += pc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for p in parts {
                let (_, pc, _, _) = p.dims4();
                data.extend_from_slice(&p.data[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        Tensor { shape: vec![n, total_c, h, w], data }
    }

    /// Spatial crop `[top, top + h) x [left, left + w)` of a 4-D tensor.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Tensor<T> {
        let (n, c, sh, sw) = self.dims4();
        assert!(top + h <= sh && left + w <= sw, "crop out of bounds");
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                let plane = self.plane(b, ch);
                for r in top..top + h {
                    data.extend_from_slice(&plane[r * sw + left..r * sw + left + w]);
                }
            }
        }
        Tensor { shape: vec![n, c, h, w], data }
    }

    /// Zero-pads a 4-D tensor at the bottom and right edges.
    pub fn pad_bottom_right(&self, h: usize, w: usize) -> Tensor<T> {
        let (n, c, sh, sw) = self.dims4();
        assert!(h >= sh && w >= sw, "pad target smaller than tensor");
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for b in 0..n {
            for ch in 0..c {
                let src = self.plane(b, ch).to_vec();
                let dst = out.plane_mut(b, ch);
                for r in 0..sh {
                    dst[r * w..r * w + sw].copy_from_slice(&src[r * sw..(r + 1) * sw]);
                }
            }
        }
        out
    }

    /// Stacks equally shaped 4-D tensors along the batch axis.
    pub fn stack_batch(parts: &[Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty(), "stack of zero tensors");
        let (_, c, h, w) = parts[0].dims4();
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4();
            assert!(pc == c && ph == h && pw == w, "stack shape mismatch");
            n += pn;
            data.extend_from_slice(&p.data);
        }
        Tensor { shape: vec![n, c, h, w], data }
    }
}
