//! 2-D convolution and transposed convolution via im2col + GEMM.

use crate::float::{gemm, Float, Mat};
use crate::tensor::Tensor;
use crate::var::Var;

/// Sliding-window geometry between an "image" (the convolution input) and
/// the "grid" of kernel positions (the convolution output).
#[derive(Clone, Copy, Debug)]
struct Window {
    channels: usize,
    img_h: usize,
    img_w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    grid_h: usize,
    grid_w: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Unfolds `img` (channels x img_h x img_w) into `col` (rows x cols).
    fn im2col<T: Float>(&self, img: &[T], col: &mut [T]) {
        let k = self.kernel;
        let cols = self.cols();
        for c in 0..self.channels {
            let plane = &img[c * self.img_h * self.img_w..(c + 1) * self.img_h * self.img_w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for gh in 0..self.grid_h {
                        let ih = (gh * self.stride + ki) as isize - self.pad as isize;
                        let dst_row = &mut dst[gh * self.grid_w..(gh + 1) * self.grid_w];
                        if ih < 0 || ih as usize >= self.img_h {
                            dst_row.fill(T::zero());
                            continue;
                        }
                        let src_row = &plane[ih as usize * self.img_w..(ih as usize + 1) * self.img_w];
                        for (gw, d) in dst_row.iter_mut().enumerate() {
                            let iw = (gw * self.stride + kj) as isize - self.pad as isize;
                            *d = if iw < 0 || iw as usize >= self.img_w {
                                T::zero()
                            } else {
                                src_row[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: scatters-adds `col` into `img`.
    fn col2im<T: Float>(&self, col: &[T], img: &mut [T]) {
        let k = self.kernel;
        let cols = self.cols();
        for c in 0..self.channels {
            let plane = &mut img[c * self.img_h * self.img_w..(c + 1) * self.img_h * self.img_w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &col[row * cols..(row + 1) * cols];
                    for gh in 0..self.grid_h {
                        let ih = (gh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih as usize >= self.img_h {
                            continue;
                        }
                        let dst_row = &mut plane[ih as usize * self.img_w..(ih as usize + 1) * self.img_w];
                        let src_row = &src[gh * self.grid_w..(gh + 1) * self.grid_w];
                        for (gw, &v) in src_row.iter().enumerate() {
                            let iw = (gw * self.stride + kj) as isize - self.pad as isize;
                            if iw >= 0 && (iw as usize) < self.img_w {
                                dst_row[iw as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output size of a strided convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= kernel, "kernel {kernel} larger than padded input {input}+2*{pad}");
    (input + 2 * pad - kernel) / stride + 1
}

/// Output size of a transposed convolution.
pub fn conv_transpose_out_size(input: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    let full = (input - 1) * stride + kernel + out_pad;
    assert!(full >= 2 * pad, "transposed convolution padding too large");
    full - 2 * pad
}

fn add_bias<T: Float>(out: &mut Tensor<T>, bias: &Tensor<T>) {
    let (n, c, _, _) = out.dims4();
    assert_eq!(bias.numel(), c, "bias length must equal output channels");
    let b = bias.data().to_vec();
    for s in 0..n {
        for (ch, &bv) in b.iter().enumerate() {
            for v in out.plane_mut(s, ch) {
                *v += bv;
            }
        }
    }
}

fn bias_grad<T: Float>(grad: &Tensor<T>) -> Tensor<T> {
    let (n, c, _, _) = grad.dims4();
    let mut g = vec![T::zero(); c];
    for s in 0..n {
        for (ch, gv) in g.iter_mut().enumerate() {
            *gv += grad.plane(s, ch).iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec(&[c], g).expect("bias grad shape")
}

/// Plain (graph-free) convolution forward.
///
/// `x`: (N, Cin, H, W); `w`: (Cout, Cin, k, k).
pub fn conv2d_forward<T: Float>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, pad: usize) -> Tensor<T> {
    let (n, cin, h, wd) = x.dims4();
    let (cout, wcin, k, k2) = w.dims4();
    assert_eq!(k, k2, "only square kernels are supported");
    assert_eq!(cin, wcin, "conv2d: input has {cin} channels, kernel expects {wcin}");
    let win = Window {
        channels: cin,
        img_h: h,
        img_w: wd,
        kernel: k,
        stride,
        pad,
        grid_h: conv_out_size(h, k, stride, pad),
        grid_w: conv_out_size(wd, k, stride, pad),
    };
    let mut out = Tensor::zeros(&[n, cout, win.grid_h, win.grid_w]);
    let mut col = vec![T::zero(); win.rows() * win.cols()];
    let in_size = cin * h * wd;
    let out_size = cout * win.cols();
    for s in 0..n {
        win.im2col(&x.data()[s * in_size..(s + 1) * in_size], &mut col);
        gemm(
            Mat::new(w.data(), cout, win.rows()),
            Mat::new(&col, win.rows(), win.cols()),
            T::zero(),
            &mut out.data_mut()[s * out_size..(s + 1) * out_size],
        );
    }
    if let Some(b) = bias {
        add_bias(&mut out, b);
    }
    out
}

/// Plain (graph-free) transposed convolution forward.
///
/// `x`: (N, Cin, H, W); `w`: (Cin, Cout, k, k).
pub fn conv_transpose2d_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Tensor<T> {
    let (n, cin, h, wd) = x.dims4();
    let (wcin, cout, k, k2) = w.dims4();
    assert_eq!(k, k2, "only square kernels are supported");
    assert_eq!(cin, wcin, "conv_transpose2d: input has {cin} channels, kernel expects {wcin}");
    assert!(out_pad < stride.max(1), "output padding must be smaller than stride");
    let oh = conv_transpose_out_size(h, k, stride, pad, out_pad);
    let ow = conv_transpose_out_size(wd, k, stride, pad, out_pad);
    let win = Window { channels: cout, img_h: oh, img_w: ow, kernel: k, stride, pad, grid_h: h, grid_w: wd };
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    let mut col = vec![T::zero(); win.rows() * win.cols()];
    let in_size = cin * h * wd;
    let out_size = cout * oh * ow;
    for s in 0..n {
        gemm(
            Mat::new(w.data(), cin, win.rows()).t(),
            Mat::new(&x.data()[s * in_size..(s + 1) * in_size], cin, win.cols()),
            T::zero(),
            &mut col,
        );
        win.col2im(&col, &mut out.data_mut()[s * out_size..(s + 1) * out_size]);
    }
    if let Some(b) = bias {
        add_bias(&mut out, b);
    }
    out
}

impl<T: Float> Var<T> {
    /// Convolution with square kernel `w` (Cout, Cin, k, k) and optional bias (Cout).
    pub fn conv2d(&self, w: &Var<T>, bias: Option<&Var<T>>, stride: usize, pad: usize) -> Var<T> {
        let out = {
            let bv = bias.map(|b| b.value());
            conv2d_forward(&self.value(), &w.value(), bv.as_deref(), stride, pad)
        };
        let mut parents = vec![self.clone(), w.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Var::from_op(
            out,
            parents,
            Box::new(move |grad, parents, needs| {
                let x = parents[0].value();
                let w = parents[1].value();
                let (n, cin, h, wd) = x.dims4();
                let (cout, _, k, _) = w.dims4();
                let (_, _, gh, gw) = grad.dims4();
                let win = Window { channels: cin, img_h: h, img_w: wd, kernel: k, stride, pad, grid_h: gh, grid_w: gw };
                let in_size = cin * h * wd;
                let out_size = cout * win.cols();
                let mut col = vec![T::zero(); win.rows() * win.cols()];
                let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
                let mut dw = needs[1].then(|| Tensor::zeros(w.shape()));
                for s in 0..n {
                    let g = &grad.data()[s * out_size..(s + 1) * out_size];
                    if let Some(dw) = dw.as_mut() {
                        win.im2col(&x.data()[s * in_size..(s + 1) * in_size], &mut col);
                        gemm(
                            Mat::new(g, cout, win.cols()),
                            Mat::new(&col, win.rows(), win.cols()).t(),
                            T::one(),
                            dw.data_mut(),
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(Mat::new(w.data(), cout, win.rows()).t(), Mat::new(g, cout, win.cols()), T::zero(), &mut col);
                        win.col2im(&col, &mut dx.data_mut()[s * in_size..(s + 1) * in_size]);
                    }
                }
                let mut grads = vec![dx, dw];
                if parents.len() == 3 {
                    grads.push(needs[2].then(|| bias_grad(grad)));
                }
                grads
            }),
        )
    }

    /// Transposed convolution with kernel `w` (Cin, Cout, k, k) and optional bias (Cout).
    pub fn conv_transpose2d(&self, w: &Var<T>, bias: Option<&Var<T>>, stride: usize, pad: usize, out_pad: usize) -> Var<T> {
        let out = {
            let bv = bias.map(|b| b.value());
            conv_transpose2d_forward(&self.value(), &w.value(), bv.as_deref(), stride, pad, out_pad)
        };
        let mut parents = vec![self.clone(), w.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Var::from_op(
            out,
            parents,
            Box::new(move |grad, parents, needs| {
                let x = parents[0].value();
                let w = parents[1].value();
                let (n, cin, h, wd) = x.dims4();
                let (_, cout, k, _) = w.dims4();
                let (_, _, oh, ow) = grad.dims4();
                let win = Window { channels: cout, img_h: oh, img_w: ow, kernel: k, stride, pad, grid_h: h, grid_w: wd };
                let in_size = cin * h * wd;
                let out_size = cout * oh * ow;
                let mut col = vec![T::zero(); win.rows() * win.cols()];
                let mut dx = needs[0].then(|| Tensor::zeros(x.shape()));
                let mut dw = needs[1].then(|| Tensor::zeros(w.shape()));
                for s in 0..n {
                    win.im2col(&grad.data()[s * out_size..(s + 1) * out_size], &mut col);
                    let xs = &x.data()[s * in_size..(s + 1) * in_size];
                    if let Some(dx) = dx.as_mut() {
                        gemm(
                            Mat::new(w.data(), cin, win.rows()),
                            Mat::new(&col, win.rows(), win.cols()),
                            T::zero(),
                            &mut dx.data_mut()[s * in_size..(s + 1) * in_size],
                        );
                    }
                    if let Some(dw) = dw.as_mut() {
                        gemm(Mat::new(xs, cin, win.cols()), Mat::new(&col, win.rows(), win.cols()).t(), T::one(), dw.data_mut());
                    }
                }
                let mut grads = vec![dx, dw];
                if parents.len() == 3 {
                    grads.push(needs[2].then(|| bias_grad(grad)));
                }
                grads
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop convolution used as an oracle.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, cin, h, wd) = x.dims4();
        let (cout, _, k, _) = w.dims4();
        let oh = conv_out_size(h, k, stride, pad);
        let ow = conv_out_size(wd, k, stride, pad);
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for s in 0..n {
            for co in 0..cout {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ih = (i * stride + ki) as isize - pad as isize;
                                    let iw = (j * stride + kj) as isize - pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                        acc += x.data()[((s * cin + ci) * h + ih as usize) * wd + iw as usize]
                                            * w.data()[((co * cin + ci) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((s * cout + co) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    /// Scatter form of the transposed convolution.
    fn naive_conv_t(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize, out_pad: usize) -> Tensor<f64> {
        let (n, cin, h, wd) = x.dims4();
        let (_, cout, k, _) = w.dims4();
        let oh = conv_transpose_out_size(h, k, stride, pad, out_pad);
        let ow = conv_transpose_out_size(wd, k, stride, pad, out_pad);
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for s in 0..n {
            for ci in 0..cin {
                for i in 0..h {
                    for j in 0..wd {
                        let v = x.data()[((s * cin + ci) * h + i) * wd + j];
                        for co in 0..cout {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let oi = (i * stride + ki) as isize - pad as isize;
                                    let oj = (j * stride + kj) as isize - pad as isize;
                                    if oi >= 0 && oj >= 0 && (oi as usize) < oh && (oj as usize) < ow {
                                        out.data_mut()[((s * cout + co) * oh + oi as usize) * ow + oj as usize] +=
                                            v * w.data()[((ci * cout + co) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn rng() -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn conv_matches_naive() {
        let mut r = rng();
        for &(k, s, p) in &[(3, 1, 1), (4, 2, 1), (5, 2, 2), (1, 1, 0)] {
            let x = Tensor::<f64>::randn(&[2, 3, 9, 8], 0.0, 1.0, &mut r);
            let w = Tensor::<f64>::randn(&[4, 3, k, k], 0.0, 1.0, &mut r);
            let a = conv2d_forward(&x, &w, None, s, p);
            let b = naive_conv(&x, &w, s, p);
            assert_eq!(a.shape(), b.shape());
            assert!(a.zip_map(&b, |u, v| u - v).max_abs() < 1e-12);
        }
    }

    #[test]
    fn conv_transpose_matches_naive() {
        let mut r = rng();
        for &(k, s, p, op) in &[(4, 2, 1, 0), (5, 2, 2, 1), (3, 2, 1, 1), (3, 1, 1, 0)] {
            let x = Tensor::<f64>::randn(&[2, 3, 5, 6], 0.0, 1.0, &mut r);
            let w = Tensor::<f64>::randn(&[3, 2, k, k], 0.0, 1.0, &mut r);
            let a = conv_transpose2d_forward(&x, &w, None, s, p, op);
            let b = naive_conv_t(&x, &w, s, p, op);
            assert_eq!(a.shape(), b.shape());
            assert!(a.zip_map(&b, |u, v| u - v).max_abs() < 1e-12);
        }
    }

    #[test]
    fn output_sizes() {
        assert_eq!(conv_out_size(512, 4, 2, 1), 256);
        assert_eq!(conv_out_size(32, 4, 1, 1), 31);
        assert_eq!(conv_transpose_out_size(8, 4, 2, 1, 0), 16);
        assert_eq!(conv_transpose_out_size(8, 5, 2, 2, 1), 16);
    }
}
