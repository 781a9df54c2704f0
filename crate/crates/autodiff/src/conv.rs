//! Strided 2D convolution kernels via im2col and a GEMM.
//!
//! Both directions share one geometry: an *image* of `ih x iw` pixels and a
//! *patch grid* of `oh x ow` kernel placements. For a convolution the image is
//! the input and the patch grid the output; for a transposed convolution the
//! roles swap. Conv and transposed conv are exact adjoints of each other.

use crate::error::{AutodiffError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Output extent of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out_len(input: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize) -> Option<usize> {
    let full = (input - 1) * stride + kernel + out_pad;
    full.checked_sub(2 * pad).filter(|&n| n > 0)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn patches(&self) -> usize {
        self.oh * self.ow
    }

    /// Visits every (row, patch, pixel) triple that lands inside the image.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..self.oh {
                        let y = oy as isize * s + ky as isize - p;
                        if y < 0 || y >= self.ih as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let x = ox as isize * s + kx as isize - p;
                            if x < 0 || x >= self.iw as isize {
                                continue;
                            }
                            let pix = (c * self.ih + y as usize) * self.iw + x as usize;
                            f(row, oy * self.ow + ox, pix);
                        }
                    }
                }
            }
        }
    }
}

/// `cols[row][b * patches + patch]` gathered from a batch of images.
fn im2col<T: Real>(g: &Geometry, images: &[T], batch: usize) -> Vec<T> {
    let np = g.patches();
    let ld = batch * np;
    let img_len = g.channels * g.ih * g.iw;
    let mut cols = vec![T::zero(); g.rows() * ld];
    for b in 0..batch {
        let img = &images[b * img_len..(b + 1) * img_len];
        g.for_each(|row, patch, pix| {
            cols[row * ld + b * np + patch] = img[pix];
        });
    }
    cols
}

/// Scatter-add of patch columns back onto a batch of images.
fn col2im<T: Real>(g: &Geometry, cols: &[T], batch: usize) -> Vec<T> {
    let np = g.patches();
    let ld = batch * np;
    let img_len = g.channels * g.ih * g.iw;
    let mut images = vec![T::zero(); batch * img_len];
    for b in 0..batch {
        let img = &mut images[b * img_len..(b + 1) * img_len];
        g.for_each(|row, patch, pix| {
            img[pix] += cols[row * ld + b * np + patch];
        });
    }
    images
}

/// NCHW -> `[C, B * HW]`.
fn to_channel_major<T: Real>(t: &Tensor<T>) -> Vec<T> {
    let [b, c, h, w] = t.shape();
    let hw = h * w;
    let mut out = vec![T::zero(); t.len()];
    let src = t.data();
    for bi in 0..b {
        for ci in 0..c {
            let s = &src[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            out[ci * b * hw + bi * hw..ci * b * hw + (bi + 1) * hw].copy_from_slice(s);
        }
    }
    out
}

/// `[C, B * HW]` -> NCHW.
fn from_channel_major<T: Real>(m: &[T], shape: [usize; 4]) -> Tensor<T> {
    let [b, c, h, w] = shape;
    let hw = h * w;
    let mut out = vec![T::zero(); m.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]
                .copy_from_slice(&m[ci * b * hw + bi * hw..ci * b * hw + (bi + 1) * hw]);
        }
    }
    Tensor::from_vec(shape, out).expect("shape")
}

fn check_kernel<T: Real>(w: &Tensor<T>) -> Result<usize> {
    let [_, _, kh, kw] = w.shape();
    if kh != kw {
        return Err(AutodiffError::ShapeMismatch(format!("non-square kernel {kh}x{kw}")));
    }
    Ok(kh)
}

/// Saved state of a convolution forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    input_shape: [usize; 4],
    output_shape: [usize; 4],
}

/// Cross-correlation of `x: [B, Cin, H, W]` with `w: [Cout, Cin, k, k]`.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Result<(Tensor<T>, ConvCache<T>)> {
    let [b, cin, h, wd] = x.shape();
    let [cout, wcin, _, _] = w.shape();
    let k = check_kernel(w)?;
    if wcin != cin {
        return Err(AutodiffError::ShapeMismatch(format!("conv2d: input has {cin} channels, kernel expects {wcin}")));
    }
    let (oh, ow) = match (conv_out_len(h, k, stride, pad), conv_out_len(wd, k, stride, pad)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(AutodiffError::ShapeMismatch(format!("conv2d: {h}x{wd} input too small for kernel {k} pad {pad}"))),
    };
    let g = Geometry { channels: cin, ih: h, iw: wd, oh, ow, k, stride, pad };
    let cols = im2col(&g, x.data(), b);
    let ld = b * oh * ow;
    let mut out = vec![T::zero(); cout * ld];
    let kk = g.rows();
    T::gemm(cout, kk, ld, T::one(), w.data(), (kk as isize, 1), &cols, (ld as isize, 1), T::zero(), &mut out, (ld as isize, 1));
    let shape = [b, cout, oh, ow];
    Ok((from_channel_major(&out, shape), ConvCache { cols, input_shape: x.shape(), output_shape: shape }))
}

/// Returns `(dx, dw)` for [`conv2d_forward`].
pub fn conv2d_backward<T: Real>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    cache: &ConvCache<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>) {
    let [b, cin, h, wd] = cache.input_shape;
    let [_, cout, oh, ow] = cache.output_shape;
    let k = w.shape()[2];
    let g = Geometry { channels: cin, ih: h, iw: wd, oh, ow, k, stride, pad };
    let ld = b * oh * ow;
    let kk = g.rows();
    let dy_m = to_channel_major(dy);
    let mut dw = vec![T::zero(); cout * kk];
    // dW = dY * cols^T
    T::gemm(cout, ld, kk, T::one(), &dy_m, (ld as isize, 1), &cache.cols, (1, ld as isize), T::zero(), &mut dw, (kk as isize, 1));
    let mut dcols = vec![T::zero(); kk * ld];
    // dcols = W^T * dY
    T::gemm(kk, cout, ld, T::one(), w.data(), (1, kk as isize), &dy_m, (ld as isize, 1), T::zero(), &mut dcols, (ld as isize, 1));
    let dx = col2im(&g, &dcols, b);
    (
        Tensor::from_vec(cache.input_shape, dx).expect("shape"),
        Tensor::from_vec(w.shape(), dw).expect("shape"),
    )
}

/// Transposed convolution of `x: [B, Cin, H, W]` with `w: [Cin, Cout, k, k]`.
/// `out_pad` is the extra output extent `(rows, cols)`.
///
/// Equals the input gradient of a convolution with the same kernel, stride
/// and padding whose input is the output of this op.
pub fn conv_transpose2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_pad: (usize, usize),
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let [b, cin, h, wd] = x.shape();
    let [wcin, cout, _, _] = w.shape();
    let k = check_kernel(w)?;
    if wcin != cin {
        return Err(AutodiffError::ShapeMismatch(format!("conv_transpose2d: input has {cin} channels, kernel expects {wcin}")));
    }
    if out_pad.0.max(out_pad.1) >= stride.max(1) && out_pad != (0, 0) {
        return Err(AutodiffError::ShapeMismatch(format!("output padding {out_pad:?} must be below stride {stride}")));
    }
    let (oh, ow) = match (
        conv_transpose_out_len(h, k, stride, pad, out_pad.0),
        conv_transpose_out_len(wd, k, stride, pad, out_pad.1),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(AutodiffError::ShapeMismatch(format!("conv_transpose2d: degenerate output for {h}x{wd}"))),
    };
    let g = Geometry { channels: cout, ih: oh, iw: ow, oh: h, ow: wd, k, stride, pad };
    let ld = b * h * wd;
    let kk = g.rows();
    let x_m = to_channel_major(x);
    let mut cols = vec![T::zero(); kk * ld];
    // cols = W^T * X, W viewed as [Cin, Cout*k*k]
    T::gemm(kk, cin, ld, T::one(), w.data(), (1, kk as isize), &x_m, (ld as isize, 1), T::zero(), &mut cols, (ld as isize, 1));
    let out = col2im(&g, &cols, b);
    let shape = [b, cout, oh, ow];
    Ok((
        Tensor::from_vec(shape, out).expect("shape"),
        ConvCache { cols: x_m, input_shape: x.shape(), output_shape: shape },
    ))
}

/// Returns `(dx, dw)` for [`conv_transpose2d_forward`].
pub fn conv_transpose2d_backward<T: Real>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    cache: &ConvCache<T>,
    stride: usize,
    pad: usize,
) -> (Tensor<T>, Tensor<T>) {
    let [b, cin, h, wd] = cache.input_shape;
    let [_, cout, oh, ow] = cache.output_shape;
    let k = w.shape()[2];
    let g = Geometry { channels: cout, ih: oh, iw: ow, oh: h, ow: wd, k, stride, pad };
    let ld = b * h * wd;
    let kk = g.rows();
    let dcols = im2col(&g, dy.data(), b);
    let mut dx_m = vec![T::zero(); cin * ld];
    // dX = W * dcols
    T::gemm(cin, kk, ld, T::one(), w.data(), (kk as isize, 1), &dcols, (ld as isize, 1), T::zero(), &mut dx_m, (ld as isize, 1));
    let mut dw = vec![T::zero(); cin * kk];
    // dW = X * dcols^T ; cache.cols holds X in channel-major layout
    T::gemm(cin, ld, kk, T::one(), &cache.cols, (ld as isize, 1), &dcols, (1, ld as isize), T::zero(), &mut dw, (kk as isize, 1));
    (from_channel_major(&dx_m, cache.input_shape), Tensor::from_vec(w.shape(), dw).expect("shape"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(f).collect()).unwrap()
    }

    #[test]
    fn identity_kernel_same_padding_is_identity() {
        let x = t([2, 1, 6, 5], |i| (i as f64 * 0.37).sin());
        let mut w = Tensor::zeros([1, 1, 5, 5]);
        w.data_mut()[12] = 1.0;
        let (y, _) = conv2d_forward(&x, &w, 1, 2).unwrap();
        assert_eq!(y, x);
        let (yt, _) = conv_transpose2d_forward(&x, &w, 1, 2, (0, 0)).unwrap();
        assert_eq!(yt, x);
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        let x = Tensor::full([1, 1, 3, 3], 1.0f64);
        let w = Tensor::full([1, 1, 5, 5], 1.0);
        let (y, _) = conv2d_forward(&x, &w, 1, 2).unwrap();
        assert_eq!(y.shape(), [1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        // a 5x5 window at any of the 3x3 positions still covers the whole input
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn output_lengths_follow_ceil_halving() {
        assert_eq!(conv_out_len(100, 5, 2, 2), Some(50));
        assert_eq!(conv_out_len(25, 5, 2, 2), Some(13));
        assert_eq!(conv_out_len(50, 5, 2, 2), Some(25));
        assert_eq!(conv_out_len(13, 5, 2, 2), Some(7));
        assert_eq!(conv_transpose_out_len(13, 5, 2, 2, 0), Some(25));
        assert_eq!(conv_transpose_out_len(25, 5, 2, 2, 1), Some(50));
        assert_eq!(conv_out_len(2, 5, 1, 1), None);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros([1, 2, 4, 4]);
        let w = Tensor::zeros([3, 1, 5, 5]);
        assert!(matches!(conv2d_forward(&x, &w, 1, 2), Err(AutodiffError::ShapeMismatch(_))));
    }
}
