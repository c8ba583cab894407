//! Direct 2-D convolution via im2col and a dense matrix product.
//!
//! Kernels are stored `(out_channels, in_channels, k, k)`. All shapes the
//! detector and classifier use are small, so each batch item is lowered to a
//! column matrix and multiplied in one call.

use crate::error::{bail, Result};
use crate::numerics::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape4, kernel: Shape4, stride: usize, padding: usize) -> Result<Self> {
        if kernel.h != kernel.w {
            bail!(Shape, "kernel must be square, got {}x{}", kernel.h, kernel.w);
        }
        if kernel.c != input.c {
            bail!(
                Shape,
                "kernel expects {} input channels but input {} has {}",
                kernel.c,
                input,
                input.c
            );
        }
        if stride == 0 {
            bail!(InvalidArgument, "stride must be at least 1");
        }
        if kernel.n == 0 || kernel.c == 0 || kernel.h == 0 {
            bail!(Shape, "kernel {} has a zero dimension", kernel);
        }
        let k = kernel.h;
        if input.h + 2 * padding < k || input.w + 2 * padding < k {
            bail!(
                Shape,
                "kernel {k}x{k} larger than padded input {}x{} (padding {padding})",
                input.h + 2 * padding,
                input.w + 2 * padding
            );
        }
        Ok(Self {
            in_c: input.c,
            out_c: kernel.n,
            k,
            stride,
            padding,
            in_h: input.h,
            in_w: input.w,
            out_h: (input.h + 2 * padding - k) / stride + 1,
            out_w: (input.w + 2 * padding - k) / stride + 1,
        })
    }

    pub fn out_shape(&self, batch: usize) -> Shape4 {
        Shape4::new(batch, self.out_c, self.out_h, self.out_w)
    }

    /// Rows of the lowered column matrix.
    fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Multiply-accumulates for one batch item.
    pub fn macs(&self) -> u64 {
        (self.out_c * self.out_pixels() * self.patch_len()) as u64
    }
}

/// `c = a·b + beta·c` for row-major `a: m×k`, `b: k×n`, with either operand
/// optionally read transposed through its strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(g: &ConvGeometry, x: &[f64], cols: &mut [f64]) {
    let p = g.out_pixels();
    let (k, s) = (g.k, g.stride);
    let pad = g.padding as isize;
    for ci in 0..g.in_c {
        let plane = &x[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * s) as isize - pad + kh as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s) as isize - pad + kw as isize;
                        *o = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, cols: &[f64], dx: &mut [f64]) {
    let p = g.out_pixels();
    let (k, s) = (g.k, g.stride);
    let pad = g.padding as isize;
    for ci in 0..g.in_c {
        let plane = &mut dx[ci * g.in_h * g.in_w..(ci + 1) * g.in_h * g.in_w];
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * s) as isize - pad + kh as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * s) as isize - pad + kw as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution with optional per-output-channel bias.
pub fn conv2d(
    input: &Tensor4,
    weights: &Tensor4,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> Result<Tensor4> {
    let g = ConvGeometry::new(input.shape(), weights.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.len() != g.out_c {
            bail!(
                Shape,
                "bias has {} entries but kernel has {} output channels",
                b.len(),
                g.out_c
            );
        }
    }
    Ok(conv2d_with(&g, input, weights, bias))
}

pub(crate) fn conv2d_with(
    g: &ConvGeometry,
    input: &Tensor4,
    weights: &Tensor4,
    bias: Option<&[f64]>,
) -> Tensor4 {
    let batch = input.shape().n;
    let (kk, p) = (g.patch_len(), g.out_pixels());
    let mut out = vec![0.0; batch * g.out_c * p];
    let mut cols = vec![0.0; kk * p];
    for b in 0..batch {
        im2col(g, input.item_slice(b), &mut cols);
        let dst = &mut out[b * g.out_c * p..(b + 1) * g.out_c * p];
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(
            g.out_c,
            kk,
            p,
            weights.data(),
            (kk as isize, 1),
            &cols,
            (p as isize, 1),
            beta,
            dst,
        );
    }
    Tensor4::from_raw(g.out_shape(batch), out)
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor4>,
    pub weights: Option<Tensor4>,
    pub bias: Option<Vec<f64>>,
}

/// Gradients of a convolution given the upstream gradient `grad_out`.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &Tensor4,
    weights: &Tensor4,
    grad_out: &Tensor4,
    need_input: bool,
    need_weights: bool,
    need_bias: bool,
) -> ConvGrads {
    let batch = input.shape().n;
    let (kk, p) = (g.patch_len(), g.out_pixels());
    let mut dw = need_weights.then(|| vec![0.0; g.out_c * kk]);
    let mut db = need_bias.then(|| vec![0.0; g.out_c]);
    let mut dx = need_input.then(|| vec![0.0; input.len()]);
    let mut cols = vec![0.0; kk * p];
    let mut dcols = vec![0.0; kk * p];
    for b in 0..batch {
        let go = grad_out.item_slice(b);
        if let Some(db) = db.as_mut() {
            for (co, chunk) in go.chunks(p).enumerate() {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(g, input.item_slice(b), &mut cols);
            // dW += dOut · colsᵀ
            gemm(
                g.out_c,
                p,
                kk,
                go,
                (p as isize, 1),
                &cols,
                (1, p as isize),
                1.0,
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ · dOut
            gemm(
                kk,
                g.out_c,
                p,
                weights.data(),
                (1, kk as isize),
                go,
                (p as isize, 1),
                0.0,
                &mut dcols,
            );
            let len = input.shape().item_len();
            col2im_add(g, &dcols, &mut dx[b * len..(b + 1) * len]);
        }
    }
    ConvGrads {
        input: dx.map(|d| Tensor4::from_raw(input.shape(), d)),
        weights: dw.map(|d| Tensor4::from_raw(weights.shape(), d)),
        bias: db,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook six-loop convolution used as an oracle.
    fn naive_conv(x: &Tensor4, w: &Tensor4, stride: usize, pad: usize) -> Tensor4 {
        let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad).unwrap();
        let n = x.shape().n;
        let mut out = Tensor4::zeros(g.out_shape(n));
        let os = out.shape();
        for b in 0..n {
            for co in 0..g.out_c {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for ci in 0..g.in_c {
                            for kh in 0..g.k {
                                for kw in 0..g.k {
                                    let iy = (oy * stride + kh) as isize - pad as isize;
                                    let ix = (ox * stride + kw) as isize - pad as isize;
                                    if iy >= 0
                                        && ix >= 0
                                        && (iy as usize) < g.in_h
                                        && (ix as usize) < g.in_w
                                    {
                                        acc += x.get(b, ci, iy as usize, ix as usize)
                                            * w.get(co, ci, kh, kw);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * os.c + co) * os.h + oy) * os.w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: Shape4, scale: f64) -> Tensor4 {
        let data = (0..shape.numel())
            .map(|i| ((i * 7919) % 23) as f64 * scale - 0.3)
            .collect();
        Tensor4::new(shape, data).unwrap()
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let x = Tensor4::zeros(Shape4::new(1, 1, 3, 3));
        let w = ramp(Shape4::new(2, 1, 3, 3), 0.1);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = ramp(Shape4::new(2, 1, 5, 4), 0.05);
        let w = Tensor4::new(Shape4::new(1, 1, 1, 1), vec![1.0]).unwrap();
        assert_eq!(conv2d(&x, &w, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_sums_window() {
        let x = Tensor4::new(Shape4::new(1, 1, 3, 3), (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0).unwrap();
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 1, 1));
        assert_eq!(y.data(), &[45.0]);
    }

    #[test]
    fn matches_naive_loops() {
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let x = ramp(Shape4::new(2, 3, 7, 6), 0.07);
            let w = ramp(Shape4::new(4, 3, 3, 3), 0.03);
            let fast = conv2d(&x, &w, None, stride, pad).unwrap();
            let slow = naive_conv(&x, &w, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn output_dims_follow_floor_formula() {
        let x = Tensor4::zeros(Shape4::new(1, 3, 32, 32));
        let w = Tensor4::zeros(Shape4::new(8, 3, 3, 3));
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 8, 16, 16));
    }

    #[test]
    fn channel_mismatch_names_dims() {
        let x = Tensor4::zeros(Shape4::new(1, 3, 8, 8));
        let w = Tensor4::zeros(Shape4::new(4, 2, 3, 3));
        let err = conv2d(&x, &w, None, 1, 0).unwrap_err().to_string();
        assert!(err.contains("2 input channels"), "{err}");
        assert!(err.contains("has 3"), "{err}");
    }

    #[test]
    fn rejects_zero_stride() {
        let x = Tensor4::zeros(Shape4::new(1, 1, 4, 4));
        let w = Tensor4::zeros(Shape4::new(1, 1, 3, 3));
        assert!(conv2d(&x, &w, None, 0, 0).is_err());
    }

    #[test]
    fn bias_is_added_per_channel() {
        let x = Tensor4::zeros(Shape4::new(1, 1, 2, 2));
        let w = Tensor4::zeros(Shape4::new(2, 1, 1, 1));
        let y = conv2d(&x, &w, Some(&[0.5, -1.0]), 1, 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5, -1.0, -1.0, -1.0, -1.0]);
    }
}
