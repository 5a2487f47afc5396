//! Batched 4-D feature maps and the patch flattening that turns convolution
//! into matrix multiplication.
//!
//! Each kernel-sized patch of an input map becomes one row of the patch
//! matrix, ordered row-major over (sample, out_y, out_x); inside a row the
//! values are ordered (channel, ky, kx). Flattened 3-D kernels stacked as
//! columns then make `patches * weights` the convolution output.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::BiasMode;

/// A batch of 3-D feature maps, stored row-major over (sample, channel, y, x).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<f64>,
}

impl Batch4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "batch data length mismatch");
        Self { n, c, h, w, data }
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self::new(n, c, h, w, vec![0.0; n * c * h * w])
    }

    #[inline]
    pub fn get(&self, s: usize, ch: usize, y: usize, x: usize) -> f64 {
        self.data[((s * self.c + ch) * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, s: usize, ch: usize, y: usize, x: usize, v: f64) {
        self.data[((s * self.c + ch) * self.h + y) * self.w + x] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Flattens to an `n x (c*h*w)` matrix, (channel, y, x) order per row.
    pub fn flatten(&self) -> Matrix {
        Matrix::new(self.n, self.c * self.h * self.w, self.data.clone())
    }

    /// Inverse of [`Batch4::flatten`] for a matrix of matching width.
    pub fn from_matrix(m: &Matrix, c: usize, h: usize, w: usize) -> Self {
        assert_eq!(m.cols(), c * h * w, "matrix width does not fold into {c}x{h}x{w}");
        Self::new(m.rows(), c, h, w, m.data().to_vec())
    }

    /// Rows `idx` of the batch, in the given order.
    pub fn select_samples(&self, idx: &[usize]) -> Self {
        let stride = self.c * self.h * self.w;
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &s in idx {
            data.extend_from_slice(&self.data[s * stride..(s + 1) * stride]);
        }
        Self::new(idx.len(), self.c, self.h, self.w, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.n, self.c, self.h, self.w, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Output spatial size of a valid (un-padded) convolution.
pub fn conv_output_dims(h: usize, w: usize, kh: usize, kw: usize, stride: usize) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::Config("conv stride must be >= 1".into()));
    }
    if h < kh || w < kw {
        return Err(Error::Shape(format!(
            "conv input {h}x{w} smaller than kernel {kh}x{kw}"
        )));
    }
    Ok(((h - kh) / stride + 1, (w - kw) / stride + 1))
}

/// Flattens every kernel-sized patch of `input` into one row.
///
/// Rows are ordered row-major over (sample, out_y, out_x); columns over
/// (channel, ky, kx), plus a trailing constant-1 column when `bias` is
/// [`BiasMode::Augmented`].
pub fn im2col(input: &Batch4, kh: usize, kw: usize, stride: usize, bias: BiasMode) -> Result<Matrix> {
    let (out_h, out_w) = conv_output_dims(input.h, input.w, kh, kw, stride)?;
    let patch_len = input.c * kh * kw;
    let cols = patch_len + if bias == BiasMode::Augmented { 1 } else { 0 };
    let rows = input.n * out_h * out_w;
    let mut out = Matrix::zeros(rows, cols);
    let mut r = 0;
    for s in 0..input.n {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let y0 = oy * stride;
                let x0 = ox * stride;
                let mut col = 0;
                for ch in 0..input.c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            out.set(r, col, input.get(s, ch, y0 + ky, x0 + kx));
                            col += 1;
                        }
                    }
                }
                if bias == BiasMode::Augmented {
                    out.set(r, col, 1.0);
                }
                r += 1;
            }
        }
    }
    Ok(out)
}

/// Scatter-adds a patch-matrix gradient (without the bias column) back onto
/// the input map it was extracted from. Overlapping patches accumulate.
pub fn col2im(
    d_patches: &Matrix,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Result<Batch4> {
    let (out_h, out_w) = conv_output_dims(h, w, kh, kw, stride)?;
    if d_patches.rows() != n * out_h * out_w || d_patches.cols() != c * kh * kw {
        return Err(Error::Shape(format!(
            "col2im: got {}x{}, expected {}x{}",
            d_patches.rows(),
            d_patches.cols(),
            n * out_h * out_w,
            c * kh * kw
        )));
    }
    let mut out = Batch4::zeros(n, c, h, w);
    let mut r = 0;
    for s in 0..n {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let y0 = oy * stride;
                let x0 = ox * stride;
                let mut col = 0;
                for ch in 0..c {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let prev = out.get(s, ch, y0 + ky, x0 + kx);
                            out.set(s, ch, y0 + ky, x0 + kx, prev + d_patches.get(r, col));
                            col += 1;
                        }
                    }
                }
                r += 1;
            }
        }
    }
    Ok(out)
}
