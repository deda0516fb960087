//! Numeric kernels.
//!
//! Every reduction runs in an order fixed by the operand shapes, so results
//! are bit-reproducible across runs. `gemm` delegates to a single-threaded
//! blocked kernel whose summation order depends only on `(m, k, n)`.

use super::tensor::Real;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    T::gemm_acc(m, k, n, a, b, c);
}

/// Row-major transpose of an `m×n` matrix.
pub fn transpose<T: Real>(m: usize, n: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Output extent of a convolution along one axis.
pub fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Geometry of one 2-D convolution window pass.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        Some(Self {
            channels,
            h,
            w,
            k,
            stride,
            pad,
            oh: conv_out(h, k, stride, pad)?,
            ow: conv_out(w, k, stride, pad)?,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one image `[C,H,W]` into columns `[C·k·k, OH·OW]`.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let ncols = g.col_cols();
    let mut cols = vec![T::zero(); g.col_rows() * ncols];
    for c in 0..g.channels {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back into `[C,H,W]`, accumulating.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] = x[base + ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}
