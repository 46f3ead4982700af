//! im2col convolution kernels shared by the forward and reverse passes.
//!
//! A transposed convolution is evaluated as the adjoint of the matching
//! direct convolution, so both ops reuse one [`ConvGeom`].

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

/// Geometry of a direct convolution from `(in_c, in_h, in_w)` to
/// `(out_c, out_h, out_w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Rows of the column matrix.
    pub fn k(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    /// Columns of the column matrix.
    pub fn p(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.p()
    }
}

/// Standard output extent; `None` when the kernel does not fit.
pub(crate) fn conv_out_dim(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Transposed-convolution output extent `(size - 1) * stride - 2 * pad + kernel`.
pub(crate) fn conv_transpose_out_dim(
    size: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    let full = (size.checked_sub(1)?) * stride + kernel;
    full.checked_sub(2 * pad).filter(|&v| v > 0)
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let p = g.p();
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
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

/// Scatter-adds `cols` into `x`, starting each channel from its bias.
fn col2im(cols: &[f64], g: &ConvGeom, bias: Option<&[f32]>, x: &mut [f32]) {
    let p = g.p();
    let mut acc = vec![0.0f64; g.in_h * g.in_w];
    for c in 0..g.in_c {
        let start = bias.map_or(0.0, |b| b[c] as f64);
        acc.iter_mut().for_each(|v| *v = start);
        let plane = &mut acc[..];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
        let dst = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for (d, v) in dst.iter_mut().zip(&acc) {
            *d += *v as f32;
        }
    }
}

/// `a * b` with optional transposition of the row-major operands,
/// accumulated in f64.
fn gemm_wide(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool) -> Vec<f64> {
    let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let (a64, b64) = (widen(a), widen(b));
    let a = if a_t {
        ArrayView2::from_shape((k, m), &a64[..])
            .unwrap()
            .reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), &a64[..]).unwrap()
    };
    let b = if b_t {
        ArrayView2::from_shape((n, k), &b64[..])
            .unwrap()
            .reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), &b64[..]).unwrap()
    };
    let mut c = vec![0.0f64; m * n];
    let mut cv = ArrayViewMut2::from_shape((m, n), &mut c[..]).unwrap();
    general_mat_mul(1.0, &a, &b, 0.0, &mut cv);
    c
}

/// `c = a * b`, rounded once on store.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32]) {
    for (dst, v) in c.iter_mut().zip(gemm_wide(m, k, n, a, a_t, b, b_t)) {
        *dst = v as f32;
    }
}

/// Sums per-item partial results in batch order so the total is independent
/// of worker scheduling.
fn ordered_sum(partials: Vec<Vec<f32>>, len: usize) -> Vec<f32> {
    let mut total = vec![0.0f64; len];
    for part in partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v as f64;
        }
    }
    total.into_iter().map(|v| v as f32).collect()
}

fn bias_grad(dy: &[f32], batch: usize, channels: usize, plane: usize) -> Vec<f32> {
    let mut db = vec![0.0f64; channels];
    for n in 0..batch {
        for (c, acc) in db.iter_mut().enumerate() {
            let start = (n * channels + c) * plane;
            *acc += dy[start..start + plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
    }
    db.into_iter().map(|v| v as f32).collect()
}

pub(crate) fn conv2d_forward(
    x: &[f32],
    batch: usize,
    w: &[f32],
    bias: Option<&[f32]>,
    g: &ConvGeom,
) -> Vec<f32> {
    let mut out = vec![0.0f32; batch * g.out_len()];
    out.par_chunks_mut(g.out_len())
        .zip(x.par_chunks(g.in_len()))
        .for_each(|(y, xn)| {
            let mut cols = vec![0.0f32; g.k() * g.p()];
            im2col(xn, g, &mut cols);
            let acc = gemm_wide(g.out_c, g.k(), g.p(), w, false, &cols, false);
            for (o, (dst, src)) in y.chunks_mut(g.p()).zip(acc.chunks(g.p())).enumerate() {
                let b = bias.map_or(0.0, |b| b[o] as f64);
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = (v + b) as f32;
                }
            }
        });
    out
}

/// Per-item input and weight gradients.
type ItemGrads = (Option<Vec<f32>>, Option<Vec<f32>>);

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

pub(crate) fn conv2d_backward(
    x: &[f32],
    batch: usize,
    w: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads {
    let [need_x, need_w, need_b] = need;
    let mut dx = need_x.then(|| vec![0.0f32; batch * g.in_len()]);
    let wlen = g.out_c * g.k();
    let mut w_partials: Vec<Vec<f32>> = Vec::new();
    if need_x || need_w {
        let per_item: Vec<ItemGrads> = (0..batch)
            .into_par_iter()
            .map(|n| {
                let xn = &x[n * g.in_len()..(n + 1) * g.in_len()];
                let dyn_ = &dy[n * g.out_len()..(n + 1) * g.out_len()];
                let dxn = need_x.then(|| {
                    let dcols = gemm_wide(g.k(), g.out_c, g.p(), w, true, dyn_, false);
                    let mut dxn = vec![0.0f32; g.in_len()];
                    col2im(&dcols, g, None, &mut dxn);
                    dxn
                });
                let dwn = need_w.then(|| {
                    let mut cols = vec![0.0f32; g.k() * g.p()];
                    im2col(xn, g, &mut cols);
                    let mut dwn = vec![0.0f32; wlen];
                    gemm(g.out_c, g.p(), g.k(), dyn_, false, &cols, true, &mut dwn);
                    dwn
                });
                (dxn, dwn)
            })
            .collect();
        for (n, (dxn, dwn)) in per_item.into_iter().enumerate() {
            if let (Some(dx), Some(dxn)) = (dx.as_mut(), dxn) {
                dx[n * g.in_len()..(n + 1) * g.in_len()].copy_from_slice(&dxn);
            }
            if let Some(dwn) = dwn {
                w_partials.push(dwn);
            }
        }
    }
    ConvGrads {
        input: dx.take(),
        weight: need_w.then(|| ordered_sum(w_partials, wlen)),
        bias: need_b.then(|| bias_grad(dy, batch, g.out_c, g.p())),
    }
}

/// Transposed convolution as the adjoint of the direct convolution `g`
/// (which maps the transposed output back onto the transposed input).
pub(crate) fn conv_transpose2d_forward(
    x: &[f32],
    batch: usize,
    w: &[f32],
    bias: Option<&[f32]>,
    g: &ConvGeom,
) -> Vec<f32> {
    let mut out = vec![0.0f32; batch * g.in_len()];
    out.par_chunks_mut(g.in_len())
        .zip(x.par_chunks(g.out_len()))
        .for_each(|(y, xn)| {
            let cols = gemm_wide(g.k(), g.out_c, g.p(), w, true, xn, false);
            col2im(&cols, g, bias, y);
        });
    out
}

pub(crate) fn conv_transpose2d_backward(
    x: &[f32],
    batch: usize,
    w: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads {
    let [need_x, need_w, need_b] = need;
    let wlen = g.out_c * g.k();
    let mut dx = need_x.then(|| vec![0.0f32; batch * g.out_len()]);
    let mut w_partials = Vec::new();
    if need_x || need_w {
        let per_item: Vec<ItemGrads> = (0..batch)
            .into_par_iter()
            .map(|n| {
                let xn = &x[n * g.out_len()..(n + 1) * g.out_len()];
                let dyn_ = &dy[n * g.in_len()..(n + 1) * g.in_len()];
                let mut cols = vec![0.0f32; g.k() * g.p()];
                im2col(dyn_, g, &mut cols);
                let dxn = need_x.then(|| {
                    let mut dxn = vec![0.0f32; g.out_len()];
                    gemm(g.out_c, g.k(), g.p(), w, false, &cols, false, &mut dxn);
                    dxn
                });
                let dwn = need_w.then(|| {
                    let mut dwn = vec![0.0f32; wlen];
                    gemm(g.out_c, g.p(), g.k(), xn, false, &cols, true, &mut dwn);
                    dwn
                });
                (dxn, dwn)
            })
            .collect();
        for (n, (dxn, dwn)) in per_item.into_iter().enumerate() {
            if let (Some(dx), Some(dxn)) = (dx.as_mut(), dxn) {
                dx[n * g.out_len()..(n + 1) * g.out_len()].copy_from_slice(&dxn);
            }
            if let Some(dwn) = dwn {
                w_partials.push(dwn);
            }
        }
    }
    ConvGrads {
        input: dx.take(),
        weight: need_w.then(|| ordered_sum(w_partials, wlen)),
        bias: need_b.then(|| bias_grad(dy, batch, g.in_c, g.in_h * g.in_w)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle for the im2col path.
    fn naive_conv(x: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
        let mut out = vec![0.0; g.out_len()];
        for o in 0..g.out_c {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0f64;
                    for c in 0..g.in_c {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= g.in_h as isize
                                    || ix >= g.in_w as isize
                                {
                                    continue;
                                }
                                let xv = x[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                                let wv = w[((o * g.in_c + c) * g.kh + ki) * g.kw + kj];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[(o * g.out_h + oy) * g.out_w + ox] = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_nested_loops() {
        let g = ConvGeom {
            in_c: 2,
            in_h: 5,
            in_w: 6,
            out_c: 3,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
            out_h: 3,
            out_w: 3,
        };
        let x: Vec<f32> = (0..g.in_len()).map(|i| (i as f32 * 0.37).sin()).collect();
        let w: Vec<f32> = (0..g.out_c * g.k())
            .map(|i| (i as f32 * 0.11).cos())
            .collect();
        let fast = conv2d_forward(&x, 1, &w, None, &g);
        let slow = naive_conv(&x, &w, &g);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn output_dims() {
        assert_eq!(conv_out_dim(64, 4, 2, 1), Some(32));
        assert_eq!(conv_out_dim(2, 3, 1, 0), None);
        assert_eq!(conv_transpose_out_dim(32, 4, 2, 1), Some(64));
        assert_eq!(conv_transpose_out_dim(1, 2, 1, 0), Some(2));
    }
}
