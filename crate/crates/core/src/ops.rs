//! Forward/backward kernels over raw row-major buffers.
//!
//! Shapes are validated by the tape before any of these run.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::matmul;
use crate::scalar::Scalar;

/// Geometry of a batched valid (unpadded, stride 1) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
}

impl ConvGeom {
    pub fn ho(&self) -> usize {
        self.h - self.k + 1
    }
    pub fn wo(&self) -> usize {
        self.w - self.k + 1
    }
    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }
    fn out_spatial(&self) -> usize {
        self.ho() * self.wo()
    }
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (k, ho, wo) = (g.k, g.ho(), g.wo());
    let hw = ho * wo;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let src = &plane[(oy + ki) * g.w + kj..(oy + ki) * g.w + kj + wo];
                    dst[oy * wo..(oy + 1) * wo].copy_from_slice(src);
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (k, ho, wo) = (g.k, g.ho(), g.wo());
    let hw = ho * wo;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let dst = &mut plane[(oy + ki) * g.w + kj..(oy + ki) * g.w + kj + wo];
                    for (d, &s) in dst.iter_mut().zip(&src[oy * wo..(oy + 1) * wo]) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let hw = g.out_spatial();
    let patch = g.patch();
    let mut out = vec![T::zero(); g.batch * g.c_out * hw];
    let mut cols = if g.k == 1 { Vec::new() } else { vec![T::zero(); patch * hw] };
    for n in 0..g.batch {
        let xn = &x[n * g.in_len()..(n + 1) * g.in_len()];
        let on = &mut out[n * g.c_out * hw..(n + 1) * g.c_out * hw];
        let src: &[T] = if g.k == 1 {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        matmul(g.c_out, patch, hw, w, false, src, false, on, false);
        for (co, row) in on.chunks_exact_mut(hw).enumerate() {
            let bias = b[co];
            row.iter_mut().for_each(|v| *v = *v + bias);
        }
    }
    out
}

/// Returns (dx, dw, db); each only computed when requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need: [bool; 3],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let hw = g.out_spatial();
    let patch = g.patch();
    let mut dx = need[0].then(|| vec![T::zero(); g.batch * g.in_len()]);
    let mut dw = need[1].then(|| vec![T::zero(); g.c_out * patch]);
    let mut db = need[2].then(|| vec![T::zero(); g.c_out]);
    let mut cols = vec![T::zero(); if g.k == 1 { 0 } else { patch * hw }];
    let mut dcols = vec![T::zero(); if need[0] && g.k != 1 { patch * hw } else { 0 }];
    for n in 0..g.batch {
        let xn = &x[n * g.in_len()..(n + 1) * g.in_len()];
        let dyn_ = &dy[n * g.c_out * hw..(n + 1) * g.c_out * hw];
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if g.k == 1 {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            matmul(g.c_out, hw, patch, dyn_, false, src, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * g.in_len()..(n + 1) * g.in_len()];
            if g.k == 1 {
                matmul(patch, g.c_out, hw, w, true, dyn_, false, dxn, true);
            } else {
                matmul(patch, g.c_out, hw, w, true, dyn_, false, &mut dcols, false);
                col2im_add(g, &dcols, dxn);
            }
        }
        if let Some(db) = db.as_mut() {
            for (co, row) in dyn_.chunks_exact(hw).enumerate() {
                db[co] = db[co] + row.iter().copied().sum::<T>();
            }
        }
    }
    (dx, dw, db)
}

/// 2×2 / stride-2 max pooling over `planes` independent h×w planes.
/// Trailing odd rows/columns are dropped. Ties resolve to the first element
/// in row-major window order.
pub(crate) fn maxpool2_forward<T: Scalar>(
    planes: usize,
    h: usize,
    w: usize,
    x: &[T],
) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = x[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

/// y[r, :] = w · x[r, :] + b for every row r of x (rows × n), w is m×n.
pub(crate) fn linear_forward<T: Scalar>(
    rows: usize,
    n: usize,
    m: usize,
    x: &[T],
    w: &[T],
    b: &[T],
) -> Vec<T> {
    let mut y = vec![T::zero(); rows * m];
    matmul(rows, n, m, x, false, w, true, &mut y, false);
    for row in y.chunks_exact_mut(m) {
        for (v, &bias) in row.iter_mut().zip(b) {
            *v = *v + bias;
        }
    }
    y
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax_rows<T: Scalar>(cols: usize, x: &[T]) -> Vec<T> {
    let mut y = x.to_vec();
    for row in y.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / sum);
    }
    y
}

pub(crate) fn softmax_rows_backward<T: Scalar>(cols: usize, y: &[T], dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, dyr), dxr) in y
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// Normalizes each length-`cols` row to zero mean / unit variance.
/// Returns (normalized rows, per-row inverse std).
pub(crate) fn row_norm<T: Scalar>(cols: usize, eps: T, x: &[T]) -> (Vec<T>, Vec<T>) {
    let nc = T::from_usize(cols).unwrap();
    let mut y = x.to_vec();
    let mut inv = Vec::with_capacity(x.len() / cols);
    for row in y.chunks_exact_mut(cols) {
        let mean = row.iter().copied().sum::<T>() / nc;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nc;
        let r = T::one() / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * r);
        inv.push(r);
    }
    (y, inv)
}

/// Gradient of [`row_norm`] given its output `xhat`.
pub(crate) fn row_norm_backward<T: Scalar>(cols: usize, xhat: &[T], inv: &[T], dy: &[T]) -> Vec<T> {
    let nc = T::from_usize(cols).unwrap();
    let mut dx = vec![T::zero(); xhat.len()];
    for (((xr, dyr), dxr), &r) in xhat
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
        .zip(inv)
    {
        let mean_dy = dyr.iter().copied().sum::<T>() / nc;
        let mean_dyx = xr.iter().zip(dyr).map(|(&a, &b)| a * b).sum::<T>() / nc;
        for ((d, &xv), &g) in dxr.iter_mut().zip(xr).zip(dyr) {
            *d = r * (g - mean_dy - xv * mean_dyx);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (ho, wo) = (g.ho(), g.wo());
        let mut out = vec![0.0; g.batch * g.c_out * ho * wo];
        for n in 0..g.batch {
            for co in 0..g.c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = b[co];
                        for ci in 0..g.c_in {
                            for ki in 0..g.k {
                                for kj in 0..g.k {
                                    s += w[((co * g.c_in + ci) * g.k + ki) * g.k + kj]
                                        * x[((n * g.c_in + ci) * g.h + oy + ki) * g.w + ox + kj];
                                }
                            }
                        }
                        out[((n * g.c_out + co) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        for k in [1, 3, 5] {
            let g = ConvGeom {
                batch: 2,
                c_in: 3,
                h: 7,
                w: 6,
                c_out: 4,
                k,
            };
            let x: Vec<f64> = (0..2 * 3 * 7 * 6).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..4 * 3 * k * k).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.7).collect();
            let b = [0.5, -1.0, 0.0, 2.0];
            let got = conv2d_forward(&g, &x, &w, &b);
            let want = naive_conv(&g, &x, &w, &b);
            for (a, e) in got.iter().zip(&want) {
                assert!((a - e).abs() < 1e-10, "k={k}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn maxpool_ties_pick_first_in_window() {
        let x = [1.0f32, 1.0, 1.0, 1.0];
        let (y, arg) = maxpool2_forward(1, 2, 2, &x);
        assert_eq!(y, vec![1.0]);
        assert_eq!(arg, vec![0]);
    }
}
