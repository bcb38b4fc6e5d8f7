//! Readout decomposition, attention maps and gradient receptive fields.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::metrics::average_curves;
use crate::model::Model;
use crate::spec::ReadoutKind;
use crate::IMAGE_SIDE;

#[cfg(not(feature = "std"))]
use num_traits::Float;

const BATCH: usize = 64;

/// Additive split of one prediction over the readout grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub h: usize,
    pub w: usize,
    /// Row-major h×w; entry p is Σ_c weight[c, p] · activation[c, p].
    pub grid: Vec<f64>,
    pub bias: f64,
    pub center: f64,
    pub surround: f64,
    pub prediction: f64,
}

impl Decomposition {
    pub fn center_index(&self) -> usize {
        (self.h / 2) * self.w + self.w / 2
    }

    /// |center + surround + bias − prediction|.
    pub fn residual(&self) -> f64 {
        (self.center + self.surround + self.bias - self.prediction).abs()
    }
}

/// Per-location contributions of a linear readout over a C×H×W map.
pub fn contribution_grid(weights: &[f64], activations: &[f64], [c, h, w]: [usize; 3]) -> Vec<f64> {
    let hw = h * w;
    let mut grid = vec![0.0; hw];
    for ch in 0..c {
        for (p, g) in grid.iter_mut().enumerate() {
            *g += weights[ch * hw + p] * activations[ch * hw + p];
        }
    }
    grid
}

/// Decomposes the prediction for every image. The model runs in f64 so the
/// parts add up to the reported prediction to rounding error. A center
/// readout gives a grid that is zero away from the center.
pub fn fcl_decompose(model: &Model<f32>, images: &[f32]) -> Result<Vec<Decomposition>> {
    let m = model.cast::<f64>();
    let kind = m.spec().readout().ok_or(Error::NotFcl)?;
    let last = m.spec().blocks.len() - 1;
    let shape = m.shapes()[last];
    let [c, h, w] = shape;
    let weights = m.param("readout.weight").ok_or(Error::NotFcl)?.value.data().to_vec();
    let bias = m.param("readout.bias").map_or(0.0, |p| p.value.data()[0]);
    let full: Vec<f64> = match kind {
        ReadoutKind::Fcl => weights,
        ReadoutKind::Ctl => {
            if h % 2 == 0 || w % 2 == 0 {
                return Err(invalid("center readout over an even grid"));
            }
            let mut full = vec![0.0; c * h * w];
            let center = (h / 2) * w + w / 2;
            for ch in 0..c {
                full[ch * h * w + center] = weights[ch];
            }
            full
        }
    };
    let px = m.shapes()[0].iter().product::<usize>();
    let images: Vec<f64> = images.iter().map(|&v| v as f64).collect();
    let mut out = Vec::with_capacity(images.len() / px.max(1));
    for chunk in images.chunks(BATCH * px) {
        let taps = m.forward_taps(chunk)?;
        let per = c * h * w;
        for (i, act) in taps.readout_input.data().chunks_exact(per).enumerate() {
            let grid = contribution_grid(&full, act, shape);
            let center_idx = (h / 2) * w + w / 2;
            let center = grid[center_idx];
            let surround = grid.iter().enumerate().filter(|&(p, _)| p != center_idx).map(|(_, v)| v).sum();
            out.push(Decomposition {
                h,
                w,
                grid,
                bias,
                center,
                surround,
                prediction: taps.prediction[i],
            });
        }
    }
    Ok(out)
}

/// Center, surround and prediction ordered by prediction, descending.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionCurves {
    pub center: Vec<f64>,
    pub surround: Vec<f64>,
    pub prediction: Vec<f64>,
}

pub fn decomposition_curves(parts: &[Decomposition]) -> DecompositionCurves {
    let mut order: Vec<usize> = (0..parts.len()).collect();
    order.sort_by(|&a, &b| parts[b].prediction.total_cmp(&parts[a].prediction));
    DecompositionCurves {
        center: order.iter().map(|&i| parts[i].center).collect(),
        surround: order.iter().map(|&i| parts[i].surround).collect(),
        prediction: order.iter().map(|&i| parts[i].prediction).collect(),
    }
}

/// Rank-wise mean over neurons (each already rank ordered).
pub fn population_decomposition(curves: &[DecompositionCurves]) -> Result<DecompositionCurves> {
    let pick = |f: fn(&DecompositionCurves) -> &Vec<f64>| -> Result<Vec<f64>> {
        average_curves(&curves.iter().map(|c| f(c).clone()).collect::<Vec<_>>())
    };
    Ok(DecompositionCurves {
        center: pick(|c| &c.center)?,
        surround: pick(|c| &c.surround)?,
        prediction: pick(|c| &c.prediction)?,
    })
}

/// Mean |contribution| per readout location.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn center_index(&self) -> usize {
        (self.h / 2) * self.w + self.w / 2
    }

    /// Center value over the mean of the other locations.
    pub fn dominance_ratio(&self) -> Option<f64> {
        let c = self.center_index();
        let n = self.values.len().checked_sub(1).filter(|&n| n > 0)?;
        let mean = self.values.iter().enumerate().filter(|&(i, _)| i != c).map(|(_, v)| v).sum::<f64>() / n as f64;
        (mean > 0.0).then(|| self.values[c] / mean)
    }
}

pub fn hypercolumn_heatmap(parts: &[Decomposition]) -> Result<Heatmap> {
    let first = parts.first().ok_or_else(|| invalid("no decompositions to average"))?;
    let mut values = vec![0.0; first.grid.len()];
    for d in parts {
        if d.grid.len() != values.len() {
            return Err(invalid("decompositions over different grids"));
        }
        for (v, g) in values.iter_mut().zip(&d.grid) {
            *v += g.abs();
        }
    }
    values.iter_mut().for_each(|v| *v /= parts.len() as f64);
    Ok(Heatmap {
        h: first.h,
        w: first.w,
        values,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOverlay {
    pub query: usize,
    pub h: usize,
    pub w: usize,
    /// Attention of the query token over all h·w tokens.
    pub row: Vec<f64>,
    /// IMAGE_SIDE² pixel weights: each token's weight spread evenly over
    /// the pixels of its cell, so the map sums to the row's total.
    pub overlay: Vec<f64>,
}

impl AttentionOverlay {
    pub fn entropy(&self) -> f64 {
        entropy(&self.row)
    }
}

/// Shannon entropy in nats; zero entries contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Pixel range [start, end) covered by cell `i` of `n` along a side.
pub fn cell_span(i: usize, n: usize, side: usize) -> (usize, usize) {
    (i * side / n, (i + 1) * side / n)
}

/// Attention row of `query` (default: center token) for each image.
pub fn attention_overlay(model: &Model<f32>, images: &[f32], query: Option<usize>) -> Result<Vec<AttentionOverlay>> {
    let sa = model.spec().attention_index().ok_or(Error::NoAttention)?;
    let [_, h, w] = model.shapes()[sa];
    let t = h * w;
    let q = query.unwrap_or((h / 2) * w + w / 2);
    if q >= t {
        return Err(invalid(alloc::format!("query token {q} of {t}")));
    }
    let px = model.shapes()[0].iter().product::<usize>();
    let side = model.shapes()[0][1];
    let mut out = Vec::new();
    for chunk in images.chunks(BATCH * px) {
        let taps = model.forward_taps(chunk)?;
        let att = taps.attention.ok_or(Error::NoAttention)?;
        for a in att.data().chunks_exact(t * t) {
            let row: Vec<f64> = a[q * t..(q + 1) * t].iter().map(|&v| v as f64).collect();
            let mut overlay = vec![0.0; side * side];
            for i in 0..h {
                let (r0, r1) = cell_span(i, h, side);
                for j in 0..w {
                    let (c0, c1) = cell_span(j, w, side);
                    let share = row[i * w + j] / ((r1 - r0) * (c1 - c0)) as f64;
                    for r in r0..r1 {
                        overlay[r * side + c0..r * side + c1].iter_mut().for_each(|v| *v = share);
                    }
                }
            }
            out.push(AttentionOverlay {
                query: q,
                h,
                w,
                row,
                overlay,
            });
        }
    }
    Ok(out)
}

/// Pixels with a non-zero prediction gradient for at least one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct RfMask {
    pub side: usize,
    pub mask: Vec<bool>,
}

impl RfMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Inclusive (row_min, row_max, col_min, col_max), None if empty.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in self.mask.iter().enumerate().filter(|(_, &m)| m) {
            let (r, c) = (i / self.side, i % self.side);
            bb = Some(match bb {
                None => (r, r, c, c),
                Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
            });
        }
        bb
    }

    /// True when the mask is exactly the filled bounding box.
    pub fn is_rectangle(&self) -> bool {
        self.bounding_box()
            .is_some_and(|(r0, r1, c0, c1)| (r1 - r0 + 1) * (c1 - c0 + 1) == self.count())
    }
}

pub fn empirical_rf(model: &Model<f32>, probes: &[f32]) -> Result<RfMask> {
    let [c, side, w] = model.shapes()[0];
    if c != 1 || side != w {
        return Err(invalid("receptive fields are measured on square single-channel inputs"));
    }
    let px = side * side;
    if probes.is_empty() || probes.len() % px != 0 {
        return Err(invalid("probes must be whole images"));
    }
    let mut mask = vec![false; px];
    for chunk in probes.chunks(BATCH * px) {
        let g = model.input_gradient(chunk)?;
        for im in g.chunks_exact(px) {
            for (m, &v) in mask.iter_mut().zip(im) {
                *m |= v != 0.0;
            }
        }
    }
    Ok(RfMask { side, mask })
}

/// Convenience: image side of the default stimulus geometry.
pub const OVERLAY_SIDE: usize = IMAGE_SIDE;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Freeze;
    use crate::spec::preset;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn images(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * crate::IMAGE_PIXELS).map(|_| rng.gen()).collect()
    }

    #[test]
    fn decomposition_adds_up() {
        let m = Model::<f32>::build(&preset("ff+sa-CNN").unwrap(), 2).unwrap();
        for d in fcl_decompose(&m, &images(5, 1)).unwrap() {
            assert!(d.residual() <= 1e-9 * d.prediction.abs() + 1e-12, "{}", d.residual());
            assert_eq!(d.center, d.grid[d.center_index()]);
            assert_eq!((d.h, d.w), (5, 5));
        }
    }

    #[test]
    fn zero_surround_weights_leave_center_and_bias() {
        let mut m = Model::<f32>::build(&preset("ff+sa-CNN*").unwrap(), 3).unwrap();
        let keep: Vec<usize> = crate::train::fcl_center_indices([30, 9, 9]);
        let w = m.param_mut("readout.weight").unwrap();
        for (i, v) in w.value.data_mut().iter_mut().enumerate() {
            if !keep.contains(&i) {
                *v = 0.0;
            }
        }
        for d in fcl_decompose(&m, &images(3, 2)).unwrap() {
            assert_eq!(d.surround, 0.0);
            assert!((d.center + d.bias - d.prediction).abs() < 1e-12);
        }
        let parts = fcl_decompose(&m, &images(4, 3)).unwrap();
        let hm = hypercolumn_heatmap(&parts).unwrap();
        for (i, v) in hm.values.iter().enumerate() {
            assert_eq!(*v == 0.0, i != hm.center_index());
        }
        assert_eq!(decomposition_curves(&parts).surround, vec![0.0; 4]);
    }

    #[test]
    fn center_readout_decomposes_to_center_only() {
        let m = Model::<f32>::build(&preset("rf-CNN").unwrap(), 3).unwrap();
        let d = &fcl_decompose(&m, &images(1, 2)).unwrap()[0];
        assert_eq!(d.surround, 0.0);
        assert!((d.center + d.bias - d.prediction).abs() < 1e-12);
    }

    #[test]
    fn flat_heatmap_for_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = [16, 5, 5];
        let weights = vec![1.0; 16 * 25];
        let parts: Vec<Decomposition> = (0..2000)
            .map(|_| {
                let act: Vec<f64> = (0..16 * 25).map(|_| if rng.gen() { 1.0 } else { -1.0 }).collect();
                let grid = contribution_grid(&weights, &act, shape);
                Decomposition {
                    h: 5,
                    w: 5,
                    center: grid[12],
                    surround: 0.0,
                    bias: 0.0,
                    prediction: 0.0,
                    grid,
                }
            })
            .collect();
        let hm = hypercolumn_heatmap(&parts).unwrap();
        let mean = hm.values.iter().sum::<f64>() / 25.0;
        assert!(hm.values.iter().all(|v| (v / mean - 1.0).abs() < 0.1), "{:?}", hm.values);
        assert!((hm.dominance_ratio().unwrap() - 1.0).abs() < 0.1);
    }

    #[test]
    fn constant_predictor_gives_flat_curves() {
        let d = Decomposition {
            h: 1,
            w: 1,
            grid: vec![0.3],
            bias: 0.1,
            center: 0.3,
            surround: 0.0,
            prediction: 0.4,
        };
        let c = decomposition_curves(&vec![d; 6]);
        assert!(c.prediction.iter().all(|&v| v == 0.4));
        assert!(c.center.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn zero_query_key_gives_uniform_overlay() {
        let mut m = Model::<f32>::build(&preset("rf+sa-CNN").unwrap(), 5).unwrap();
        for p in m.params_mut() {
            if p.name.starts_with("sa0.query") || p.name.starts_with("sa0.key") {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let o = &attention_overlay(&m, &images(1, 6), None).unwrap()[0];
        assert_eq!(o.query, 40);
        assert!(o.row.iter().all(|&a| (a - 1.0 / 81.0).abs() < 1e-7));
        assert!((o.overlay.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!((o.entropy() - (81.0f64).ln()).abs() < 1e-5);
    }

    #[test]
    fn overlay_needs_attention() {
        let m = Model::<f32>::build(&preset("ff-CNN").unwrap(), 5).unwrap();
        assert!(matches!(attention_overlay(&m, &images(1, 6), None), Err(Error::NoAttention)));
    }

    #[test]
    fn attention_row_reproduces_the_unmixed_output() {
        let m = Model::<f32>::build(&preset("rf+sa-CNN").unwrap(), 8).unwrap();
        let img = images(1, 9);
        let taps = m.forward_taps(&img).unwrap();
        let x = &taps.block_outputs[1];
        let (c, t) = (x.shape()[1], 81);
        let rows = attention_overlay(&m, &img, Some(7)).unwrap();
        let pre = taps.sa_pre_norm.unwrap();
        for ch in 0..c {
            let recon: f64 = (0..t).map(|j| rows[0].row[j] * x.data()[ch * t + j] as f64).sum();
            let got = pre.data()[7 * c + ch] as f64;
            assert!((recon - got).abs() < 1e-5 * got.abs().max(1.0), "{recon} vs {got}");
        }
    }

    #[test]
    fn receptive_fields() {
        let probes = images(2, 10);
        let mut boxes = Vec::new();
        for seed in 0..3 {
            let m = Model::<f32>::build(&preset("rf-CNN").unwrap(), seed).unwrap();
            let rf = empirical_rf(&m, &probes).unwrap();
            assert!(rf.is_rectangle());
            boxes.push(rf.bounding_box().unwrap());
        }
        assert!(boxes.iter().all(|b| *b == (16, 31, 16, 31)), "{boxes:?}");
        // Floor pooling drops the last two rows and columns.
        for name in ["ff-CNN", "rf+sa-CNN"] {
            let m = Model::<f32>::build(&preset(name).unwrap(), 1).unwrap();
            let rf = empirical_rf(&m, &probes).unwrap();
            assert_eq!(rf.bounding_box(), Some((0, 47, 0, 47)), "{name}");
            assert_eq!(rf.count(), 48 * 48, "{name}");
        }
    }

    #[test]
    fn analysis_leaves_parameters_alone() {
        let mut m = Model::<f32>::build(&preset("ff+sa-CNN").unwrap(), 1).unwrap();
        m.params_mut()[0].freeze = Freeze::Frozen;
        let before = m.clone();
        let img = images(2, 3);
        fcl_decompose(&m, &img).unwrap();
        attention_overlay(&m, &img, None).unwrap();
        empirical_rf(&m, &img).unwrap();
        assert_eq!(m, before);
    }
}
