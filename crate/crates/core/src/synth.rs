//! Ground-truth model neurons and procedural natural-like stimuli.
//!
//! A neuron's drive is `(C · (1 + gain · S))²`. `C = e / (e + h)` is the
//! quadrature Gabor energy `e` at the receptive-field center (in units of a
//! reference energy) passed through a saturation with semi-saturation `h`.
//! `S` in [0, 1] is the squared orientation similarity of the surround: the
//! share of Gabor energy at the preferred orientation, out of four
//! orientations, pooled over eight points on a ring that starts just
//! outside the 16×16 center support of a CTL readout. `gain = 0` gives a pure classical-RF neuron.
//!
//! `h` is calibrated per neuron so that few calibration images drive the
//! neuron above half its peak. Center energy alone then cannot rank the
//! peak images of a surround neuron: most strong centers saturate and the
//! surround decides.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::error::{invalid, Result};
use crate::{IMAGE_PIXELS, IMAGE_SIDE};

#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Pixels from the neuron center to where the surround filters begin;
/// the center support reaches 7.5 px plus jitter.
const RING_CLEARANCE: f64 = 9.0;

/// Points sampled on the surround ring.
pub const SURROUND_POINTS: usize = 8;
/// Orientations compared at each ring point.
pub const ORIENTATIONS: usize = 4;
/// Ring energy floor, per point and relative to the reference energy, so a
/// blank surround has no orientation.
const SHARE_FLOOR: f64 = 0.05;
/// Expansive output nonlinearity applied to the modulated center term.
pub const OUTPUT_EXPONENT: i32 = 2;

const CALIBRATION_STREAM: u64 = 1 << 62;
const NOISE_STREAM: u64 = 1 << 61;

#[derive(Debug, Clone, PartialEq)]
pub struct NeuronConfig {
    /// Spatial frequency range, cycles per pixel.
    pub freq: (f64, f64),
    /// Envelope σ range in pixels. The default mean of 2.75 px puts the
    /// ±2σ envelope at about 11 px, i.e. 0.75° at 15 px/deg.
    pub sigma: (f64, f64),
    /// Mean receptive-field center (row and column).
    pub center: f64,
    /// Uniform jitter of the center, ± pixels.
    pub center_jitter: f64,
    /// Fraction of neurons (rounded) with positive surround gain.
    pub surround_fraction: f64,
    pub gain: (f64, f64),
    /// Largest fraction of calibration images allowed above half peak.
    pub sparsity: f64,
    /// Gaussian response noise, in units of the calibrated peak.
    pub noise_sd: f64,
    pub offset: f64,
    /// Procedural images used to calibrate each neuron's normalization.
    pub calibration_images: usize,
}

impl Default for NeuronConfig {
    fn default() -> Self {
        Self {
            freq: (0.08, 0.2),
            sigma: (2.2, 3.3),
            center: 23.5,
            center_jitter: 1.0,
            surround_fraction: 0.6,
            gain: (6.0, 10.0),
            sparsity: 0.004,
            noise_sd: 0.0,
            offset: 0.02,
            calibration_images: 4000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticNeuron {
    /// Preferred orientation, radians in [0, π).
    pub theta: f64,
    pub freq: f64,
    pub phase: f64,
    pub sigma: f64,
    pub center_row: f64,
    pub center_col: f64,
    pub gain: f64,
    pub surround_inner: f64,
    pub surround_outer: f64,
    /// Center semi-saturation energy, in units of `energy_ref`.
    pub semi_saturation: f64,
    pub noise_sd: f64,
    pub scale: f64,
    pub offset: f64,
    /// Mean center energy over the calibration images.
    pub energy_ref: f64,
}

/// Even/odd Gabor weights over the in-image pixels near one position.
#[derive(Debug, Clone)]
struct Filter {
    idx: Vec<u32>,
    even: Vec<f64>,
    odd: Vec<f64>,
}

impl Filter {
    fn new(n: &SyntheticNeuron, theta: f64, row: f64, col: f64) -> Self {
        let reach = (3.0 * n.sigma).ceil() as i64;
        let (ct, st) = (theta.cos(), theta.sin());
        let (r0, c0) = (row.round() as i64, col.round() as i64);
        let mut f = Filter {
            idx: Vec::new(),
            even: Vec::new(),
            odd: Vec::new(),
        };
        for r in r0 - reach..=r0 + reach {
            for c in c0 - reach..=c0 + reach {
                if r < 0 || c < 0 || r >= IMAGE_SIDE as i64 || c >= IMAGE_SIDE as i64 {
                    continue;
                }
                let (dy, dx) = (r as f64 - row, c as f64 - col);
                let env = (-(dx * dx + dy * dy) / (2.0 * n.sigma * n.sigma)).exp();
                let u = dx * ct + dy * st;
                let arg = 2.0 * PI * n.freq * u + n.phase;
                f.idx.push((r as usize * IMAGE_SIDE + c as usize) as u32);
                f.even.push(env * arg.cos());
                f.odd.push(env * arg.sin());
            }
        }
        f
    }

    fn energy(&self, img: &[f32], mean: f64) -> f64 {
        let (mut e, mut o) = (0.0, 0.0);
        for ((&i, &we), &wo) in self.idx.iter().zip(&self.even).zip(&self.odd) {
            let v = img[i as usize] as f64 - mean;
            e += we * v;
            o += wo * v;
        }
        e * e + o * o
    }
}

/// Precomputed filters of one neuron; cheap to evaluate per image.
#[derive(Debug, Clone)]
pub struct ResponseModel {
    neuron: SyntheticNeuron,
    center: Filter,
    /// Per ring point, one filter per orientation; index 0 is preferred.
    ring: Vec<Vec<Filter>>,
}

impl ResponseModel {
    pub fn new(neuron: &SyntheticNeuron) -> Self {
        let radius = 0.5 * (neuron.surround_inner + neuron.surround_outer);
        let ring = (0..SURROUND_POINTS)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / SURROUND_POINTS as f64;
                let (row, col) = (neuron.center_row + radius * a.sin(), neuron.center_col + radius * a.cos());
                (0..ORIENTATIONS)
                    .map(|o| Filter::new(neuron, neuron.theta + PI * o as f64 / ORIENTATIONS as f64, row, col))
                    .collect()
            })
            .collect();
        Self {
            neuron: neuron.clone(),
            center: Filter::new(neuron, neuron.theta, neuron.center_row, neuron.center_col),
            ring,
        }
    }

    /// (unnormalized center energy, share of ring energy at the preferred
    /// orientation).
    pub fn energies(&self, img: &[f32]) -> (f64, f64) {
        let mean = img.iter().map(|&v| v as f64).sum::<f64>() / img.len() as f64;
        let c = self.center.energy(img, mean);
        let (mut pref, mut total) = (0.0, 0.0);
        for point in &self.ring {
            for (o, f) in point.iter().enumerate() {
                let e = f.energy(img, mean);
                total += e;
                if o == 0 {
                    pref += e;
                }
            }
        }
        let floor = SHARE_FLOOR * self.neuron.energy_ref * self.ring.len() as f64;
        (c, pref / (total + floor))
    }

    /// Unscaled drive.
    pub fn drive(&self, img: &[f32]) -> f64 {
        let (c, s) = self.energies(img);
        drive_from(&self.neuron, c / self.neuron.energy_ref, similarity(s))
    }

    pub fn noise_free(&self, img: &[f32]) -> f64 {
        (self.neuron.scale * self.drive(img) + self.neuron.offset).max(0.0)
    }

    /// Noise-free response plus N(0, noise_sd²), clipped at zero.
    pub fn respond<R: Rng>(&self, img: &[f32], rng: &mut R) -> f64 {
        let r = self.neuron.scale * self.drive(img) + self.neuron.offset;
        let noise = if self.neuron.noise_sd > 0.0 {
            self.neuron.noise_sd * gaussian(rng)
        } else {
            0.0
        };
        (r + noise).max(0.0)
    }
}

/// Orientation similarity of the surround: 0 at or below the isotropic
/// share 1/ORIENTATIONS, rising quadratically to 1 when all ring energy
/// sits at the preferred orientation.
pub fn similarity(share: f64) -> f64 {
    let iso = 1.0 / ORIENTATIONS as f64;
    let x = ((share - iso) / (1.0 - iso)).clamp(0.0, 1.0);
    x * x
}

/// Drive from normalized center energy and surround similarity.
fn drive_from(n: &SyntheticNeuron, energy: f64, sim: f64) -> f64 {
    let h = n.semi_saturation;
    let c = if h.is_finite() { energy / (energy + h) } else { energy };
    (c * (1.0 + n.gain * sim)).max(0.0).powi(OUTPUT_EXPONENT)
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

impl SyntheticNeuron {
    /// Full-contrast Gabor patch matching the neuron's own tuning on a
    /// mid-gray background.
    pub fn preferred_stimulus(&self) -> Vec<f32> {
        let mut img = vec![0.5f32; IMAGE_PIXELS];
        add_gabor(
            &mut img,
            self.center_row,
            self.center_col,
            self.theta,
            self.freq,
            self.phase,
            self.sigma,
            0.5,
        );
        img
    }
}

/// Samples `m` neurons and calibrates their reference energy and output
/// scale on procedural images. The scale maps the largest drive seen
/// (calibration set or preferred stimulus) to 1.
pub fn generate_neurons(m: usize, cfg: &NeuronConfig, seed: u64) -> Result<Vec<SyntheticNeuron>> {
    if m == 0 {
        return Err(invalid("need at least one neuron"));
    }
    if !(0.0..=1.0).contains(&cfg.surround_fraction) {
        return Err(invalid("surround fraction must lie in [0, 1]"));
    }
    if !(cfg.sparsity > 0.0 && cfg.sparsity < 1.0) {
        return Err(invalid("sparsity target must lie in (0, 1)"));
    }
    if cfg.calibration_images == 0 {
        return Err(invalid("calibration needs at least one image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_surround = (cfg.surround_fraction * m as f64).round() as usize;
    // Which neurons get a surround: a seeded partial shuffle.
    let mut order: Vec<usize> = (0..m).collect();
    for i in 0..m {
        let j = rng.gen_range(i..m);
        order.swap(i, j);
    }
    let mut with_surround = vec![false; m];
    for &i in &order[..n_surround] {
        with_surround[i] = true;
    }
    let calib: Vec<Vec<f32>> = (0..cfg.calibration_images)
        .map(|i| procedural_image(seed, CALIBRATION_STREAM + i as u64))
        .collect();
    let mut out = Vec::with_capacity(m);
    for &surround in &with_surround {
        let sigma = rng.gen_range(cfg.sigma.0..=cfg.sigma.1);
        let mut n = SyntheticNeuron {
            theta: rng.gen_range(0.0..PI),
            freq: rng.gen_range(cfg.freq.0..=cfg.freq.1),
            phase: rng.gen_range(0.0..2.0 * PI),
            sigma,
            center_row: cfg.center + rng.gen_range(-cfg.center_jitter..=cfg.center_jitter),
            center_col: cfg.center + rng.gen_range(-cfg.center_jitter..=cfg.center_jitter),
            gain: 0.0,
            surround_inner: RING_CLEARANCE + 2.0 * sigma,
            surround_outer: RING_CLEARANCE + 4.0 * sigma,
            semi_saturation: f64::INFINITY,
            noise_sd: cfg.noise_sd,
            scale: 1.0,
            offset: cfg.offset,
            energy_ref: 1.0,
        };
        // Always drawn so the stream does not depend on the surround split.
        let g = rng.gen_range(cfg.gain.0..=cfg.gain.1);
        if surround {
            n.gain = g;
        }
        let probe = ResponseModel::new(&n);
        let energies: Vec<(f64, f64)> = calib.iter().map(|im| probe.energies(im)).collect();
        let e_ref = energies.iter().map(|e| e.0).sum::<f64>() / energies.len() as f64;
        if !(e_ref > 0.0) {
            return Err(invalid("calibration images carry no energy"));
        }
        n.energy_ref = e_ref;
        let model = ResponseModel::new(&n);
        let (pe, ps) = model.energies(&n.preferred_stimulus());
        let pref = (pe / e_ref, similarity(ps));
        let calib: Vec<(f64, f64)> = calib
            .iter()
            .map(|im| model.energies(im))
            .map(|(e, s)| (e / e_ref, similarity(s)))
            .collect();
        n.semi_saturation = calibrate_saturation(&n, &calib, pref, cfg.sparsity);
        let peak = calib
            .iter()
            .map(|&(e, s)| drive_from(&n, e, s))
            .fold(drive_from(&n, pref.0, pref.1), f64::max);
        n.scale = 1.0 / peak;
        out.push(n);
    }
    Ok(out)
}

/// Most saturating `h` (bisection on ln h) that keeps the share of
/// calibration images above half the peak drive at or below `target`.
fn calibrate_saturation(n: &SyntheticNeuron, calib: &[(f64, f64)], pref: (f64, f64), target: f64) -> f64 {
    let above = |h: f64| {
        let mut m = n.clone();
        m.semi_saturation = h;
        let drives: Vec<f64> = calib.iter().map(|&(e, s)| drive_from(&m, e, s)).collect();
        let peak = drives.iter().copied().fold(drive_from(&m, pref.0, pref.1), f64::max);
        drives.iter().filter(|&&d| d > 0.5 * peak).count() as f64 / calib.len() as f64
    };
    let (mut lo, mut hi) = (-12.0f64, 12.0f64);
    if above(hi.exp()) > target {
        return f64::INFINITY;
    }
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if above(mid.exp()) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi.exp()
}

/// Where the stimuli of a generated dataset come from.
#[derive(Debug, Clone, Copy)]
pub enum ImageSource<'a> {
    Procedural,
    /// Caller-supplied images in [0, 1], used in order.
    Supplied(&'a [Vec<f32>]),
}

/// Image `index` of the procedural family for `seed`: octave value noise
/// with a roughly 1/f spectrum plus up to three Gabor patches or grating
/// discs, clipped to [0, 1].
pub fn procedural_image(seed: u64, index: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let side = IMAGE_SIDE;
    let mut img = vec![0.0f64; side * side];
    for o in 0..5 {
        let cells = 2usize << o;
        let grid: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let amp = 1.0 / (1u32 << o) as f64;
        for r in 0..side {
            let gy = (r as f64 + 0.5) / side as f64 * cells as f64;
            let (y0, fy) = (gy.floor() as usize, gy - gy.floor());
            for c in 0..side {
                let gx = (c as f64 + 0.5) / side as f64 * cells as f64;
                let (x0, fx) = (gx.floor() as usize, gx - gx.floor());
                let at = |y: usize, x: usize| grid[y * (cells + 1) + x];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
                let bot = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
                img[r * side + c] += amp * (top * (1.0 - fy) + bot * fy);
            }
        }
    }
    let n = img.len() as f64;
    let mean = img.iter().sum::<f64>() / n;
    let sd = (img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt().max(1e-12);
    let contrast = rng.gen_range(0.05..0.2);
    let mut out: Vec<f32> = img.iter().map(|v| (0.5 + contrast * (v - mean) / sd) as f32).collect();
    for _ in 0..rng.gen_range(0..=3) {
        let theta = rng.gen_range(0.0..PI);
        let freq = rng.gen_range(0.06..0.25);
        let phase = rng.gen_range(0.0..2.0 * PI);
        if rng.gen_bool(0.5) {
            let sigma = rng.gen_range(2.0..5.0);
            let (r, c) = (rng.gen_range(4.0..46.0), rng.gen_range(4.0..46.0));
            let amp = rng.gen_range(0.1..0.45);
            add_gabor(&mut out, r, c, theta, freq, phase, sigma, amp);
        } else {
            let radius = rng.gen_range(5.0..18.0);
            let (r, c) = (rng.gen_range(8.0..42.0), rng.gen_range(8.0..42.0));
            let amp = rng.gen_range(0.1..0.4);
            add_disc(&mut out, r, c, radius, theta, freq, phase, amp);
        }
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

#[allow(clippy::too_many_arguments)]
fn add_gabor(img: &mut [f32], row: f64, col: f64, theta: f64, freq: f64, phase: f64, sigma: f64, amp: f64) {
    let (ct, st) = (theta.cos(), theta.sin());
    for r in 0..IMAGE_SIDE {
        for c in 0..IMAGE_SIDE {
            let (dy, dx) = (r as f64 - row, c as f64 - col);
            let env = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            if env < 1e-4 {
                continue;
            }
            let u = dx * ct + dy * st;
            img[r * IMAGE_SIDE + c] += (amp * env * (2.0 * PI * freq * u + phase).cos()) as f32;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn add_disc(img: &mut [f32], row: f64, col: f64, radius: f64, theta: f64, freq: f64, phase: f64, amp: f64) {
    let (ct, st) = (theta.cos(), theta.sin());
    for r in 0..IMAGE_SIDE {
        for c in 0..IMAGE_SIDE {
            let (dy, dx) = (r as f64 - row, c as f64 - col);
            let d = (dx * dx + dy * dy).sqrt();
            let mask = ((radius - d) / 1.5 + 0.5).clamp(0.0, 1.0);
            if mask == 0.0 {
                continue;
            }
            let u = dx * ct + dy * st;
            img[r * IMAGE_SIDE + c] += (amp * mask * (2.0 * PI * freq * u + phase).cos()) as f32;
        }
    }
}

/// Responses of every neuron to one image. Noise (if any) comes from a
/// stream keyed by `(seed, image_index)`.
pub fn responses_for_image(models: &[ResponseModel], img: &[f32], seed: u64, image_index: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(NOISE_STREAM + image_index);
    models.iter().map(|m| m.respond(img, &mut rng) as f32).collect()
}

/// Builds a dataset with `n_train` training and `n_val` validation images.
/// Image i of the procedural source is `procedural_image(seed, i)`; the
/// validation images follow the training images, so the splits never share
/// an index.
pub fn generate_dataset(
    n_train: usize,
    n_val: usize,
    neurons: &[SyntheticNeuron],
    source: ImageSource<'_>,
    seed: u64,
) -> Result<Dataset> {
    if n_train == 0 || n_val == 0 {
        return Err(invalid("both splits need at least one image"));
    }
    if neurons.is_empty() {
        return Err(invalid("need at least one neuron"));
    }
    if let ImageSource::Supplied(imgs) = source {
        if imgs.len() < n_train + n_val {
            return Err(invalid(alloc::format!(
                "{} supplied images, need {}",
                imgs.len(),
                n_train + n_val
            )));
        }
        if imgs.iter().any(|im| im.len() != IMAGE_PIXELS) {
            return Err(invalid("supplied images must be 50×50"));
        }
    }
    let models: Vec<ResponseModel> = neurons.iter().map(ResponseModel::new).collect();
    let mut ds = Dataset {
        side: IMAGE_SIDE,
        n_neurons: neurons.len(),
        train_images: Vec::with_capacity(n_train * IMAGE_PIXELS),
        val_images: Vec::with_capacity(n_val * IMAGE_PIXELS),
        train_responses: Vec::with_capacity(n_train * neurons.len()),
        val_responses: Vec::with_capacity(n_val * neurons.len()),
        seed,
        neurons: neurons.to_vec(),
    };
    for i in 0..n_train + n_val {
        let img = match source {
            ImageSource::Procedural => procedural_image(seed, i as u64),
            ImageSource::Supplied(imgs) => imgs[i].clone(),
        };
        let resp = responses_for_image(&models, &img, seed, i as u64);
        if i < n_train {
            ds.train_images.extend_from_slice(&img);
            ds.train_responses.extend_from_slice(&resp);
        } else {
            ds.val_images.extend_from_slice(&img);
            ds.val_responses.extend_from_slice(&resp);
        }
    }
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> NeuronConfig {
        NeuronConfig {
            calibration_images: 300,
            ..NeuronConfig::default()
        }
    }

    #[test]
    fn neurons_are_deterministic_and_split_by_fraction() {
        let a = generate_neurons(10, &small_cfg(), 5).unwrap();
        let b = generate_neurons(10, &small_cfg(), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|n| n.gain > 0.0).count(), 6);
        let cfg = NeuronConfig {
            surround_fraction: 0.0,
            ..small_cfg()
        };
        assert!(generate_neurons(4, &cfg, 5).unwrap().iter().all(|n| n.gain == 0.0));
    }

    #[test]
    fn mean_envelope_is_about_eleven_pixels() {
        let ns = generate_neurons(200, &NeuronConfig { calibration_images: 1, ..small_cfg() }, 1).unwrap();
        let mean_sigma = ns.iter().map(|n| n.sigma).sum::<f64>() / ns.len() as f64;
        let extent = 4.0 * mean_sigma;
        assert!((extent - 11.0).abs() < 0.5, "{extent}");
    }

    #[test]
    fn blank_image_gives_offset() {
        let ns = generate_neurons(3, &small_cfg(), 2).unwrap();
        for n in &ns {
            let m = ResponseModel::new(n);
            for level in [0.0f32, 0.3, 1.0] {
                assert!((m.noise_free(&vec![level; IMAGE_PIXELS]) - n.offset).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn preferred_patch_wins_a_tuning_probe() {
        let ns = generate_neurons(4, &small_cfg(), 3).unwrap();
        for n in &ns {
            let m = ResponseModel::new(n);
            let best = m.noise_free(&n.preferred_stimulus());
            for k in 0..12 {
                for f in [0.5, 0.75, 1.25, 1.5] {
                    let mut probe = n.clone();
                    probe.theta = n.theta + PI * k as f64 / 12.0;
                    probe.freq = n.freq * f;
                    let r = m.noise_free(&probe.preferred_stimulus());
                    assert!(r <= best + 1e-12, "θ step {k}, f×{f}: {r} > {best}");
                }
            }
        }
    }

    #[test]
    fn responses_are_sparse() {
        let ns = generate_neurons(4, &NeuronConfig::default(), 4).unwrap();
        let imgs: Vec<Vec<f32>> = (0..3000).map(|i| procedural_image(99, i)).collect();
        for n in &ns {
            let m = ResponseModel::new(n);
            let peak = 1.0 + n.offset;
            let above = imgs.iter().filter(|im| m.noise_free(im) > 0.5 * peak).count();
            assert!((above as f64) / (imgs.len() as f64) < 0.01, "{above} of {}", imgs.len());
        }
    }

    #[test]
    fn images_in_unit_range_and_reproducible() {
        let a = procedural_image(7, 3);
        assert_eq!(a, procedural_image(7, 3));
        assert_ne!(a, procedural_image(7, 4));
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn dataset_shapes_and_supplied_source() {
        let ns = generate_neurons(2, &small_cfg(), 6).unwrap();
        let ds = generate_dataset(12, 5, &ns, ImageSource::Procedural, 6).unwrap();
        assert_eq!(ds.len(crate::dataset::Split::Train), 12);
        assert_eq!(ds.len(crate::dataset::Split::Val), 5);
        assert_eq!(ds.train_responses.len(), 24);
        assert!(ds.val_responses.iter().all(|&r| r >= 0.0));
        let few = vec![vec![0.5f32; IMAGE_PIXELS]; 3];
        assert!(generate_dataset(2, 2, &ns, ImageSource::Supplied(&few), 0).is_err());
    }

    #[test]
    fn zero_gain_ignores_the_surround() {
        let mut n = generate_neurons(1, &small_cfg(), 8).unwrap().remove(0);
        n.gain = 0.0;
        let m = ResponseModel::new(&n);
        let img = procedural_image(1, 1);
        let (c, _) = m.energies(&img);
        let (e, h) = (c / n.energy_ref, n.semi_saturation);
        let center = if h.is_finite() { e / (e + h) } else { e };
        let rf_only = n.scale * center * center + n.offset;
        assert!((m.noise_free(&img) - rf_only).abs() < 1e-12);
    }
}
