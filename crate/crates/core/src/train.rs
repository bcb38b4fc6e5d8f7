//! Per-neuron MSE + Adam training with early stopping on validation
//! correlation, and the staged freeze-and-train pipeline.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{AdamConfig, AdamState};
use crate::dataset::{Dataset, Split};
use crate::error::{invalid, Error, Result};
use crate::metrics::{pearson, MetricsReport};
use crate::model::{InputNorm, Model};
use crate::param::{Freeze, Param};
use crate::spec::{preset, ModelSpec};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[cfg(not(feature = "std"))]
use num_traits::Float;

pub const STAGE_RF: &str = "rf-CNN";
pub const STAGE_RF_SA: &str = "rf+sa-CNN*(Incr.)";
pub const STAGE_FC1: &str = "ff+sa-CNN*(Incr.FC1)";
pub const STAGE_FC2: &str = "ff+sa-CNN*(Incr.FC2)";

/// Channel width used by every pipeline stage so tensors transfer 1:1.
pub const PIPELINE_CHANNELS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a new best validation correlation before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Share of the training split used, in (0, 1].
    pub fraction: f64,
    /// Fit a pixel standardization on the training images when the model
    /// has none yet.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 128,
            max_epochs: 50,
            patience: 5,
            seed: 0,
            fraction: 1.0,
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(invalid(format!("data fraction must lie in (0, 1], got {}", self.fraction)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        Ok(())
    }

    /// Same settings with a per-job seed.
    pub fn for_job(&self, neuron: usize) -> Self {
        Self {
            seed: self.seed ^ neuron as u64,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// None when the predictions were constant.
    pub val_corr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: String,
    pub epochs_run: usize,
    /// 1-based epoch of the returned parameters; 0 means the initial ones.
    pub best_epoch: usize,
    pub final_train_loss: Option<f64>,
    pub val_corr: Option<f64>,
    pub train_images: usize,
    pub history: Vec<EpochRecord>,
    /// Filled in by whoever persists the checkpoint.
    pub checkpoint_path: Option<String>,
}

/// Seeded subset of training indices, sorted.
pub fn subset_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("data fraction must lie in (0, 1], got {fraction}")));
    }
    let keep = (fraction * n as f64).floor() as usize;
    if keep == n {
        return Ok((0..n).collect());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f4ac));
    idx.truncate(keep);
    idx.sort_unstable();
    Ok(idx)
}

fn gather(data: &[f32], per: usize, idx: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        out.extend_from_slice(&data[i * per..(i + 1) * per]);
    }
    out
}

fn pixel_norm(images: &[f32]) -> Result<InputNorm> {
    let n = images.len() as f64;
    let mean = images.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = images.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(invalid("training images are constant"));
    }
    Ok(InputNorm { mean, std: var.sqrt() })
}

fn corr_f32(y: &[f32], yhat: &[f32]) -> Result<Option<f64>> {
    let y: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let p: Vec<f64> = yhat.iter().map(|&v| v as f64).collect();
    match pearson(&y, &p) {
        Ok(r) => Ok(Some(r)),
        Err(Error::ConstantSeries) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Trains the learnable parameters of `model` on one neuron and returns
/// the parameters with the best validation correlation (or the initial
/// ones if no epoch improved on them).
///
/// Center-readout models without attention are trained on the input
/// window that can reach the readout, which gives the same function at a
/// fraction of the cost.
pub fn train(model: &mut Model<f32>, data: &Dataset, neuron: usize, cfg: &TrainConfig, stage: &str) -> Result<StageReport> {
    cfg.validate()?;
    data.validate()?;
    if neuron >= data.n_neurons {
        return Err(invalid(format!("neuron {neuron} out of range (dataset has {})", data.n_neurons)));
    }
    let n_train = data.len(Split::Train);
    if n_train == 0 {
        return Err(Error::EmptySplit("train"));
    }
    if data.len(Split::Val) == 0 {
        return Err(Error::EmptySplit("validation"));
    }
    let idx = subset_indices(n_train, cfg.fraction, cfg.seed)?;
    if idx.is_empty() {
        return Err(Error::EmptySplit("train subset"));
    }
    if model.input_norm.is_none() && cfg.standardize {
        model.input_norm = Some(pixel_norm(&gather(&data.train_images, data.pixels(), &idx))?);
    }
    if model.shapes()[0][1] == data.side {
        if let Some((mut small, [rows, cols])) = model.cropped() {
            if rows.len() < data.side {
                let report = fit(&mut small, &data.crop(rows, cols)?, neuron, &idx, cfg, stage)?;
                for (p, s) in model.params_mut().iter_mut().zip(small.params()) {
                    p.value = s.value.clone();
                }
                return Ok(report);
            }
        }
    }
    fit(model, data, neuron, &idx, cfg, stage)
}

fn fit(model: &mut Model<f32>, data: &Dataset, neuron: usize, idx: &[usize], cfg: &TrainConfig, stage: &str) -> Result<StageReport> {
    let images = gather(&data.train_images, data.pixels(), idx);
    let targets: Vec<f32> = {
        let all = data.responses(Split::Train, neuron);
        idx.iter().map(|&i| all[i]).collect()
    };
    let val_targets = data.responses(Split::Val, neuron);

    let prefix = model.frozen_prefix_len();
    let shape = model.shapes()[prefix];
    let per: usize = shape.iter().product();
    let feats = model.features(&images, prefix)?;
    let val_feats = model.features(&data.val_images, prefix)?;
    drop(images);

    let mut report = StageReport {
        stage: stage.to_string(),
        epochs_run: 0,
        best_epoch: 0,
        final_train_loss: None,
        val_corr: corr_f32(&val_targets, &model.predict_from(&val_feats, prefix)?)?,
        train_images: idx.len(),
        history: Vec::new(),
        checkpoint_path: None,
    };
    if model.learnable_count() == 0 {
        return Ok(report);
    }

    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..idx.len()).collect();
    let mut best = report.val_corr.unwrap_or(f64::NEG_INFINITY);
    let mut best_params: Vec<Param<f32>> = model.params().to_vec();
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let x = Tensor::new(&[batch.len(), shape[0], shape[1], shape[2]], gather(&feats, per, batch))?;
            let y = Tensor::new(&[batch.len()], batch.iter().map(|&i| targets[i]).collect())?;
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, prefix)?;
            let xv = tape.constant(x)?;
            let tr = model.trace(&mut tape, &vars, xv, prefix)?;
            let loss = tape.mse(tr.prediction, &y).map_err(|e| annotate(e, epoch, b))?;
            let lv = tape.value(loss).item() as f64;
            tape.backward(loss).map_err(|e| annotate(e, epoch, b))?;
            let grads: Vec<Option<Tensor<f32>>> = vars
                .iter()
                .map(|v| v.and_then(|v| tape.take_grad(v)))
                .collect();
            adam.step(model.params_mut(), &grads)?;
            if model.params().iter().any(|p| !p.value.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "{stage}: parameters after epoch {epoch}, batch {b}"
                )));
            }
            loss_sum += lv * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = loss_sum / seen as f64;
        let corr = corr_f32(&val_targets, &model.predict_from(&val_feats, prefix)?)?;
        report.history.push(EpochRecord {
            epoch,
            train_loss,
            val_corr: corr,
        });
        report.epochs_run = epoch;
        report.final_train_loss = Some(train_loss);
        let c = corr.unwrap_or(f64::NEG_INFINITY);
        if c > best {
            best = c;
            best_params = model.params().to_vec();
            report.best_epoch = epoch;
            report.val_corr = corr;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    for (p, b) in model.params_mut().iter_mut().zip(best_params) {
        p.value = b.value;
    }
    Ok(report)
}

fn annotate(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch}, batch {batch})")),
        other => other,
    }
}

/// Models and reports of the four pipeline stages, in order.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub stages: Vec<(Model<f32>, StageReport)>,
}

impl PipelineOutput {
    pub fn get(&self, stage: &str) -> Option<&(Model<f32>, StageReport)> {
        self.stages.iter().find(|s| s.1.stage == stage)
    }
}

fn build(spec: &ModelSpec, seed: u64) -> Result<Model<f32>> {
    Model::build(spec, seed)
}

/// Index of the center location's weight for each channel of an FCL over
/// a C×H×W map.
pub fn fcl_center_indices(shape: [usize; 3]) -> Vec<usize> {
    let [c, h, w] = shape;
    let center = (h / 2) * w + w / 2;
    (0..c).map(|ch| ch * h * w + center).collect()
}

/// FCL readout that reproduces `ctl` exactly: the CTL weights sit at the
/// center location, everything else is zero.
fn fcl_from_ctl(target: &mut Model<f32>, ctl: &Model<f32>, freeze_center: bool) -> Result<()> {
    let shape = target.shapes()[target.spec().blocks.len() - 1];
    let centers = fcl_center_indices(shape);
    let cw = ctl
        .param("readout.weight")
        .ok_or_else(|| Error::IncompatibleStage("source has no readout".into()))?
        .value
        .clone();
    let cb = ctl.param("readout.bias").map(|p| p.value.clone());
    if cw.numel() != centers.len() {
        return Err(Error::IncompatibleStage(format!(
            "CTL has {} weights, FCL grid has {} channels",
            cw.numel(),
            centers.len()
        )));
    }
    let w = target
        .param_mut("readout.weight")
        .ok_or_else(|| Error::IncompatibleStage("target has no readout".into()))?;
    let mut mask = alloc::vec![false; w.value.numel()];
    w.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    for (k, &i) in centers.iter().enumerate() {
        w.value.data_mut()[i] = cw.data()[k];
        mask[i] = true;
    }
    w.freeze = if freeze_center {
        Freeze::Partial(mask)
    } else {
        Freeze::Learnable
    };
    if let (Some(b), Some(cb)) = (target.param_mut("readout.bias"), cb) {
        b.value = cb;
        b.freeze = Freeze::Learnable;
    }
    Ok(())
}

/// Stage 3a model before training: stage-2 feature blocks frozen, FCL
/// equal to the stage-2 CTL with the center weights frozen.
pub fn fc1_init(stage2: &Model<f32>, seed: u64) -> Result<Model<f32>> {
    let mut m = build(&preset("ff+sa-CNN*")?.with_channels(PIPELINE_CHANNELS), seed)?;
    transfer_features(&mut m, stage2)?;
    fcl_from_ctl(&mut m, stage2, true)?;
    Ok(m)
}

/// Stage 3b model before training: stage-2 feature blocks frozen, fresh
/// fully learnable FCL.
pub fn fc2_init(stage2: &Model<f32>, seed: u64) -> Result<Model<f32>> {
    let mut m = build(&preset("ff+sa-CNN*")?.with_channels(PIPELINE_CHANNELS), seed)?;
    transfer_features(&mut m, stage2)?;
    Ok(m)
}

fn transfer_features(m: &mut Model<f32>, src: &Model<f32>) -> Result<()> {
    let prefixes: Vec<String> = m
        .params()
        .iter()
        .filter_map(|p| p.name.split('.').next())
        .filter(|b| *b != "readout")
        .map(String::from)
        .collect();
    let refs: Vec<&str> = prefixes.iter().map(String::as_str).collect();
    m.load_frozen(src, &refs)?;
    m.input_norm = src.input_norm;
    Ok(())
}

/// Stage-2 model before training: stage-1 α blocks frozen.
pub fn rf_sa_init(stage1: &Model<f32>, seed: u64) -> Result<Model<f32>> {
    let mut m = build(&preset("rf+sa-CNN*")?.with_channels(PIPELINE_CHANNELS), seed)?;
    let alphas: Vec<String> = stage1
        .params()
        .iter()
        .filter(|p| p.name.starts_with("alpha"))
        .filter_map(|p| p.name.split('.').next().map(String::from))
        .collect();
    let refs: Vec<&str> = alphas.iter().map(String::as_str).collect();
    m.load_frozen(stage1, &refs)?;
    m.input_norm = stage1.input_norm;
    Ok(m)
}

/// rf-CNN, then rf+sa-CNN* on frozen α blocks, then the two FCL variants
/// on frozen α/SA/β blocks. Stage seeds derive from `cfg.seed`.
pub fn incremental_pipeline(data: &Dataset, neuron: usize, cfg: &TrainConfig) -> Result<PipelineOutput> {
    let seed = cfg.seed;
    let stage_cfg = |k: u64| TrainConfig {
        seed: seed.wrapping_add(k),
        ..cfg.clone()
    };
    let mut stages = Vec::with_capacity(4);

    let mut rf = build(&preset("rf-CNN")?.with_channels(PIPELINE_CHANNELS), seed)?;
    let r = train(&mut rf, data, neuron, &stage_cfg(0), STAGE_RF)?;
    stages.push((rf, r));

    let mut rfsa = rf_sa_init(&stages[0].0, seed.wrapping_add(1))?;
    let r = train(&mut rfsa, data, neuron, &stage_cfg(1), STAGE_RF_SA)?;
    stages.push((rfsa, r));

    let mut fc1 = fc1_init(&stages[1].0, seed.wrapping_add(2))?;
    let r = train(&mut fc1, data, neuron, &stage_cfg(2), STAGE_FC1)?;
    stages.push((fc1, r));

    let mut fc2 = fc2_init(&stages[1].0, seed.wrapping_add(3))?;
    let r = train(&mut fc2, data, neuron, &stage_cfg(3), STAGE_FC2)?;
    stages.push((fc2, r));
    Ok(PipelineOutput { stages })
}

/// One-stage training of a starred architecture with nothing frozen.
pub fn simultaneous(spec_name: &str, data: &Dataset, neuron: usize, cfg: &TrainConfig) -> Result<(Model<f32>, StageReport)> {
    let mut m = build(&preset(spec_name)?.with_channels(PIPELINE_CHANNELS), cfg.seed)?;
    let r = train(&mut m, data, neuron, cfg, &format!("{spec_name}(Simul.)"))?;
    Ok((m, r))
}

/// Validation responses and predictions of a trained model, as f64.
pub fn validation_pair(model: &Model<f32>, data: &Dataset, neuron: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let pred = model.predict(&data.val_images)?;
    let y = data.responses(Split::Val, neuron);
    Ok((
        y.iter().map(|&v| v as f64).collect(),
        pred.iter().map(|&v| v as f64).collect(),
    ))
}

/// Trains each named preset on each neuron at each training fraction.
/// Returns one report per (fraction, preset), in that nesting order.
pub fn data_fraction_run(
    spec_names: &[&str],
    data: &Dataset,
    neurons: &[usize],
    fractions: &[f64],
    cfg: &TrainConfig,
) -> Result<Vec<(f64, MetricsReport)>> {
    let mut out = Vec::new();
    for &f in fractions {
        for &name in spec_names {
            let spec = preset(name)?;
            let mut pairs = Vec::with_capacity(neurons.len());
            for &n in neurons {
                let job = TrainConfig {
                    fraction: f,
                    ..cfg.for_job(n)
                };
                let mut m = Model::build(&spec, job.seed)?;
                train(&mut m, data, n, &job, name)?;
                pairs.push(validation_pair(&m, data, n)?);
            }
            out.push((f, MetricsReport::new(name, neurons, &pairs, None)?));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{BlockSpec, ReadoutKind};
    use rand::Rng;

    /// Responses are a fixed linear map of the pixels. Images live in a
    /// 16-dimensional subspace so a few hundred of them pin the map down.
    fn linear_data(n_train: usize, n_val: usize, seed: u64) -> Dataset {
        let px = crate::IMAGE_PIXELS;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f32> = (0..px).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let basis: Vec<Vec<f32>> = (0..16).map(|_| (0..px).map(|_| rng.gen_range(-0.5..0.5)).collect()).collect();
        let mut mk = |n: usize| {
            let mut imgs = Vec::with_capacity(n * px);
            for _ in 0..n {
                let z: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
                imgs.extend((0..px).map(|p| 0.5 + z.iter().zip(&basis).map(|(a, b)| a * b[p]).sum::<f32>() / 8.0));
            }
            let resp: Vec<f32> = imgs
                .chunks(px)
                .map(|im| im.iter().zip(&w).map(|(a, b)| a * b).sum::<f32>() / 50.0)
                .collect();
            (imgs, resp)
        };
        let (ti, tr) = mk(n_train);
        let (vi, vr) = mk(n_val);
        Dataset {
            side: 50,
            n_neurons: 1,
            train_images: ti,
            val_images: vi,
            train_responses: tr,
            val_responses: vr,
            seed,
            neurons: Vec::new(),
        }
    }

    fn linear_spec() -> ModelSpec {
        ModelSpec::new("linear", alloc::vec![BlockSpec::Readout(ReadoutKind::Fcl)])
    }

    #[test]
    fn linear_target_is_learned() {
        let data = linear_data(800, 200, 1);
        let mut m = Model::build(&linear_spec(), 1).unwrap();
        let cfg = TrainConfig {
            batch_size: 32,
            max_epochs: 100,
            patience: 100,
            ..TrainConfig::default()
        };
        let r = train(&mut m, &data, 0, &cfg, "linear").unwrap();
        assert!(r.val_corr.unwrap() > 0.99, "{r:?}");
        assert!(r.best_epoch >= 1);
        let best = r.history.iter().filter_map(|h| h.val_corr).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.val_corr.unwrap(), best);
    }

    #[test]
    fn training_is_deterministic() {
        let data = linear_data(100, 40, 2);
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = Model::build(&linear_spec(), 4).unwrap();
            let r = train(&mut m, &data, 0, &cfg, "x").unwrap();
            (m, r)
        };
        let (a, ra) = run();
        let (b, rb) = run();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }

    #[test]
    fn all_frozen_model_is_untouched() {
        let data = linear_data(50, 20, 3);
        let mut m = Model::build(&linear_spec(), 5).unwrap();
        for b in 0..m.spec().blocks.len() {
            m.freeze_block(b);
        }
        let before = m.params().to_vec();
        let r = train(&mut m, &data, 0, &TrainConfig::default(), "frozen").unwrap();
        assert_eq!(m.params(), &before[..]);
        assert_eq!(r.epochs_run, 0);
        assert!(r.val_corr.is_some());
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let data = linear_data(10, 5, 4);
        let mut m = Model::build(&linear_spec(), 5).unwrap();
        let bad = TrainConfig {
            fraction: 0.0,
            ..TrainConfig::default()
        };
        assert!(train(&mut m, &data, 0, &bad, "x").is_err());
        assert!(train(&mut m, &data, 3, &TrainConfig::default(), "x").is_err());
        let mut empty = data.clone();
        empty.val_images.clear();
        empty.val_responses.clear();
        assert!(matches!(
            train(&mut m, &empty, 0, &TrainConfig::default(), "x"),
            Err(Error::EmptySplit(_))
        ));
    }

    #[test]
    fn subsets_are_seeded_and_sized() {
        let a = subset_indices(1000, 0.25, 3).unwrap();
        assert_eq!(a.len(), 250);
        assert_eq!(a, subset_indices(1000, 0.25, 3).unwrap());
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subset_indices(7, 1.0, 9).unwrap(), (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn fc1_starts_at_the_stage_two_function() {
        let rfsa = Model::<f32>::build(&preset("rf+sa-CNN*").unwrap(), 11).unwrap();
        let fc1 = fc1_init(&rfsa, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let imgs: Vec<f32> = (0..3 * crate::IMAGE_PIXELS).map(|_| rng.gen()).collect();
        let a = rfsa.predict(&imgs).unwrap();
        let b = fc1.predict(&imgs).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{x} vs {y}");
        }
        assert_eq!(fc1.frozen_prefix_len(), 5);
        let w = fc1.param("readout.weight").unwrap();
        let frozen = match &w.freeze {
            Freeze::Partial(m) => m.iter().filter(|&&f| f).count(),
            other => panic!("{other:?}"),
        };
        assert_eq!(frozen, PIPELINE_CHANNELS);
    }
}
