//! Instantiated models: named parameters, initialization, traced forward
//! passes and stage-to-stage parameter transfer.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{self, SaParams};
use crate::error::{shape_err, Error, Result};
use crate::param::{Freeze, Param};
use crate::scalar::Scalar;
use crate::spec::{BlockSpec, ModelSpec, ReadoutKind, SaNorm, QKV_DIM};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Images per forward pass in the batched inference helpers.
const EVAL_BATCH: usize = 256;

/// Pixel standardization applied before the first block. Not learnable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputNorm {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    spec: ModelSpec,
    shapes: Vec<[usize; 3]>,
    params: Vec<Param<T>>,
    ranges: Vec<Range<usize>>,
    pub input_norm: Option<InputNorm>,
}

/// Tape handles produced by [`Model::trace`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// Output of every traced block except the readout.
    pub block_outputs: Vec<Var>,
    pub attention: Option<Var>,
    pub sa_pre_norm: Option<Var>,
    pub readout_input: Var,
    /// Shape [N].
    pub prediction: Var,
}

/// Materialized intermediate values of one batch.
#[derive(Debug, Clone)]
pub struct Taps<T> {
    pub block_outputs: Vec<Tensor<T>>,
    /// N×T×T, present for models with attention.
    pub attention: Option<Tensor<T>>,
    /// N×T×C.
    pub sa_pre_norm: Option<Tensor<T>>,
    pub readout_input: Tensor<T>,
    pub prediction: Vec<T>,
}

fn block_prefixes(spec: &ModelSpec) -> Vec<String> {
    let (mut na, mut nb, mut ns) = (0, 0, 0);
    spec.blocks
        .iter()
        .map(|b| {
            let (kind, n) = match b {
                BlockSpec::Alpha { .. } => ("alpha", &mut na),
                BlockSpec::Beta { .. } => ("beta", &mut nb),
                BlockSpec::SelfAttention { .. } => ("sa", &mut ns),
                BlockSpec::Readout(_) => return "readout".to_string(),
            };
            *n += 1;
            format!("{kind}{}", *n - 1)
        })
        .collect()
}

/// (name, shape, fan-in; 0 marks constant init) of every tensor of a block.
fn block_layout(prefix: &str, block: &BlockSpec, [c, h, w]: [usize; 3]) -> Vec<(String, Vec<usize>, usize)> {
    let d = QKV_DIM;
    let nm = |s: &str| format!("{prefix}.{s}");
    match *block {
        BlockSpec::Alpha { c: co } => vec![
            (nm("weight"), vec![co, c, 5, 5], c * 25),
            (nm("bias"), vec![co], c * 25),
        ],
        BlockSpec::Beta { k, c: co } => vec![
            (nm("weight"), vec![co, c, k, k], c * k * k),
            (nm("bias"), vec![co], c * k * k),
        ],
        BlockSpec::SelfAttention { gamma, norm, .. } => {
            let mut v = vec![
                (nm("query.weight"), vec![d, c], c),
                (nm("query.bias"), vec![d], c),
                (nm("key.weight"), vec![d, c], c),
                (nm("key.bias"), vec![d], c),
            ];
            if gamma {
                v.push((nm("value.weight"), vec![d, c], c));
                v.push((nm("value.bias"), vec![d], c));
                v.push((nm("output.weight"), vec![c, d], d));
                v.push((nm("output.bias"), vec![c], d));
            }
            if norm == SaNorm::ChannelAffine {
                v.push((nm("norm.scale"), vec![c], 0));
                v.push((nm("norm.shift"), vec![c], 0));
            }
            v
        }
        BlockSpec::Readout(ReadoutKind::Fcl) => vec![
            (nm("weight"), vec![1, c * h * w], c * h * w),
            (nm("bias"), vec![1], c * h * w),
        ],
        BlockSpec::Readout(ReadoutKind::Ctl) => vec![
            (nm("weight"), vec![1, c], c),
            (nm("bias"), vec![1], c),
        ],
    }
}

impl<T: Scalar> Model<T> {
    /// Instantiates `spec` with uniform ±√(1/fan_in) weights drawn from a
    /// ChaCha8 stream seeded with `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let shapes = spec.shape_chain()?;
        let mut spec = spec.clone();
        spec.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut ranges = Vec::new();
        for ((prefix, block), &shape) in block_prefixes(&spec).iter().zip(&spec.blocks).zip(&shapes) {
            let start = params.len();
            for (name, dims, fan_in) in block_layout(prefix, block, shape) {
                let value = if fan_in == 0 {
                    let fill = if name.ends_with("scale") { T::one() } else { T::zero() };
                    Tensor::full(&dims, fill)
                } else {
                    let bound = (1.0 / fan_in as f64).sqrt();
                    Tensor::from_fn(&dims, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
                };
                params.push(Param {
                    name,
                    value,
                    freeze: Freeze::Learnable,
                });
            }
            ranges.push(start..params.len());
        }
        Ok(Self {
            spec,
            shapes,
            params,
            ranges,
            input_norm: None,
        })
    }

    /// Rebuilds a model from stored tensors (e.g. a checkpoint). Every
    /// tensor the spec calls for must be present with the right shape.
    pub fn from_params(spec: &ModelSpec, params: Vec<Param<T>>, input_norm: Option<InputNorm>) -> Result<Self> {
        let mut m = Self::build(spec, spec.seed)?;
        if params.len() != m.params.len() {
            return Err(Error::IncompatibleStage(format!(
                "spec needs {} tensors, got {}",
                m.params.len(),
                params.len()
            )));
        }
        for (slot, p) in m.params.iter_mut().zip(params) {
            if slot.name != p.name || slot.value.shape() != p.value.shape() {
                return Err(Error::IncompatibleStage(format!(
                    "expected `{}` {:?}, got `{}` {:?}",
                    slot.name,
                    slot.value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            if let Freeze::Partial(mask) = &p.freeze {
                if mask.len() != p.value.numel() {
                    return Err(Error::IncompatibleStage(format!("freeze mask length of `{}`", p.name)));
                }
            }
            *slot = p;
        }
        m.input_norm = input_norm;
        Ok(m)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Input shape of every block followed by the output shape.
    pub fn shapes(&self) -> &[[usize; 3]] {
        &self.shapes
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn block_params(&self, block: usize) -> &[Param<T>] {
        &self.params[self.ranges[block].clone()]
    }

    pub fn block_range(&self, block: usize) -> Range<usize> {
        self.ranges[block].clone()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Total parameter scalars, frozen or not.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Per-block (label, count) breakdown.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        block_prefixes(&self.spec)
            .into_iter()
            .zip(&self.ranges)
            .map(|(name, r)| (name, self.params[r.clone()].iter().map(|p| p.value.numel()).sum()))
            .collect()
    }

    /// Scalars the optimizer may change.
    pub fn learnable_count(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.freeze.learnable_count(p.value.numel()))
            .sum()
    }

    pub fn freeze_block(&mut self, block: usize) {
        for p in &mut self.params[self.ranges[block].clone()] {
            p.freeze = Freeze::Frozen;
        }
    }

    pub fn unfreeze_all(&mut self) {
        for p in &mut self.params {
            p.freeze = Freeze::Learnable;
        }
    }

    /// Number of leading blocks whose parameters are all fully frozen.
    /// The readout never counts.
    pub fn frozen_prefix_len(&self) -> usize {
        let n = self.spec.blocks.len().saturating_sub(1);
        (0..n)
            .take_while(|&b| self.block_params(b).iter().all(|p| p.freeze == Freeze::Frozen))
            .count()
    }

    /// Copies every tensor whose name starts with one of `prefixes` from
    /// `src` and marks it frozen. Returns the copied names.
    pub fn load_frozen(&mut self, src: &Model<T>, prefixes: &[&str]) -> Result<Vec<String>> {
        let mut copied = Vec::new();
        for p in &mut self.params {
            let dotted = |pre: &&str| p.name.starts_with(&format!("{pre}."));
            if !prefixes.iter().any(dotted) {
                continue;
            }
            let s = src
                .param(&p.name)
                .ok_or_else(|| Error::IncompatibleStage(format!("source has no `{}`", p.name)))?;
            if s.value.shape() != p.value.shape() {
                return Err(Error::IncompatibleStage(format!(
                    "`{}`: source {:?} vs target {:?}",
                    p.name,
                    s.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = s.value.clone();
            p.freeze = Freeze::Frozen;
            copied.push(p.name.clone());
        }
        Ok(copied)
    }

    /// The same parameters on an input cut down to the rows and columns
    /// given by [`ModelSpec::center_support`]; predictions on the cropped
    /// image equal predictions on the full one.
    pub fn cropped(&self) -> Option<(Self, [Range<usize>; 2])> {
        let [rows, cols] = self.spec.center_support()?;
        let mut spec = self.spec.clone();
        spec.input = [self.spec.input[0], rows.len(), cols.len()];
        let shapes = spec.shape_chain().ok()?;
        Some((
            Self {
                spec,
                shapes,
                params: self.params.clone(),
                ranges: self.ranges.clone(),
                input_norm: self.input_norm,
            },
            [rows, cols],
        ))
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            shapes: self.shapes.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    freeze: p.freeze.clone(),
                })
                .collect(),
            ranges: self.ranges.clone(),
            input_norm: self.input_norm,
        }
    }

    /// Registers the parameters of blocks `from..` as tape leaves; frozen
    /// tensors become constants. Earlier blocks get `None`.
    pub fn bind(&self, tape: &mut Tape<T>, from: usize) -> Result<Vec<Option<Var>>> {
        let first = self.ranges.get(from).map_or(self.params.len(), |r| r.start);
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i < first {
                    Ok(None)
                } else {
                    tape.leaf(p.value.clone(), p.freeze.any_learnable()).map(Some)
                }
            })
            .collect()
    }

    /// Records blocks `from..` on the tape. `x` is N×C×H×W matching the
    /// input of block `from`; for `from == 0` the input standardization is
    /// applied first.
    pub fn trace(&self, tape: &mut Tape<T>, vars: &[Option<Var>], x: Var, from: usize) -> Result<Trace> {
        let expect = self
            .shapes
            .get(from)
            .filter(|_| from < self.spec.blocks.len())
            .ok_or_else(|| shape_err("forward", format!("block index {from} out of range")))?;
        let xs = tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1..] != expect[..] {
            return Err(shape_err("forward", format!("input {xs:?}, block {from} expects N×{expect:?}")));
        }
        let v = |i: usize| vars[i].ok_or_else(|| shape_err("forward", "parameter not bound"));
        let mut h = x;
        if from == 0 {
            if let Some(n) = self.input_norm {
                h = tape.affine(h, T::from_f64_lossy(1.0 / n.std), T::from_f64_lossy(-n.mean / n.std))?;
            }
        }
        let act = self.spec.activation;
        let mut trace = Trace {
            block_outputs: Vec::new(),
            attention: None,
            sa_pre_norm: None,
            readout_input: h,
            prediction: h,
        };
        for b in from..self.spec.blocks.len() {
            let r = self.ranges[b].start;
            match self.spec.blocks[b] {
                BlockSpec::Alpha { .. } => h = blocks::alpha(tape, h, v(r)?, v(r + 1)?, act)?,
                BlockSpec::Beta { .. } => h = blocks::beta(tape, h, v(r)?, v(r + 1)?, act)?,
                BlockSpec::SelfAttention { gamma, norm, residual } => {
                    let mut i = r + 4;
                    let (value, output) = if gamma {
                        i += 4;
                        (Some((v(r + 4)?, v(r + 5)?)), Some((v(r + 6)?, v(r + 7)?)))
                    } else {
                        (None, None)
                    };
                    let affine = if norm == SaNorm::ChannelAffine {
                        Some((v(i)?, v(i + 1)?))
                    } else {
                        None
                    };
                    let p = SaParams {
                        query: (v(r)?, v(r + 1)?),
                        key: (v(r + 2)?, v(r + 3)?),
                        value,
                        output,
                        affine,
                    };
                    let out = blocks::self_attention(tape, h, &p, norm, residual)?;
                    if trace.attention.is_none() {
                        trace.attention = Some(out.attention);
                        trace.sa_pre_norm = Some(out.pre_norm);
                    }
                    h = out.y;
                }
                BlockSpec::Readout(kind) => {
                    trace.readout_input = h;
                    trace.prediction = match kind {
                        ReadoutKind::Fcl => blocks::fcl(tape, h, v(r)?, v(r + 1)?)?,
                        ReadoutKind::Ctl => blocks::ctl(tape, h, v(r)?, v(r + 1)?)?,
                    };
                    continue;
                }
            }
            trace.block_outputs.push(h);
        }
        Ok(trace)
    }

    fn batch_tensor(&self, images: &[T], block: usize) -> Result<(usize, Vec<usize>)> {
        let s = self.shapes[block];
        let per: usize = s.iter().product();
        if per == 0 || images.len() % per != 0 {
            return Err(shape_err(
                "forward",
                format!("{} values is not a whole number of {s:?} inputs", images.len()),
            ));
        }
        Ok((images.len() / per, vec![images.len() / per, s[0], s[1], s[2]]))
    }

    /// Predictions for a run of images laid out back to back (each the
    /// input shape of block `from`). Nothing is recorded for gradients.
    pub fn predict_from(&self, inputs: &[T], from: usize) -> Result<Vec<T>> {
        let (n, _) = self.batch_tensor(inputs, from)?;
        let per = inputs.len() / n.max(1);
        let mut out = Vec::with_capacity(n);
        for chunk in inputs.chunks(EVAL_BATCH * per) {
            let (_, shape) = self.batch_tensor(chunk, from)?;
            let mut tape = Tape::new();
            let vars = self.bind_frozen(&mut tape, from)?;
            let x = tape.constant(Tensor::new(&shape, chunk.to_vec())?)?;
            let tr = self.trace(&mut tape, &vars, x, from)?;
            out.extend_from_slice(tape.value(tr.prediction).data());
        }
        Ok(out)
    }

    pub fn predict(&self, images: &[T]) -> Result<Vec<T>> {
        self.predict_from(images, 0)
    }

    /// Output of block `upto - 1` (input of block `upto`) for every image;
    /// `upto == 0` returns the raw images.
    pub fn features(&self, images: &[T], upto: usize) -> Result<Vec<T>> {
        if upto == 0 {
            self.batch_tensor(images, 0)?;
            return Ok(images.to_vec());
        }
        let (n, _) = self.batch_tensor(images, 0)?;
        let per = images.len() / n.max(1);
        let mut out = Vec::new();
        for chunk in images.chunks(EVAL_BATCH * per) {
            let (_, shape) = self.batch_tensor(chunk, 0)?;
            let mut tape = Tape::new();
            let vars = self.bind_frozen(&mut tape, 0)?;
            let x = tape.constant(Tensor::new(&shape, chunk.to_vec())?)?;
            let tr = self.trace(&mut tape, &vars, x, 0)?;
            out.extend_from_slice(tape.value(tr.block_outputs[upto - 1]).data());
        }
        Ok(out)
    }

    /// Forward on one batch keeping every intermediate value.
    pub fn forward_taps(&self, images: &[T]) -> Result<Taps<T>> {
        let (_, shape) = self.batch_tensor(images, 0)?;
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape, 0)?;
        let x = tape.constant(Tensor::new(&shape, images.to_vec())?)?;
        let tr = self.trace(&mut tape, &vars, x, 0)?;
        Ok(Taps {
            block_outputs: tr.block_outputs.iter().map(|&v| tape.value(v).clone()).collect(),
            attention: tr.attention.map(|v| tape.value(v).clone()),
            sa_pre_norm: tr.sa_pre_norm.map(|v| tape.value(v).clone()),
            readout_input: tape.value(tr.readout_input).clone(),
            prediction: tape.value(tr.prediction).data().to_vec(),
        })
    }

    /// Gradient of the summed predictions w.r.t. the input pixels.
    pub fn input_gradient(&self, images: &[T]) -> Result<Vec<T>> {
        let (_, shape) = self.batch_tensor(images, 0)?;
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape, 0)?;
        let x = tape.leaf(Tensor::new(&shape, images.to_vec())?, true)?;
        let tr = self.trace(&mut tape, &vars, x, 0)?;
        let s = tape.sum(tr.prediction)?;
        tape.backward(s)?;
        Ok(tape
            .take_grad(x)
            .map(|g| g.into_data())
            .unwrap_or_else(|| vec![T::zero(); images.len()]))
    }

    /// Binds every parameter as a constant.
    fn bind_frozen(&self, tape: &mut Tape<T>, from: usize) -> Result<Vec<Option<Var>>> {
        let first = self.ranges.get(from).map_or(self.params.len(), |r| r.start);
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i < first {
                    Ok(None)
                } else {
                    tape.constant(p.value.clone()).map(Some)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::{preset, PRESETS};
    use crate::IMAGE_PIXELS;

    fn image(seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..IMAGE_PIXELS).map(|_| rng.gen::<f32>()).collect()
    }

    #[test]
    fn build_is_deterministic_and_counts_match_spec() {
        for name in PRESETS {
            if name == "rf+sa-CNN-c375" {
                continue;
            }
            let spec = preset(name).unwrap();
            let a = Model::<f32>::build(&spec, 3).unwrap();
            let b = Model::<f32>::build(&spec, 3).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.param_count(), spec.param_count().unwrap(), "{name}");
            let per: Vec<usize> = a.param_breakdown().iter().map(|x| x.1).collect();
            assert_eq!(per, spec.block_param_counts().unwrap());
        }
    }

    #[test]
    fn zero_image_prediction_is_finite() {
        for name in ["ff-CNN", "rf+sa-CNN", "k3-CTL"] {
            let m = Model::<f32>::build(&preset(name).unwrap(), 1).unwrap();
            let p = m.predict(&vec![0.0; IMAGE_PIXELS]).unwrap();
            assert_eq!(p.len(), 1);
            assert!(p[0].is_finite());
        }
    }

    #[test]
    fn taps_leave_prediction_unchanged_and_expose_attention() {
        let m = Model::<f32>::build(&preset("rf+sa-CNN").unwrap(), 2).unwrap();
        let mut imgs = image(1);
        imgs.extend(image(2));
        let plain = m.predict(&imgs).unwrap();
        let taps = m.forward_taps(&imgs).unwrap();
        assert_eq!(plain, taps.prediction);
        let a = taps.attention.unwrap();
        assert_eq!(a.shape(), &[2, 81, 81]);
        for row in a.data().chunks(81) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        assert_eq!(taps.readout_input.shape(), &[2, 30, 9, 9]);
    }

    #[test]
    fn prefix_features_reproduce_the_full_forward() {
        let mut m = Model::<f32>::build(&preset("ff+sa-CNN*").unwrap(), 4).unwrap();
        m.input_norm = Some(InputNorm { mean: 0.5, std: 0.25 });
        let mut imgs = image(3);
        imgs.extend(image(4));
        let full = m.predict(&imgs).unwrap();
        for upto in 0..5 {
            let f = m.features(&imgs, upto).unwrap();
            assert_eq!(m.predict_from(&f, upto).unwrap(), full, "prefix {upto}");
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let m = Model::<f32>::build(&preset("rf-CNN").unwrap(), 0).unwrap();
        assert!(matches!(m.predict(&[0.0; 49]), Err(Error::Shape { .. })));
    }

    #[test]
    fn load_frozen_copies_and_checks_shapes() {
        let src = Model::<f32>::build(&preset("rf-CNN").unwrap().with_channels(30), 1).unwrap();
        let mut dst = Model::<f32>::build(&preset("rf+sa-CNN*").unwrap(), 2).unwrap();
        let names = dst.load_frozen(&src, &["alpha0", "alpha1"]).unwrap();
        assert_eq!(names.len(), 4);
        assert_eq!(dst.param("alpha1.weight").unwrap().value, src.param("alpha1.weight").unwrap().value);
        assert_eq!(dst.frozen_prefix_len(), 2);
        let wide = Model::<f32>::build(&preset("rf-CNN").unwrap(), 1).unwrap();
        assert!(matches!(
            dst.load_frozen(&wide, &["alpha0"]),
            Err(Error::IncompatibleStage(_))
        ));
    }

    #[test]
    fn cropped_model_matches_full_input() {
        let m = Model::<f32>::build(&preset("rf-CNN").unwrap(), 9).unwrap();
        let (small, [rows, cols]) = m.cropped().unwrap();
        assert_eq!((rows.clone(), cols.clone()), (16..32, 16..32));
        let img = image(4);
        let cut: Vec<f32> = rows.flat_map(|r| img[r * 50 + cols.start..r * 50 + cols.end].to_vec()).collect();
        let a = m.predict(&img).unwrap()[0];
        let b = small.predict(&cut).unwrap()[0];
        assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
        assert!(Model::<f32>::build(&preset("rf+sa-CNN").unwrap(), 1).unwrap().cropped().is_none());
        assert!(Model::<f32>::build(&preset("ff-CNN").unwrap(), 1).unwrap().cropped().is_none());
    }
}
