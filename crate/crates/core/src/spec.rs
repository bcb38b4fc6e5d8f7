//! Declarative model descriptions and the named presets.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::error::{invalid, Error, Result};
use crate::IMAGE_SIDE;

/// Query/key/value width of every attention block.
pub const QKV_DIM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Normalization applied to each token after attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaNorm {
    None,
    /// Zero mean / unit variance across channels, no learnable parameters.
    Channel,
    /// As `Channel`, followed by a learnable per-channel scale and shift.
    ChannelAffine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadoutKind {
    /// Linear map over every activation.
    Fcl,
    /// Linear map over the center hypercolumn only.
    Ctl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockSpec {
    /// 5×5 conv, activation, 2×2 max pool.
    Alpha { c: usize },
    /// k×k conv and activation, no pooling.
    Beta { k: usize, c: usize },
    /// Single-head attention over spatial positions. With `gamma` the tokens
    /// pass through value and output maps; without, attention weights mix
    /// the raw input channels spatially.
    SelfAttention { gamma: bool, norm: SaNorm, residual: bool },
    Readout(ReadoutKind),
}

impl BlockSpec {
    pub fn sa(gamma: bool) -> Self {
        BlockSpec::SelfAttention {
            gamma,
            norm: SaNorm::Channel,
            residual: false,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            BlockSpec::Alpha { .. } => "alpha",
            BlockSpec::Beta { .. } => "beta",
            BlockSpec::SelfAttention { .. } => "sa",
            BlockSpec::Readout(_) => "readout",
        }
    }

    /// Output shape for a C×H×W input; readouts map to 1×1×1.
    pub fn output_shape(&self, index: usize, [c, h, w]: [usize; 3]) -> Result<[usize; 3]> {
        let illegal = |reason: String| Error::IllegalChain {
            index,
            block: self.to_string(),
            reason,
        };
        if c == 0 || h == 0 || w == 0 {
            return Err(illegal(format!("empty input {c}×{h}×{w}")));
        }
        match *self {
            BlockSpec::Alpha { c: co } => {
                if co == 0 {
                    return Err(illegal("zero output channels".into()));
                }
                if h < 6 || w < 6 {
                    return Err(illegal(format!("needs at least 6×6 input, got {h}×{w}")));
                }
                Ok([co, (h - 4) / 2, (w - 4) / 2])
            }
            BlockSpec::Beta { k, c: co } => {
                if co == 0 {
                    return Err(illegal("zero output channels".into()));
                }
                if k % 2 == 0 {
                    return Err(illegal(format!("kernel size {k} is even")));
                }
                if h < k || w < k {
                    return Err(illegal(format!("{h}×{w} input smaller than kernel {k}")));
                }
                Ok([co, h - k + 1, w - k + 1])
            }
            BlockSpec::SelfAttention { .. } => Ok([c, h, w]),
            BlockSpec::Readout(ReadoutKind::Fcl) => Ok([1, 1, 1]),
            BlockSpec::Readout(ReadoutKind::Ctl) => {
                if h % 2 == 0 || w % 2 == 0 {
                    return Err(illegal(format!("center readout needs odd spatial dims, got {h}×{w}")));
                }
                Ok([1, 1, 1])
            }
        }
    }

    /// Learnable scalars for a C×H×W input.
    pub fn param_count(&self, [c, h, w]: [usize; 3]) -> usize {
        let d = QKV_DIM;
        match *self {
            BlockSpec::Alpha { c: co } => co * c * 25 + co,
            BlockSpec::Beta { k, c: co } => co * c * k * k + co,
            BlockSpec::SelfAttention { gamma, norm, .. } => {
                let qk = 2 * (c * d + d);
                let vo = if gamma { (c * d + d) + (d * c + c) } else { 0 };
                let affine = if norm == SaNorm::ChannelAffine { 2 * c } else { 0 };
                qk + vo + affine
            }
            BlockSpec::Readout(ReadoutKind::Fcl) => c * h * w + 1,
            BlockSpec::Readout(ReadoutKind::Ctl) => c + 1,
        }
    }
}

impl fmt::Display for BlockSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockSpec::Alpha { c } => write!(f, "alpha c={c}"),
            BlockSpec::Beta { k, c } => write!(f, "beta k={k} c={c}"),
            BlockSpec::SelfAttention { gamma, norm, residual } => {
                let norm = match norm {
                    SaNorm::None => "none",
                    SaNorm::Channel => "channel",
                    SaNorm::ChannelAffine => "channel-affine",
                };
                write!(f, "sa gamma={gamma} norm={norm} residual={residual}")
            }
            BlockSpec::Readout(ReadoutKind::Fcl) => write!(f, "readout fcl"),
            BlockSpec::Readout(ReadoutKind::Ctl) => write!(f, "readout ctl"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub name: String,
    /// C×H×W of one stimulus.
    pub input: [usize; 3],
    pub activation: Activation,
    pub blocks: Vec<BlockSpec>,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(name: &str, blocks: Vec<BlockSpec>) -> Self {
        Self {
            name: name.into(),
            input: [1, IMAGE_SIDE, IMAGE_SIDE],
            activation: Activation::Relu,
            blocks,
            seed: 0,
        }
    }

    /// Input shape of every block followed by the final output shape.
    pub fn shape_chain(&self) -> Result<Vec<[usize; 3]>> {
        let mut shapes = Vec::with_capacity(self.blocks.len() + 1);
        let mut s = self.input;
        shapes.push(s);
        let n = self.blocks.len();
        for (i, b) in self.blocks.iter().enumerate() {
            let is_readout = matches!(b, BlockSpec::Readout(_));
            if is_readout != (i + 1 == n) {
                return Err(Error::IllegalChain {
                    index: i,
                    block: b.to_string(),
                    reason: "exactly one readout, in last position".into(),
                });
            }
            s = b.output_shape(i, s)?;
            shapes.push(s);
        }
        if n == 0 {
            return Err(Error::IllegalChain {
                index: 0,
                block: "<none>".into(),
                reason: "a model needs a readout".into(),
            });
        }
        Ok(shapes)
    }

    pub fn block_param_counts(&self) -> Result<Vec<usize>> {
        let shapes = self.shape_chain()?;
        Ok(self.blocks.iter().zip(&shapes).map(|(b, &s)| b.param_count(s)).collect())
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.block_param_counts()?.iter().sum())
    }

    pub fn readout(&self) -> Option<ReadoutKind> {
        match self.blocks.last() {
            Some(BlockSpec::Readout(r)) => Some(*r),
            _ => None,
        }
    }

    /// Index of the first attention block.
    pub fn attention_index(&self) -> Option<usize> {
        self.blocks
            .iter()
            .position(|b| matches!(b, BlockSpec::SelfAttention { .. }))
    }

    /// Replaces the channel count of every conv block.
    /// Input rows and columns that can influence a center readout, derived
    /// from the block geometry. None when the model has attention (which
    /// mixes every location) or a full readout.
    pub fn center_support(&self) -> Option<[core::ops::Range<usize>; 2]> {
        if self.readout() != Some(ReadoutKind::Ctl) || self.attention_index().is_some() {
            return None;
        }
        let chain = self.shape_chain().ok()?;
        let last = chain[self.blocks.len() - 1];
        let mut span = [(last[1] / 2, last[1] / 2), (last[2] / 2, last[2] / 2)];
        for b in self.blocks.iter().rev().skip(1) {
            for (a, z) in &mut span {
                match *b {
                    BlockSpec::Alpha { .. } => (*a, *z) = (2 * *a, 2 * *z + 5),
                    BlockSpec::Beta { k, .. } => *z += k - 1,
                    _ => return None,
                }
            }
        }
        Some(span.map(|(a, z)| a..z + 1))
    }

    pub fn with_channels(mut self, c: usize) -> Self {
        for b in &mut self.blocks {
            match b {
                BlockSpec::Alpha { c: bc } | BlockSpec::Beta { c: bc, .. } => *bc = c,
                _ => {}
            }
        }
        self
    }

    /// Serializes to the `key = value` config format read by [`parse`].
    ///
    /// [`parse`]: ModelSpec::parse
    pub fn to_text(&self) -> String {
        let [c, h, w] = self.input;
        let act = match self.activation {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        };
        let mut s = format!(
            "name = {}\ninput = {c}x{h}x{w}\nactivation = {act}\nseed = {}\n",
            self.name, self.seed
        );
        for b in &self.blocks {
            s.push_str(&format!("block = {b}\n"));
        }
        s
    }

    /// Parses the config format. Lines are `key = value`; `#` starts a
    /// comment. Keys: `preset` (start from a named preset), `name`, `input`
    /// (`CxHxW`), `activation`, `seed`, `channels` (applied to all conv
    /// blocks) and repeated `block` lines, which replace the preset's blocks.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec: Option<ModelSpec> = None;
        let mut blocks: Vec<BlockSpec> = Vec::new();
        let mut name = None;
        let mut input = None;
        let mut activation = None;
        let mut seed = None;
        let mut channels = None;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| invalid(format!("line {}: {m}: `{raw}`", ln + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value"))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "preset" => spec = Some(preset(v)?),
                "name" => name = Some(v.to_string()),
                "input" => {
                    let dims: Vec<usize> = v
                        .split('x')
                        .map(|d| d.trim().parse::<usize>())
                        .collect::<core::result::Result<_, _>>()
                        .map_err(|_| err("bad input shape"))?;
                    let [c, h, w] = dims[..] else {
                        return Err(err("input must be CxHxW"));
                    };
                    input = Some([c, h, w]);
                }
                "activation" => {
                    activation = Some(match v {
                        "relu" => Activation::Relu,
                        "identity" => Activation::Identity,
                        _ => return Err(err("unknown activation")),
                    })
                }
                "seed" => seed = Some(v.parse::<u64>().map_err(|_| err("bad seed"))?),
                "channels" => channels = Some(v.parse::<usize>().map_err(|_| err("bad channel count"))?),
                "block" => blocks.push(parse_block(v).map_err(|m| err(&m))?),
                _ => return Err(err("unknown key")),
            }
        }
        let mut spec = match spec {
            Some(s) => s,
            None if blocks.is_empty() => return Err(invalid("config defines neither a preset nor blocks")),
            None => ModelSpec::new("custom", Vec::new()),
        };
        if !blocks.is_empty() {
            spec.blocks = blocks;
        }
        if let Some(n) = name {
            spec.name = n;
        }
        if let Some(i) = input {
            spec.input = i;
        }
        if let Some(a) = activation {
            spec.activation = a;
        }
        if let Some(s) = seed {
            spec.seed = s;
        }
        if let Some(c) = channels {
            spec = spec.with_channels(c);
        }
        spec.shape_chain()?;
        Ok(spec)
    }
}

fn parse_block(v: &str) -> core::result::Result<BlockSpec, String> {
    let mut words = v.split_whitespace();
    let kind = words.next().ok_or("empty block")?;
    let mut c = None;
    let mut k = None;
    let mut gamma = None;
    let mut norm = SaNorm::Channel;
    let mut residual = false;
    let mut readout = None;
    for w in words {
        match w.split_once('=') {
            Some(("c", x)) => c = Some(x.parse::<usize>().map_err(|_| "bad c")?),
            Some(("k", x)) => k = Some(x.parse::<usize>().map_err(|_| "bad k")?),
            Some(("gamma", x)) => gamma = Some(x.parse::<bool>().map_err(|_| "bad gamma")?),
            Some(("residual", x)) => residual = x.parse::<bool>().map_err(|_| "bad residual")?,
            Some(("norm", x)) => {
                norm = match x {
                    "none" => SaNorm::None,
                    "channel" => SaNorm::Channel,
                    "channel-affine" => SaNorm::ChannelAffine,
                    _ => return Err("bad norm".into()),
                }
            }
            None if kind == "readout" => readout = Some(w),
            _ => return Err(format!("unexpected `{w}`")),
        }
    }
    Ok(match kind {
        "alpha" => BlockSpec::Alpha { c: c.ok_or("alpha needs c")? },
        "beta" => BlockSpec::Beta {
            k: k.ok_or("beta needs k")?,
            c: c.ok_or("beta needs c")?,
        },
        "sa" => BlockSpec::SelfAttention {
            gamma: gamma.ok_or("sa needs gamma")?,
            norm,
            residual,
        },
        "readout" => match readout {
            Some("fcl") => BlockSpec::Readout(ReadoutKind::Fcl),
            Some("ctl") => BlockSpec::Readout(ReadoutKind::Ctl),
            _ => return Err("readout must be fcl or ctl".into()),
        },
        _ => return Err(format!("unknown block kind `{kind}`")),
    })
}

pub const PRESETS: [&str; 10] = [
    "ff-CNN",
    "ff+sa-CNN",
    "rf-CNN",
    "rf+sa-CNN",
    "rf+sa-CNN*",
    "ff+sa-CNN*",
    "rf+sa-CNN-c375",
    "nobeta-sa",
    "k1-FCL",
    "k3-CTL",
];

/// Looks up a named architecture.
pub fn preset(name: &str) -> Result<ModelSpec> {
    use BlockSpec::{Alpha, Beta, Readout};
    use ReadoutKind::{Ctl, Fcl};
    let a = |c| Alpha { c };
    let b = |k, c| Beta { k, c };
    let sa = BlockSpec::sa;
    let blocks = match name {
        "ff-CNN" => alloc::vec![a(32), a(32), b(3, 32), b(3, 32), Readout(Fcl)],
        "ff+sa-CNN" => alloc::vec![a(30), a(30), sa(true), b(3, 30), b(3, 30), Readout(Fcl)],
        "rf-CNN" => alloc::vec![a(32), a(32), b(1, 32), b(1, 32), Readout(Ctl)],
        "rf+sa-CNN" => alloc::vec![a(30), a(30), sa(false), b(1, 30), b(1, 30), Readout(Ctl)],
        "rf+sa-CNN*" => alloc::vec![a(30), a(30), sa(true), b(1, 30), b(1, 30), Readout(Ctl)],
        "ff+sa-CNN*" | "k1-FCL" => alloc::vec![a(30), a(30), sa(true), b(1, 30), b(1, 30), Readout(Fcl)],
        "rf+sa-CNN-c375" => alloc::vec![a(375), a(375), sa(false), b(1, 375), b(1, 375), Readout(Ctl)],
        "nobeta-sa" => alloc::vec![a(30), a(30), sa(true), Readout(Fcl)],
        "k3-CTL" => alloc::vec![a(30), a(30), sa(true), b(3, 30), b(3, 30), Readout(Ctl)],
        _ => return Err(Error::UnknownPreset(name.into())),
    };
    Ok(ModelSpec::new(name, blocks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_chains_to_nine_by_nine() {
        for name in PRESETS {
            let s = preset(name).unwrap();
            let chain = s.shape_chain().unwrap();
            let c = match s.blocks[0] {
                BlockSpec::Alpha { c } => c,
                _ => unreachable!(),
            };
            assert_eq!(chain[1], [c, 23, 23], "{name}");
            assert_eq!(chain[2], [c, 9, 9], "{name}");
        }
    }

    #[test]
    fn fcl_width_after_two_k3_blocks() {
        let s = preset("ff+sa-CNN").unwrap();
        let chain = s.shape_chain().unwrap();
        assert_eq!(chain[5], [30, 5, 5]);
        assert_eq!(*s.block_param_counts().unwrap().last().unwrap(), 751);
    }

    #[test]
    fn closed_form_counts() {
        let counts = preset("rf+sa-CNN").unwrap().block_param_counts().unwrap();
        assert_eq!(counts[2], 310);
        let ff = preset("ff-CNN").unwrap().param_count().unwrap();
        let ffsa = preset("ff+sa-CNN").unwrap().param_count().unwrap();
        // α: 32·25+32, 32·32·25+32; β: 2×(32·32·9+32); FCL 32·25+1.
        assert_eq!(ff, 832 + 25632 + 2 * 9248 + 801);
        assert_eq!(ffsa, 780 + 22530 + (310 + 155 + 180) + 2 * 8130 + 751);
        let ratio = (ff as f64 - ffsa as f64).abs() / ff.max(ffsa) as f64;
        assert!(ratio < 0.15, "{ratio}");
        let bare = ModelSpec::new("bare", alloc::vec![BlockSpec::Readout(ReadoutKind::Fcl)]);
        assert_eq!(bare.param_count().unwrap(), 2501);
        let c375 = preset("rf+sa-CNN-c375").unwrap().block_param_counts().unwrap();
        assert_eq!(*c375.last().unwrap(), 376);
    }

    #[test]
    fn illegal_chains_name_the_offending_block() {
        let mut s = preset("k3-CTL").unwrap();
        s.blocks[3] = BlockSpec::Beta { k: 2, c: 30 };
        assert!(matches!(s.shape_chain(), Err(Error::IllegalChain { index: 3, .. })));
        let s = ModelSpec::new(
            "even",
            alloc::vec![
                BlockSpec::Alpha { c: 2 },
                BlockSpec::Alpha { c: 2 },
                BlockSpec::Beta { k: 3, c: 2 },
                BlockSpec::Beta { k: 3, c: 2 },
                BlockSpec::Beta { k: 3, c: 2 },
                BlockSpec::Beta { k: 2, c: 2 },
                BlockSpec::Readout(ReadoutKind::Ctl),
            ],
        );
        assert!(matches!(s.shape_chain(), Err(Error::IllegalChain { index: 5, .. })));
        let mut s = preset("rf-CNN").unwrap();
        s.input = [1, 48, 48];
        // 48 → 22 → 9, still odd; 46 → 21 → 8 is even.
        assert!(s.shape_chain().is_ok());
        s.input = [1, 46, 46];
        assert!(matches!(s.shape_chain(), Err(Error::IllegalChain { index: 4, .. })));
        assert!(matches!(preset("nope"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn text_round_trip() {
        for name in PRESETS {
            let s = preset(name).unwrap();
            assert_eq!(ModelSpec::parse(&s.to_text()).unwrap(), s);
        }
        let s = ModelSpec::parse("preset = rf-CNN\nchannels = 30 # narrower\nseed = 7\n").unwrap();
        assert_eq!(s.blocks[0], BlockSpec::Alpha { c: 30 });
        assert_eq!(s.seed, 7);
        assert!(ModelSpec::parse("block = readout sideways").is_err());
        assert!(ModelSpec::parse("colour = blue").is_err());
    }
}
