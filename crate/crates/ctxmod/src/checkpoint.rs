//! One-file model checkpoints.
//!
//! ```text
//! magic    8 bytes  "CTXMCKPT"
//! version  u32
//! length   u64      payload bytes
//! crc32    u32      of the payload
//! payload:
//!   str spec text            (u32 length + UTF-8)
//!   u32 n, n × (str key, str value)   provenance
//!   u8 has_norm [f64 mean, f64 std]
//!   u32 n, n × tensor:
//!     str name, u32 rank, rank × u64 dim,
//!     u8 freeze (0 learnable, 1 frozen, 2 partial + numel mask bytes),
//!     numel × f32
//! ```
//! Everything is little-endian.

use std::fs;
use std::path::Path;

use ctxmod_core::model::{InputNorm, Model};
use ctxmod_core::param::{Freeze, Param};
use ctxmod_core::spec::ModelSpec;
use ctxmod_core::Tensor;

use crate::DataError;

pub const MAGIC: &[u8; 8] = b"CTXMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    /// Free-form provenance (stage, neuron, seed, loaded tensors, ...).
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new(model: Model<f32>) -> Self {
        Self { model, meta: Vec::new() }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut p = Vec::new();
        put_str(&mut p, &self.model.spec().to_text());
        put_u32(&mut p, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut p, k);
            put_str(&mut p, v);
        }
        match self.model.input_norm {
            Some(n) => {
                p.push(1);
                p.extend(n.mean.to_le_bytes());
                p.extend(n.std.to_le_bytes());
            }
            None => p.push(0),
        }
        put_u32(&mut p, self.model.params().len() as u32);
        for t in self.model.params() {
            put_str(&mut p, &t.name);
            put_u32(&mut p, t.value.rank() as u32);
            for &d in t.value.shape() {
                p.extend((d as u64).to_le_bytes());
            }
            match &t.freeze {
                Freeze::Learnable => p.push(0),
                Freeze::Frozen => p.push(1),
                Freeze::Partial(mask) => {
                    p.push(2);
                    p.extend(mask.iter().map(|&m| m as u8));
                }
            }
            for v in t.value.data() {
                p.extend(v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(p.len() + 24);
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((p.len() as u64).to_le_bytes());
        out.extend(crc32fast::hash(&p).to_le_bytes());
        out.extend(p);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let bad = |why: &str| DataError::Format(format!("checkpoint: {why}"));
        if bytes.len() < 24 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(DataError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(bytes[20..24].try_into().unwrap());
        let payload = bytes.get(24..24 + len).ok_or_else(|| bad("truncated"))?;
        let found = crc32fast::hash(payload);
        if found != crc {
            return Err(DataError::Checksum {
                file: "checkpoint payload".into(),
                expected: crc,
                found,
            });
        }
        let mut r = Reader { b: payload, at: 0 };
        let spec = ModelSpec::parse(&r.str()?)?;
        let mut meta = Vec::new();
        for _ in 0..r.u32()? {
            meta.push((r.str()?, r.str()?));
        }
        let input_norm = match r.take(1)?[0] {
            0 => None,
            1 => Some(InputNorm {
                mean: f64::from_le_bytes(r.take(8)?.try_into().unwrap()),
                std: f64::from_le_bytes(r.take(8)?.try_into().unwrap()),
            }),
            _ => return Err(bad("bad normalization tag")),
        };
        let mut params = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let freeze = match r.take(1)?[0] {
                0 => Freeze::Learnable,
                1 => Freeze::Frozen,
                2 => Freeze::Partial(r.take(numel)?.iter().map(|&b| b != 0).collect()),
                _ => return Err(bad("bad freeze tag")),
            };
            let data = crate::container::f32_from_bytes(r.take(numel * 4)?);
            params.push(Param {
                name,
                value: Tensor::new(&shape, data)?,
                freeze,
            });
        }
        if r.at != payload.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            model: Model::from_params(&spec, params, input_norm)?,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            DataError::Checksum { expected, found, .. } => DataError::Checksum {
                file: path.to_path_buf(),
                expected,
                found,
            },
            other => other,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend(v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend(s.as_bytes());
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let s = self
            .b
            .get(self.at..self.at + n)
            .ok_or_else(|| DataError::Format("checkpoint: truncated payload".into()))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String, DataError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| DataError::Format("checkpoint: bad UTF-8".into()))
    }
}
