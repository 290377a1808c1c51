//! Binary checkpoint format.
//!
//! ```text
//! "GCAP" | version u32 | count u64 | count × tensor
//! tensor = name_len u32 | name utf8 | dtype u8 | rank u32 | dims u64 × rank | payload
//! ```
//!
//! All integers and payload values are little-endian. Dtype 0 is `f64`,
//! dtype 1 is `f32` (widened to `f64` on load). Optimizer moments live under
//! `adam/`, batch-norm running statistics under `bn/running_*`, and the
//! model configuration under `meta/config`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{CaptionModel, ModelConfig};
use crate::params::ParamStore;
use crate::tape::BatchNormState;
use crate::tensor::Tensor;
use crate::train::AdamState;

pub const MAGIC: &[u8; 4] = b"GCAP";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F64 = 0,
    F32 = 1,
}

/// Serializes named tensors.
pub fn encode_tensors(entries: &[(String, Tensor)], dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype as u8);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            match dtype {
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Corrupt(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses named tensors; rejects bad magic or version and truncated input.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4).map_err(|_| Error::Format("file too short for a checkpoint header".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u64()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = match r.u8()? {
            0 => Dtype::F64,
            1 => Dtype::F32,
            other => return Err(Error::Format(format!("unknown dtype tag {other} for {name}"))),
        };
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Corrupt(format!("tensor {name} is too large")))?;
        let width = if dtype == Dtype::F64 { 8 } else { 4 };
        let raw = r.take(n.checked_mul(width).ok_or_else(|| Error::Corrupt("payload overflow".into()))?)?;
        let data: Vec<f64> = match dtype {
            Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        let t = Tensor::new(dims, data).map_err(|e| Error::Corrupt(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// A loaded model plus its optimizer state, when one was saved.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: CaptionModel,
    pub adam: Option<AdamState>,
}

pub fn checkpoint_bytes(model: &CaptionModel, adam: Option<&AdamState>) -> Vec<u8> {
    let mut entries = Vec::new();
    let meta = model.config.to_meta();
    entries.push(("meta/config".to_string(), Tensor::row(&meta)));
    for (_, name, t) in model.params.iter() {
        entries.push((name.to_string(), t.clone()));
    }
    entries.push(("bn/running_mean".into(), Tensor::row(&model.bn.running_mean)));
    entries.push(("bn/running_var".into(), Tensor::row(&model.bn.running_var)));
    if let Some(a) = adam {
        entries.push(("adam/step".into(), Tensor::scalar(a.step as f64)));
        for (_, name, _) in model.params.iter() {
            let k = model.params.id(name).unwrap().0;
            entries.push((format!("adam/m/{name}"), a.m[k].clone()));
            entries.push((format!("adam/v/{name}"), a.v[k].clone()));
        }
    }
    encode_tensors(&entries, Dtype::F64)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let entries = decode_tensors(bytes)?;
    let mut iter = entries.into_iter();
    let config = match iter.next() {
        Some((name, t)) if name == "meta/config" => ModelConfig::from_meta(t.data())?,
        _ => return Err(Error::Format("checkpoint does not start with meta/config".into())),
    };
    let mut params = ParamStore::new();
    let mut bn = BatchNormState::new(config.embed_dim);
    let mut step = None;
    let mut moments: Vec<(String, Tensor)> = Vec::new();
    for (name, t) in iter {
        if name == "bn/running_mean" {
            bn.running_mean = t.into_data();
        } else if name == "bn/running_var" {
            bn.running_var = t.into_data();
        } else if name == "adam/step" {
            step = Some(t.item() as u64);
        } else if name.starts_with("adam/") {
            moments.push((name, t));
        } else {
            params.insert(name, t).map_err(|e| Error::Format(e.to_string()))?;
        }
    }
    // The stored tensors must be exactly what this configuration creates.
    let template = CaptionModel::new(config.clone(), 0)?;
    let expected: Vec<(&str, &[usize])> = template.params.iter().map(|(_, n, t)| (n, t.shape())).collect();
    let found: Vec<(&str, &[usize])> = params.iter().map(|(_, n, t)| (n, t.shape())).collect();
    if expected != found {
        return Err(Error::Format("checkpoint tensors do not match the stored configuration".into()));
    }
    if bn.running_mean.len() != config.embed_dim || bn.running_var.len() != config.embed_dim {
        return Err(Error::Format("batch-norm statistics have the wrong width".into()));
    }
    let adam = match step {
        None if moments.is_empty() => None,
        None => return Err(Error::Format("optimizer moments without a step counter".into())),
        Some(step) => {
            let mut a = AdamState::new(&params);
            a.step = step;
            let mut seen = 0;
            for (name, t) in moments {
                let (slot, pname) = if let Some(p) = name.strip_prefix("adam/m/") {
                    (0, p)
                } else if let Some(p) = name.strip_prefix("adam/v/") {
                    (1, p)
                } else {
                    return Err(Error::Format(format!("unknown optimizer tensor {name}")));
                };
                let id = params
                    .id(pname)
                    .ok_or_else(|| Error::Format(format!("moment for unknown parameter {pname}")))?;
                if t.shape() != params.get(id).shape() {
                    return Err(Error::Format(format!("moment {name} has the wrong shape")));
                }
                if slot == 0 {
                    a.m[id.0] = t;
                } else {
                    a.v[id.0] = t;
                }
                seen += 1;
            }
            if seen != 2 * params.len() {
                return Err(Error::Format("incomplete optimizer state".into()));
            }
            Some(a)
        }
    };
    Ok(Checkpoint {
        model: CaptionModel { config, params, bn },
        adam,
    })
}

pub fn save_checkpoint(model: &CaptionModel, adam: Option<&AdamState>, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(model, adam)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
