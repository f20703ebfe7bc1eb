//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `DSSF`, `u32` version, `u32` header length,
//! JSON header, then `u32` record count followed by records of
//! `u32` name length, UTF-8 name, `u8` dtype tag, `u32` rank, `rank × u64`
//! dims and the raw element bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{param_specs, DssModel, ModelConfig};
use crate::audio::write_atomic;
use crate::error::{DssError, Result};
use crate::tensor::{DType, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSSF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn from_slice<S: Scalar>(v: &[S]) -> Self {
        match S::DTYPE {
            DType::F32 => TensorData::F32(v.iter().map(|x| x.as_f64() as f32).collect()),
            DType::F64 => TensorData::F64(v.iter().map(|x| x.as_f64()).collect()),
        }
    }

    pub fn to_vec<S: Scalar>(&self) -> Vec<S> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| S::cast(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| S::cast(x)).collect(),
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            TensorData::F32(v) => f32::to_le_bytes_vec(v),
            TensorData::F64(v) => f64::to_le_bytes_vec(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    step: u64,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Weights, configuration and optional training state. Tensors whose names
/// start with `opt.` belong to the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub step: u64,
    /// Free-form training metadata.
    pub extra: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model<S: Scalar>(model: &DssModel<S>, step: u64) -> Self {
        let tensors = model
            .specs()
            .iter()
            .zip(model.tensors())
            .map(|(s, t)| NamedTensor {
                name: s.name.clone(),
                shape: s.shape.clone(),
                data: TensorData::from_slice(t.data()),
            })
            .collect();
        Checkpoint {
            model: model.config().clone(),
            step,
            extra: serde_json::Value::Null,
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Rebuilds the model, checking every weight against the layout implied
    /// by the stored configuration.
    pub fn to_model<S: Scalar>(&self) -> Result<DssModel<S>> {
        self.model.validate()?;
        let specs = param_specs(&self.model);
        let by_name: std::collections::HashMap<&str, &NamedTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut values = Vec::with_capacity(specs.len());
        for s in &specs {
            let t = by_name
                .get(s.name.as_str())
                .ok_or_else(|| DssError::Config(format!("checkpoint lacks weight {}", s.name)))?;
            if t.shape != s.shape {
                return Err(DssError::Config(format!(
                    "weight {} has shape {:?}, configuration implies {:?}",
                    s.name, t.shape, s.shape
                )));
            }
            values.push(t.data.to_vec::<S>());
        }
        let known = specs.len() + self.tensors.iter().filter(|t| t.name.starts_with("opt.")).count();
        if known != self.tensors.len() {
            let extra = self.tensors.iter().find(|t| !t.name.starts_with("opt.") && !specs.iter().any(|s| s.name == t.name));
            return Err(DssError::Config(format!(
                "checkpoint holds unexpected weight {}",
                extra.map_or("?", |t| t.name.as_str())
            )));
        }
        DssModel::from_values(self.model.clone(), values)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.model.clone(),
            step: self.step,
            extra: self.extra.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.data.dtype().tag());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.data.bytes());
        }
        out
    }

    /// Parses a checkpoint; `origin` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(&format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| r.err(&format!("bad header: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| r.err("tensor name is not UTF-8"))?
                .to_string();
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| r.err(&format!("tensor {name}: unknown dtype tag {tag}")))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| r.err(&format!("tensor {name}: size overflows")))?;
            let raw = r.take(n)?;
            let data = match dtype {
                DType::F32 => TensorData::F32(f32::from_le_bytes_slice(raw)),
                DType::F64 => TensorData::F64(f64::from_le_bytes_slice(raw)),
            };
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after last record"));
        }
        Ok(Checkpoint {
            model: header.model,
            step: header.step,
            extra: header.extra,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| DssError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> DssError {
        DssError::format(self.origin, format!("{msg} (offset {})", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
