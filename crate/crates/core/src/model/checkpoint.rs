//! Checkpoint containers.
//!
//! Binary layout, all integers little endian u32:
//!
//! ```text
//! "CTCK" version dtype_len dtype config_len config_json n_params
//! then per parameter: name_len name rows cols rows*cols values
//! ```
//!
//! Values are stored in the checkpoint's own precision, so a binary round
//! trip is bit-exact.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::Seq2Seq;
use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::real::Real;

const MAGIC: &[u8; 4] = b"CTCK";
const VERSION: u32 = 1;

/// A model configuration together with its named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
}

impl<S: Real> Checkpoint<S> {
    pub fn of(model: &Seq2Seq<S>) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model.params().clone(),
        }
    }

    pub fn into_model(self) -> Result<Seq2Seq<S>> {
        Seq2Seq::from_params(self.config, self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_bytes(&mut out, S::DTYPE.as_bytes());
        put_bytes(&mut out, &serde_json::to_vec(&self.config)?);
        encode_params(&self.params, &mut out);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let dtype = r.string()?;
        if dtype != S::DTYPE {
            return Err(Error::Format(format!("checkpoint holds {dtype}, expected {}", S::DTYPE)));
        }
        let config: ModelConfig = serde_json::from_slice(r.bytes_field()?)?;
        let params = decode_params(&mut r)?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { config, params })
    }

    pub fn to_json(&self) -> CheckpointJson<S> {
        CheckpointJson {
            version: VERSION,
            dtype: S::DTYPE.to_string(),
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(_, name, v)| NamedTensor {
                    name: name.to_string(),
                    shape: [v.nrows(), v.ncols()],
                    data: v.iter().copied().collect(),
                })
                .collect(),
        }
    }

    pub fn from_json(json: CheckpointJson<S>) -> Result<Self> {
        if json.dtype != S::DTYPE {
            return Err(Error::Format(format!("checkpoint holds {}, expected {}", json.dtype, S::DTYPE)));
        }
        let mut params = ParamStore::new();
        for t in json.params {
            let v = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data)
                .map_err(|e| Error::Format(format!("{}: {e}", t.name)))?;
            params.insert(t.name, v);
        }
        Ok(Checkpoint { config: json.config, params })
    }
}

/// JSON form of a [`Checkpoint`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "S: Real")]
pub struct CheckpointJson<S> {
    pub version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub params: Vec<NamedTensor<S>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound = "S: Real")]
pub struct NamedTensor<S> {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<S>,
}

/// Writes the binary form, or JSON when the path ends in `.json`.
pub fn save_checkpoint<S: Real>(path: &Path, ckpt: &Checkpoint<S>) -> Result<()> {
    let bytes = if is_json(path) {
        serde_json::to_vec(&ckpt.to_json())?
    } else {
        ckpt.to_bytes()?
    };
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

pub fn load_checkpoint<S: Real>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    if is_json(path) {
        Checkpoint::from_json(serde_json::from_slice(&bytes)?)
    } else {
        Checkpoint::from_bytes(&bytes)
    }
}

pub fn write_checkpoint<S: Real>(path: &Path, model: &Seq2Seq<S>) -> Result<()> {
    save_checkpoint(path, &Checkpoint::of(model))
}

pub fn read_checkpoint<S: Real>(path: &Path) -> Result<Seq2Seq<S>> {
    load_checkpoint(path)?.into_model()
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "json")
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

pub(crate) fn encode_params<S: Real>(params: &ParamStore<S>, out: &mut Vec<u8>) {
    put_u32(out, params.len() as u32);
    for (_, name, v) in params.iter() {
        put_bytes(out, name.as_bytes());
        put_u32(out, v.nrows() as u32);
        put_u32(out, v.ncols() as u32);
        for &x in v.iter() {
            x.write_le(out);
        }
    }
}

pub(crate) fn decode_params<S: Real>(r: &mut Reader<'_>) -> Result<ParamStore<S>> {
    let width = std::mem::size_of::<S>();
    let n = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = r.string()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let body = r.take(rows * cols * width)?;
        let data = body.chunks_exact(width).map(S::read_le).collect();
        let v = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))?;
        if params.id(&name).is_some() {
            return Err(Error::Format(format!("duplicate parameter {name}")));
        }
        params.insert(name, v);
    }
    Ok(params)
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn bytes_field(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes_field()?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}
