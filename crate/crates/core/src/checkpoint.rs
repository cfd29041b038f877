//! Self-describing binary checkpoints.
//!
//! Layout: the 8-byte magic `TDETCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header (model
//! config echo, tensor index, optional optimizer and trainer state), then the
//! raw little-endian tensors in index order followed by the optimizer
//! moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Detector, ModelConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::TrainState;

const MAGIC: &[u8; 8] = b"TDETCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimHeader {
    cfg: AdamWConfig,
    step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dtype: String,
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimHeader>,
    train_state: Option<TrainState>,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub model: ModelConfig,
    pub params: Vec<(String, Tensor<T>)>,
    pub optimizer: Option<AdamW<T>>,
    pub train_state: Option<TrainState>,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    det: &Detector<T>,
    optimizer: Option<&AdamW<T>>,
    train_state: Option<&TrainState>,
) -> Result<()> {
    let header = Header {
        dtype: T::DTYPE.to_string(),
        model: det.cfg.clone(),
        tensors: det
            .params
            .iter()
            .map(|(_, name, t)| TensorEntry {
                name: name.to_string(),
                rows: t.rows,
                cols: t.cols,
            })
            .collect(),
        optimizer: optimizer.map(|o| OptimHeader {
            cfg: o.cfg,
            step: o.step,
        }),
        train_state: train_state.cloned(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    let mut out = Vec::with_capacity(json.len() + 20 + det.params.numel() * T::BYTES * 3);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |t: &Tensor<T>| t.data.iter().for_each(|v| v.write_le(&mut out));
    det.params.iter().for_each(|(_, _, t)| put(t));
    if let Some(o) = optimizer {
        o.m.iter().for_each(&mut put);
        o.v.iter().for_each(&mut put);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("file truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn tensor<T: Scalar, F: Scalar>(
        &mut self,
        rows: usize,
        cols: usize,
        name: &str,
    ) -> Result<Tensor<T>> {
        let raw = self.take(rows * cols * F::BYTES, name)?;
        let data = raw
            .chunks_exact(F::BYTES)
            .map(|c| T::from_f64_lossy(F::read_le(c).to_f64_lossy()))
            .collect();
        Ok(Tensor::from_vec(rows, cols, data))
    }
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(r.take(len, "header")?).map_err(|e| Error::json(path, e))?;
    match header.dtype.as_str() {
        "f32" => decode::<T, f32>(&mut r, header),
        "f64" => decode::<T, f64>(&mut r, header),
        other => Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
    }
}

fn decode<T: Scalar, F: Scalar>(r: &mut Reader<'_>, header: Header) -> Result<Checkpoint<T>> {
    let mut params = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        params.push((e.name.clone(), r.tensor::<T, F>(e.rows, e.cols, &e.name)?));
    }
    let optimizer = match header.optimizer {
        Some(o) => {
            let mut m = Vec::with_capacity(params.len());
            let mut v = Vec::with_capacity(params.len());
            for e in &header.tensors {
                m.push(r.tensor::<T, F>(e.rows, e.cols, &e.name)?);
            }
            for e in &header.tensors {
                v.push(r.tensor::<T, F>(e.rows, e.cols, &e.name)?);
            }
            Some(AdamW {
                cfg: o.cfg,
                step: o.step,
                m,
                v,
            })
        }
        None => None,
    };
    if r.pos != r.bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after tensors",
            r.bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        model: header.model,
        params,
        optimizer,
        train_state: header.train_state,
    })
}

impl<T: Scalar> Detector<T> {
    /// Builds a detector with the checkpoint's configuration and weights.
    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let mut det = Detector::new(ck.model.clone())?;
        det.load_params(ck)?;
        Ok(det)
    }

    /// Copies checkpoint weights into this detector; configurations must agree.
    pub fn load_params(&mut self, ck: &Checkpoint<T>) -> Result<()> {
        if ck.model != self.cfg {
            let a = serde_json::to_string(&ck.model).unwrap_or_default();
            let b = serde_json::to_string(&self.cfg).unwrap_or_default();
            return Err(Error::Checkpoint(format!(
                "config mismatch: checkpoint {a} vs model {b}"
            )));
        }
        if ck.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                ck.params.len(),
                self.params.len()
            )));
        }
        for (name, t) in &ck.params {
            self.params.assign(name, t.clone())?;
        }
        Ok(())
    }
}
