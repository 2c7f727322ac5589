//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes   "ICMCKPT\0"
//! version   u32       1
//! hdr_len   u64       length of the JSON header
//! header    hdr_len   {"config": EncoderConfig, "dtype": "f32"|"f64",
//!                      "tensors": [{"name", "shape"}], "meta": {...}}
//! buffers             one raw little-endian buffer per tensor, header order
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use icm_core::encoder::{Encoder, EncoderConfig};
use icm_core::{DType, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ICMCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: EncoderConfig,
    pub dtype: DType,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata such as dataset name and trained horizon.
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

fn err(message: impl Into<String>) -> Error {
    Error::Checkpoint {
        version: VERSION,
        message: message.into(),
    }
}

pub fn save<T: Real>(path: &Path, model: &Encoder<T>, meta: BTreeMap<String, String>) -> Result<()> {
    let header = Header {
        config: model.config().clone(),
        dtype: T::DTYPE,
        tensors: model
            .params()
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header).map_err(|e| err(e.to_string()))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for p in model.params().iter() {
            for &v in p.tensor.data() {
                match T::DTYPE {
                    DType::F32 => w.write_all(&(v.as_f64() as f32).to_le_bytes())?,
                    DType::F64 => w.write_all(&v.as_f64().to_le_bytes())?,
                }
            }
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<Header> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    read_header_from(&mut r, path)
}

fn read_header_from(r: &mut impl Read, path: &Path) -> Result<Header> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(err(format!("{} is not a checkpoint", path.display())));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(err(format!("unsupported checkpoint version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&json).map_err(|e| err(format!("bad header: {e}")))
}

/// Loads a model. Buffers stored in the other precision are converted.
pub fn load<T: Real>(path: &Path) -> Result<(Encoder<T>, Header)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let header = read_header_from(&mut r, path)?;
    let mut model = Encoder::<T>::new(header.config.clone(), 0)?;
    if model.params().len() != header.tensors.len() {
        return Err(err(format!(
            "header lists {} tensors, configuration implies {}",
            header.tensors.len(),
            model.params().len()
        )));
    }
    for entry in &header.tensors {
        let param = model
            .params_mut()
            .by_name_mut(&entry.name)
            .ok_or_else(|| err(format!("unexpected tensor `{}`", entry.name)))?;
        if param.tensor.shape() != entry.shape.as_slice() {
            return Err(err(format!(
                "tensor `{}` has shape {:?}, configuration implies {:?}",
                entry.name,
                entry.shape,
                param.tensor.shape()
            )));
        }
        let mut buf = vec![0u8; param.tensor.len() * header.dtype.size_of()];
        r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        let values: Vec<T> = match header.dtype {
            DType::F32 => buf
                .chunks_exact(4)
                .map(|b| T::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
                .collect(),
            DType::F64 => buf
                .chunks_exact(8)
                .map(|b| T::of(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect(),
        };
        param.tensor = Tensor::new(entry.shape.clone(), values)?;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(err(format!("{} trailing bytes", rest.len())));
    }
    Ok((model, header))
}

/// Checks a checkpoint's configuration against the one a run expects and
/// names every differing field.
pub fn ensure_compatible(found: &EncoderConfig, expected: &EncoderConfig) -> Result<()> {
    let mut diffs = Vec::new();
    let mut check = |field: &str, a: String, b: String| {
        if a != b {
            diffs.push(format!("{field} {a} (checkpoint) vs {b} (expected)"));
        }
    };
    check("mixer", found.mixer.to_string(), expected.mixer.to_string());
    check("n_blocks", found.n_blocks.to_string(), expected.n_blocks.to_string());
    check("d_model", found.d_model.to_string(), expected.d_model.to_string());
    check("heads", found.heads.to_string(), expected.heads.to_string());
    check("d_ff", found.d_ff.to_string(), expected.d_ff.to_string());
    check("patch_len", found.patch_len.to_string(), expected.patch_len.to_string());
    check("lookback", found.lookback.to_string(), expected.lookback.to_string());
    check("max_channels", found.max_channels.to_string(), expected.max_channels.to_string());
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(err(format!("configuration mismatch: {}", diffs.join("; "))))
    }
}
