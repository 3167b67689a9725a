//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "PWCK" | u16 version | [u8;32] config hash | model kind (u16 len + utf8)
//! | u64 seed | u32 epoch | u8 has_best { u32 epoch, f64 threshold, f64 p, f64 r, f64 f1 }
//! | u32 buffer count | buffers… | u32 param count | params…
//! ```
//!
//! Each buffer/param entry is `u16 name-len | name utf8 | u8 rank | u32 dims…
//! | f64 data…`. Buffers hold non-trainable state (e.g. the input transform);
//! params are the trainable tensors in their canonical order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;

use super::{NnError, ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PWCK";
const CHECKPOINT_VERSION: u16 = 1;

/// Validation metrics of the epoch a checkpoint snapshots.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BestMetrics {
    pub epoch: u32,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Hash of the run configuration that produced the parameters; consumers
    /// use it to refuse mixing incompatible artifacts.
    pub config_hash: [u8; 32],
    pub model_kind: String,
    pub seed: u64,
    pub epoch: u32,
    pub best: Option<BestMetrics>,
    /// Non-trainable named state (input transform statistics, …).
    pub buffers: IndexMap<String, Tensor>,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), NnError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u16::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_all(&self.config_hash)?;
        write_name(w, &self.model_kind)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_u32::<LittleEndian>(self.epoch)?;
        match &self.best {
            Some(b) => {
                w.write_u8(1)?;
                w.write_u32::<LittleEndian>(b.epoch)?;
                for v in [b.threshold, b.precision, b.recall, b.f1] {
                    w.write_f64::<LittleEndian>(v)?;
                }
            }
            None => w.write_u8(0)?,
        }
        w.write_u32::<LittleEndian>(self.buffers.len() as u32)?;
        for (name, tensor) in &self.buffers {
            write_entry(w, name, tensor)?;
        }
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, tensor) in self.params.iter() {
            write_entry(w, name, tensor)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, NnError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::BadCheckpoint(format!(
                "bad magic {:02x?}; not a checkpoint file",
                magic
            )));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::BadCheckpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut config_hash = [0u8; 32];
        r.read_exact(&mut config_hash)?;
        let model_kind = read_name(r)?;
        let seed = r.read_u64::<LittleEndian>()?;
        let epoch = r.read_u32::<LittleEndian>()?;
        let best = match r.read_u8()? {
            0 => None,
            1 => Some(BestMetrics {
                epoch: r.read_u32::<LittleEndian>()?,
                threshold: r.read_f64::<LittleEndian>()?,
                precision: r.read_f64::<LittleEndian>()?,
                recall: r.read_f64::<LittleEndian>()?,
                f1: r.read_f64::<LittleEndian>()?,
            }),
            other => {
                return Err(NnError::BadCheckpoint(format!("bad best-metrics flag {other}")));
            }
        };
        let n_buffers = r.read_u32::<LittleEndian>()?;
        let mut buffers = IndexMap::new();
        for _ in 0..n_buffers {
            let (name, tensor) = read_entry(r)?;
            if buffers.insert(name.clone(), tensor).is_some() {
                return Err(NnError::BadCheckpoint(format!("duplicate buffer {name:?}")));
            }
        }
        let n_params = r.read_u32::<LittleEndian>()?;
        let mut params = ParamSet::new();
        for _ in 0..n_params {
            let (name, tensor) = read_entry(r)?;
            params
                .insert(&name, tensor)
                .map_err(|_| NnError::BadCheckpoint(format!("duplicate parameter {name:?}")))?;
        }
        Ok(Checkpoint { config_hash, model_kind, seed, epoch, best, buffers, params })
    }
}

fn write_name(w: &mut impl Write, name: &str) -> Result<(), NnError> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(NnError::InvalidArg(format!("name too long: {} bytes", bytes.len())));
    }
    w.write_u16::<LittleEndian>(bytes.len() as u16)?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_name(r: &mut impl Read) -> Result<String, NnError> {
    let len = r.read_u16::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| NnError::BadCheckpoint(format!("name not utf-8: {e}")))
}

fn write_entry(w: &mut impl Write, name: &str, tensor: &Tensor) -> Result<(), NnError> {
    write_name(w, name)?;
    let shape = tensor.shape();
    if shape.len() > u8::MAX as usize {
        return Err(NnError::InvalidArg(format!("rank too large: {}", shape.len())));
    }
    w.write_u8(shape.len() as u8)?;
    for &d in shape {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    for &v in tensor.data() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_entry(r: &mut impl Read) -> Result<(String, Tensor), NnError> {
    let name = read_name(r)?;
    let rank = r.read_u8()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let numel: usize = shape.iter().product();
    // 256 MiB of f64s per tensor is far beyond any model here; treat larger
    // counts as corruption rather than trying to allocate.
    if numel > (1 << 25) {
        return Err(NnError::BadCheckpoint(format!(
            "tensor {name:?} claims {numel} elements"
        )));
    }
    let mut data = vec![0.0f64; numel];
    r.read_f64_into::<LittleEndian>(&mut data)?;
    let tensor = Tensor::new(shape, data)
        .map_err(|e| NnError::BadCheckpoint(format!("tensor {name:?}: {e}")))?;
    Ok((name, tensor))
}
