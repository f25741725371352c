//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MOBCKPT\0"  u32 version
//! u64 len, config text (key = value lines)
//! u64 training step
//! u32 tensor count, then per tensor: u32 len, name, u32 rank, u64 dims.., u64 offset
//! u8 optimizer flag; if 1: u64 optimizer step
//! u64 payload length in f64s, then the payload
//! ```
//!
//! The payload holds every parameter in manifest order, followed (when the
//! flag is set) by the first and second Adam moments in the same order.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::autodiff::ParamStore;
use crate::config::{apply_kv, render_kv};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MOBCKPT\0";

/// Adam moment estimates, keyed like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    pub optimizer: Option<OptimizerState>,
}

pub fn encode(model: &Model, step: u64, optimizer: Option<&OptimizerState>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = render_kv(&model.config);
    buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    buf.extend_from_slice(&step.to_le_bytes());

    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in model.params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        buf.extend_from_slice(&offset.to_le_bytes());
        offset += t.numel() as u64;
    }

    let mut sections = vec![&model.params];
    match optimizer {
        Some(o) => {
            for (store, what) in [(&o.m, "first"), (&o.v, "second")] {
                let same = store.len() == model.params.len()
                    && store.iter().zip(model.params.iter()).all(|(a, b)| a.0 == b.0 && a.1.shape() == b.1.shape());
                if !same {
                    return Err(Error::ShapeMismatch(format!("{what} moments do not match the parameters")));
                }
            }
            buf.push(1);
            buf.extend_from_slice(&o.step.to_le_bytes());
            sections.extend([&o.m, &o.v]);
        }
        None => buf.push(0),
    }
    buf.extend_from_slice(&(offset * sections.len() as u64).to_le_bytes());
    for store in sections {
        for (_, t) in store.iter() {
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::CorruptFile(format!("truncated: needed {n} bytes at offset {}, file has {}", self.pos, self.buf.len()))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::CorruptFile(format!("length {v} out of range")))
    }

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::CorruptFile("non-UTF-8 text".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).map_err(|_| Error::CorruptFile("missing header".into()))? != MAGIC {
        return Err(Error::CorruptFile("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let cfg_len = r.len()?;
    let cfg_text = r.str(cfg_len)?;
    let mut config = ModelConfig::default();
    apply_kv(cfg_text, &mut [&mut config])?;
    let step = r.u64()?;

    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    let mut expected_offset = 0u64;
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.str(name_len)?.to_string();
        let rank = r.u32()? as usize;
        if rank > 3 {
            return Err(Error::CorruptFile(format!("tensor '{name}' has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()?;
        if offset != expected_offset {
            return Err(Error::CorruptFile(format!("tensor '{name}' at offset {offset}, expected {expected_offset}")));
        }
        expected_offset += shape.iter().product::<usize>() as u64;
        manifest.push((name, shape));
    }
    let optimizer_step = match r.u8()? {
        0 => None,
        1 => Some(r.u64()?),
        f => return Err(Error::CorruptFile(format!("bad optimizer flag {f}"))),
    };
    let sections = if optimizer_step.is_some() { 3 } else { 1 };
    let payload = r.u64()?;
    if payload != expected_offset * sections {
        return Err(Error::CorruptFile(format!(
            "payload declares {payload} values, manifest needs {}",
            expected_offset * sections
        )));
    }
    let remaining = bytes.len() - r.pos;
    if remaining as u64 != payload * 8 {
        return Err(Error::CorruptFile(format!("payload is {remaining} bytes, expected {}", payload * 8)));
    }
    let read_store = |r: &mut Reader| -> Result<ParamStore> {
        let mut s = ParamStore::new();
        for (name, shape) in &manifest {
            let n: usize = shape.iter().product();
            let data = r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            s.insert(name.clone(), Tensor::new(shape, data)?);
        }
        Ok(s)
    };
    let params = read_store(&mut r)?;
    let optimizer = match optimizer_step {
        Some(step) => Some(OptimizerState { step, m: read_store(&mut r)?, v: read_store(&mut r)? }),
        None => None,
    };
    config.validate()?;
    Ok(Checkpoint { model: Model { config, params }, step, optimizer })
}

pub fn save_checkpoint(path: &Path, model: &Model, step: u64, optimizer: Option<&OptimizerState>) -> Result<()> {
    fs::write(path, encode(model, step, optimizer)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
