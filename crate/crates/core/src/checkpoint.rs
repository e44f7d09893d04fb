//! Versioned binary checkpoints.
//!
//! Layout (little-endian): `"CTFM"`, u32 version, u32 config length, config
//! JSON, u32 tensor count, then per tensor: u32 name length, name, u8 dtype
//! tag, u32 rank, u64 extents, raw values. Batchnorm running statistics are
//! stored alongside parameters and recognized by name on load.

use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{Kind, ParamStore};
use crate::tensor::{numel, DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"CTFM";
pub const VERSION: u32 = 1;

pub fn to_bytes<T: Scalar>(config: &ModelConfig, store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(config)?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for e in store.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(e.tensor.rank() as u32).to_le_bytes());
        for &d in e.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.tensor.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
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
}

/// Parses a checkpoint whose tensors are stored as `T`.
pub fn from_bytes<T: Scalar>(buf: &[u8]) -> Result<(ModelConfig, ParamStore<T>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?)?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let dtype = DType::from_tag(r.u8()?)?;
        if dtype != T::DTYPE {
            return Err(Error::Incompatible(format!("{name} stored as {dtype:?}, requested {:?}", T::DTYPE)));
        }
        let kind = kind_of(&name);
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let size = dtype.size();
        let bytes = r.take(numel(&shape).checked_mul(size).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = bytes.chunks_exact(size).map(T::read_le).collect();
        store.add(name, kind, Tensor::from_vec(&shape, data)?)?;
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok((config, store))
}

fn kind_of(name: &str) -> Kind {
    if name.ends_with(".running_mean") || name.ends_with(".running_var") {
        Kind::Buffer
    } else {
        Kind::Param
    }
}

pub fn save<T: Scalar>(path: &Path, config: &ModelConfig, store: &ParamStore<T>) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, to_bytes(config, store)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<(ModelConfig, ParamStore<T>)> {
    let buf = std::fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    from_bytes(&buf)
}

/// Checks that `store` carries exactly the tensors `model` expects, with matching shapes.
pub fn check_compatible<T: Scalar>(model: &Model, store: &ParamStore<T>) -> Result<()> {
    let (_, fresh) = Model::build(&model.config)?;
    if fresh.len() != store.len() {
        return Err(Error::Incompatible(format!("expected {} tensors, found {}", fresh.len(), store.len())));
    }
    for (a, b) in fresh.entries().iter().zip(store.entries()) {
        if a.name != b.name || a.tensor.shape() != b.tensor.shape() || a.kind != b.kind {
            return Err(Error::Incompatible(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                b.name,
                b.tensor.shape(),
                a.name,
                a.tensor.shape()
            )));
        }
    }
    Ok(())
}

/// Loads a checkpoint and rebuilds its model.
pub fn load_model<T: Scalar>(path: &Path) -> Result<(Model, ParamStore<T>)> {
    let (config, store) = load::<T>(path)?;
    let (model, _) = Model::build(&config)?;
    check_compatible(&model, &store)?;
    Ok((model, store))
}
