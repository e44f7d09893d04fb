//! Single-band raster files: `"CTFR"`, u8 dtype tag, u32 height, u32 width,
//! then row-major little-endian values. Files are written as f32; f64 files
//! are accepted on read.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"CTFR";
const HEADER: usize = 13;

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Data(format!("raster {height}x{width} needs {} values, got {}", height * width, data.len())));
        }
        Ok(Raster { height, width, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(DType::F32.tag());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < HEADER || &buf[..4] != MAGIC {
            return Err(Error::Format("not a CTFR raster".into()));
        }
        let dtype = DType::from_tag(buf[4])?;
        let h = u32::from_le_bytes(buf[5..9].try_into().expect("4 bytes")) as usize;
        let w = u32::from_le_bytes(buf[9..13].try_into().expect("4 bytes")) as usize;
        let body = &buf[HEADER..];
        let want = h.checked_mul(w).and_then(|n| n.checked_mul(dtype.size()));
        if want != Some(body.len()) {
            return Err(Error::Format(format!("raster {h}x{w} {dtype:?}: payload is {} bytes", body.len())));
        }
        let data = match dtype {
            DType::F32 => body.chunks_exact(4).map(f32::read_le).collect(),
            DType::F64 => body.chunks_exact(8).map(|c| f64::read_le(c) as f32).collect(),
        };
        Ok(Raster { height: h, width: w, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&buf).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}
