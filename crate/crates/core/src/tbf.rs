//! Tensor blob format (TBF).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GCMO" | version: u32 | dtype: u8 | ndim: u8 | ndim × extent: u64 | row-major data
//! ```
//!
//! dtype codes: 0 = f32, 1 = u8, 2 = f64.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GCMO";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    U8 = 1,
    F64 = 2,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::U8),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
            DType::F64 => 8,
        }
    }
}

/// A decoded blob of any supported element type.
#[derive(Debug, Clone, PartialEq)]
pub enum Blob {
    F32(Vec<usize>, Vec<f32>),
    U8(Vec<usize>, Vec<u8>),
    F64(Vec<usize>, Vec<f64>),
}

impl Blob {
    pub fn shape(&self) -> &[usize] {
        match self {
            Blob::F32(s, _) | Blob::U8(s, _) | Blob::F64(s, _) => s,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Blob::F32(..) => DType::F32,
            Blob::U8(..) => DType::U8,
            Blob::F64(..) => DType::F64,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let shape = self.shape();
        let n: usize = shape.iter().product();
        let mut out = Vec::with_capacity(6 + 8 * shape.len() + n * self.dtype().width() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype() as u8);
        out.push(shape.len() as u8);
        for &e in shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match self {
            Blob::F32(_, d) => d.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Blob::U8(_, d) => out.extend_from_slice(d),
            Blob::F64(_, d) => d.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return Err("missing GCMO magic".into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let dtype = DType::from_code(bytes[8]).ok_or_else(|| format!("unknown dtype {}", bytes[8]))?;
        let ndim = bytes[9] as usize;
        let header = 10 + 8 * ndim;
        if bytes.len() < header {
            return Err("truncated header".into());
        }
        let shape: Vec<usize> = bytes[10..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or("shape overflows")?;
        let body = &bytes[header..];
        if body.len() != n * dtype.width() {
            return Err(format!(
                "payload is {} bytes, shape {shape:?} needs {}",
                body.len(),
                n * dtype.width()
            ));
        }
        Ok(match dtype {
            DType::F32 => Blob::F32(
                shape,
                body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::U8 => Blob::U8(shape, body.to_vec()),
            DType::F64 => Blob::F64(
                shape,
                body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|reason| Error::Format { path: path.to_path_buf(), reason })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

pub fn write_f32(path: &Path, t: &Tensor<f32>) -> Result<()> {
    Blob::F32(t.shape().to_vec(), t.data().to_vec()).write(path)
}

pub fn write_f64(path: &Path, t: &Tensor<f64>) -> Result<()> {
    Blob::F64(t.shape().to_vec(), t.data().to_vec()).write(path)
}

/// Reads an f32 tensor; f64 blobs are narrowed.
pub fn read_f32(path: &Path) -> Result<Tensor<f32>> {
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    match Blob::read(path)? {
        Blob::F32(s, d) => Tensor::from_vec(&s, d).map_err(|e| bad(e.to_string())),
        Blob::F64(s, d) => {
            Tensor::from_vec(&s, d.into_iter().map(|v| v as f32).collect()).map_err(|e| bad(e.to_string()))
        }
        Blob::U8(..) => Err(bad("expected a float tensor, found u8".into())),
    }
}

pub fn read_f64(path: &Path) -> Result<Tensor<f64>> {
    let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
    match Blob::read(path)? {
        Blob::F64(s, d) => Tensor::from_vec(&s, d).map_err(|e| bad(e.to_string())),
        Blob::F32(s, d) => {
            Tensor::from_vec(&s, d.into_iter().map(f64::from).collect()).map_err(|e| bad(e.to_string()))
        }
        Blob::U8(..) => Err(bad("expected a float tensor, found u8".into())),
    }
}
