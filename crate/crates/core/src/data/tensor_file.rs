//! Raw little-endian arrays behind a small self-describing header.
//!
//! ```text
//! magic   b"QTEN"
//! version u8 (=1)
//! dtype   u8   0 = u8, 1 = f32 LE, 2 = u32 LE
//! ndim    u8
//! _pad    u8
//! dims    ndim × u64 LE
//! payload product(dims) × sizeof(dtype) bytes
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"QTEN";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    U8,
    F32,
    U32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 | DType::U32 => 4,
        }
    }

    fn code(self) -> u8 {
        match self {
            DType::U8 => 0,
            DType::F32 => 1,
            DType::U32 => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::U8),
            1 => Some(DType::F32),
            2 => Some(DType::U32),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::U8(_) => DType::U8,
            ArrayData::F32(_) => DType::F32,
            ArrayData::U32(_) => DType::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::U8(v) => v.len(),
            ArrayData::F32(v) => v.len(),
            ArrayData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawArray {
    pub dims: Vec<u64>,
    pub data: ArrayData,
}

impl RawArray {
    pub fn header_len(ndim: usize) -> usize {
        8 + 8 * ndim
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::header_len(self.dims.len()) + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.data.dtype().code());
        out.push(self.dims.len() as u8);
        out.push(0);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            ArrayData::U8(v) => out.extend_from_slice(v),
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &bytes)
    }

    pub fn parse(path: &Path, bytes: &[u8]) -> Result<Self> {
        let fmt = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(fmt("missing QTEN magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(fmt(format!("unsupported version {}", bytes[4])));
        }
        let dtype = DType::from_code(bytes[5]).ok_or_else(|| fmt(format!("unknown dtype {}", bytes[5])))?;
        let ndim = bytes[6] as usize;
        let header = Self::header_len(ndim);
        if bytes.len() < header {
            return Err(fmt(format!("header truncated ({} of {header} bytes)", bytes.len())));
        }
        let dims: Vec<u64> = (0..ndim)
            .map(|i| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap()))
            .collect();
        let count: u64 = dims.iter().product();
        let expected = count * dtype.size() as u64;
        let payload = &bytes[header..];
        if payload.len() as u64 != expected {
            return Err(Error::PayloadSize {
                path: path.to_path_buf(),
                expected,
                actual: payload.len() as u64,
            });
        }
        let data = match dtype {
            DType::U8 => ArrayData::U8(payload.to_vec()),
            DType::F32 => ArrayData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U32 => ArrayData::U32(
                payload
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Self { dims, data })
    }
}
