//! `model.bin`: a flat, versioned tensor container.
//!
//! Layout (little endian): magic `TFMB`, u32 version, u32 tensor count, then
//! per tensor: u32 name length, UTF-8 name, u32 rank, u64 per dimension,
//! f64 values in row-major order.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const MODEL_MAGIC: &[u8; 4] = b"TFMB";
pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const MODEL_FILE: &str = "model.bin";
pub const METADATA_FILE: &str = "metadata.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            name: name.to_string(),
            shape,
            data,
        }
    }
}

/// Tensors plus trainer-specific metadata (label vocab, dimensions).
#[derive(Debug, Clone, PartialEq)]
pub struct ExportedModel {
    pub tensors: Vec<Tensor>,
    pub metadata: serde_json::Value,
}

pub fn encode_model(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for d in &t.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> io::Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated model file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> io::Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn invalid(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

pub fn decode_model(bytes: &[u8]) -> io::Result<Vec<Tensor>> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != MODEL_MAGIC {
        return Err(invalid("bad magic"));
    }
    let version = c.u32()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(invalid(&format!("unsupported model format version {version}")));
    }
    let count = c.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| invalid("tensor name"))?;
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| invalid("tensor size"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push(Tensor { name, shape, data });
    }
    if c.pos != bytes.len() {
        return Err(invalid("trailing bytes"));
    }
    Ok(tensors)
}

pub fn write_model_bin(dir: &Path, tensors: &[Tensor]) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let tmp = dir.join(".model.bin.tmp");
    fs::write(&tmp, encode_model(tensors))?;
    fs::rename(tmp, dir.join(MODEL_FILE))
}

pub fn read_model_bin(dir: &Path) -> io::Result<Vec<Tensor>> {
    decode_model(&fs::read(dir.join(MODEL_FILE))?)
}
