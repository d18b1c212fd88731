//! Portable tensor files.
//!
//! A single tensor is stored as
//!
//! ```text
//! "FEAT" | version u32 = 1 | rank u32 | rank × u32 dims | prod(dims) × f32
//! ```
//!
//! with every integer and float little-endian and the payload row-major.
//! A named archive ("FTAB") is a list of `(name, tensor)` sections, each
//! tensor embedded as a complete FEAT record:
//!
//! ```text
//! "FTAB" | version u32 = 1 | count u32 | count × (name_len u32 | name utf-8 | FEAT record)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil;

pub const TENSOR_MAGIC: &[u8; 4] = b"FEAT";
pub const ARCHIVE_MAGIC: &[u8; 4] = b"FTAB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        let n = element_count(&dims)?;
        if n != data.len() {
            return Err(Error::arg(format!(
                "tensor dims {dims:?} hold {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_f64(dims: Vec<u32>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }
}

fn element_count(dims: &[u32]) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d as usize)
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let have = self.bytes.len() - self.pos;
        if have < n {
            return Err(Error::Format(format!(
                "truncated {what}: need {n} bytes at offset {}, {have} available ({} bytes missing)",
                self.pos,
                n - have
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for d in &t.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(t.data.len() * 4);
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_tensor(r: &mut Reader<'_>) -> Result<Tensor> {
    let magic = r.take(4, "magic")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"FEAT\"")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rank = r.u32("rank")? as usize;
    let dims = (0..rank)
        .map(|i| r.u32(&format!("dimension {i}")))
        .collect::<Result<Vec<_>>>()?;
    let n = element_count(&dims)?;
    let payload_len = n
        .checked_mul(4)
        .ok_or_else(|| Error::Format("payload size overflow".into()))?;
    let payload = r.take(payload_len, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor { dims, data })
}

/// Parses one FEAT record that must span the whole buffer.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0 };
    let t = read_tensor(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }
    Ok(t)
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_tensor_file(path: &Path, t: &Tensor) -> Result<()> {
    let mut out = Vec::new();
    encode_tensor(t, &mut out);
    fsutil::write_atomic(path, &out)
}

pub fn encode_archive(sections: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, t) in sections {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut out);
    }
    out
}

pub fn decode_archive(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "archive magic")?;
    if magic != ARCHIVE_MAGIC {
        return Err(Error::Format(format!("bad archive magic {magic:?}, expected \"FTAB\"")));
    }
    let version = r.u32("archive version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported archive version {version}")));
    }
    let count = r.u32("section count")?;
    let mut sections = Vec::with_capacity(count as usize);
    for i in 0..count {
        let len = r.u32(&format!("section {i} name length"))? as usize;
        let name = std::str::from_utf8(r.take(len, &format!("section {i} name"))?)
            .map_err(|e| Error::Format(format!("section {i} name is not utf-8: {e}")))?
            .to_string();
        let t = read_tensor(&mut r)?;
        sections.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after archive",
            bytes.len() - r.pos
        )));
    }
    Ok(sections)
}
