//! Little-endian binary containers.
//!
//! Tensor file (`RAYF`):
//!
//! ```text
//! magic   "RAYF"
//! u32     version = 1
//! u32     rank
//! u64     dims[rank]
//! f32     payload[prod(dims)]   row-major
//! ```
//!
//! Named archive (`RAYA`), used for checkpoints and poses:
//!
//! ```text
//! magic   "RAYA"
//! u32     version = 1
//! u32     entry count
//! entry*: u32 name length, UTF-8 name, u8 dtype (0 = f32, 1 = f64),
//!         u32 rank, u64 dims[rank], payload row-major
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"RAYF";
pub const ARCHIVE_MAGIC: &[u8; 4] = b"RAYA";
pub const VERSION: u32 = 1;

/// Dense row-major tensor with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "dims {dims:?} imply {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated container: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4)? != magic {
            return Err(Error::Format(format!(
                "bad magic, expected {:?}",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()? as usize;
        (0..rank).map(|_| Ok(self.u64()? as usize)).collect()
    }

    fn payload(&mut self, count: usize, dtype: DType) -> Result<Vec<f64>> {
        match dtype {
            DType::F32 => {
                let raw = self.take(count * 4)?;
                Ok(raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect())
            }
            DType::F64 => {
                let raw = self.take(count * 8)?;
                Ok(raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect())
            }
        }
    }
}

fn put_dims(buf: &mut Vec<u8>, dims: &[usize]) {
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

fn put_payload(buf: &mut Vec<u8>, data: &[f64], dtype: DType) {
    match dtype {
        DType::F32 => data
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => data
            .iter()
            .for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
}

pub fn encode_tensor(tensor: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 8 * tensor.dims.len() + 4 * tensor.data.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_dims(&mut buf, &tensor.dims);
    put_payload(&mut buf, &tensor.data, DType::F32);
    buf
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(TENSOR_MAGIC)?;
    let dims = r.dims()?;
    let count = dims.iter().product();
    let data = r.payload(count, DType::F32)?;
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after tensor payload".into()));
    }
    Tensor::new(dims, data)
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    fs::File::create(path)?.write_all(&encode_tensor(tensor))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_tensor(&bytes)
}

pub fn encode_archive(entries: &[ArchiveEntry]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(ARCHIVE_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.push(e.dtype.code());
        put_dims(&mut buf, &e.tensor.dims);
        put_payload(&mut buf, &e.tensor.data, e.dtype);
    }
    buf
}

pub fn decode_archive(bytes: &[u8]) -> Result<Vec<ArchiveEntry>> {
    let mut r = Reader { bytes, pos: 0 };
    r.header(ARCHIVE_MAGIC)?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|e| Error::Format(format!("entry name is not UTF-8: {e}")))?;
        let dtype = DType::from_code(r.u8()?)?;
        let dims = r.dims()?;
        let n = dims.iter().product();
        let data = r.payload(n, dtype)?;
        entries.push(ArchiveEntry {
            name,
            dtype,
            tensor: Tensor::new(dims, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after archive".into()));
    }
    Ok(entries)
}

pub fn write_archive(path: &Path, entries: &[ArchiveEntry]) -> Result<()> {
    fs::File::create(path)?.write_all(&encode_archive(entries))?;
    Ok(())
}

pub fn read_archive(path: &Path) -> Result<Vec<ArchiveEntry>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_archive(&bytes)
}

/// Writes an RGB image stored row-major as `(h, w, 3)` values in `[0, 1]` as binary PPM.
pub fn encode_ppm(height: usize, width: usize, rgb: &[f64]) -> Result<Vec<u8>> {
    if rgb.len() != height * width * 3 {
        return Err(Error::Dimension(format!(
            "ppm expects {} values, got {}",
            height * width * 3,
            rgb.len()
        )));
    }
    let mut buf = format!("P6\n{width} {height}\n255\n").into_bytes();
    buf.extend(
        rgb.iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(buf)
}

pub fn write_ppm(path: &Path, height: usize, width: usize, rgb: &[f64]) -> Result<()> {
    fs::File::create(path)?.write_all(&encode_ppm(height, width, rgb)?)?;
    Ok(())
}

/// Reads a binary (P6, maxval 255) PPM into `(height, width, rgb in [0, 1])`.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(Error::Format(format!("unsupported PPM kind {}", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PPM header field {s:?}")))
    };
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    let n = width * height * 3;
    if bytes.len() < pos + n {
        return Err(Error::Format("truncated PPM payload".into()));
    }
    let rgb = bytes[pos..pos + n]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok((height, width, rgb))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    decode_ppm(&fs::read(path)?)
}
