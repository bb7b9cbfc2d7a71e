//! Binary containers: the generic tensor file and the codebook file.
//!
//! Tensor file layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MEOWTN1\0"
//! dtype    u8       0 = f32, 1 = i32
//! rank     u8
//! dims     rank x u64
//! payload  prod(dims) x 4 bytes, row-major
//! crc32    u32      over every preceding byte
//! ```
//!
//! Codebook file layout: 8-byte magic, `u32` n_levels, `u32` vocab_size,
//! `u32` frame_size, then `n_levels * vocab_size * frame_size` f32 values.

use std::path::Path;

use crate::error::{CoreError, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"MEOWTN1\0";
pub const CODEC_CODEBOOK_MAGIC: &[u8; 8] = b"MEOWCB1\0";
pub const SEMANTIC_CODEBOOK_MAGIC: &[u8; 8] = b"MEOWSC1\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    I32 = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_len(&shape, data.len())?;
        Ok(Self {
            shape,
            data: TensorData::F32(data),
        })
    }

    pub fn i32(shape: Vec<usize>, data: Vec<i32>) -> Result<Self> {
        check_len(&shape, data.len())?;
        Ok(Self {
            shape,
            data: TensorData::I32(data),
        })
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::I32(_) => Err(CoreError::Shape("expected f32 tensor, found i32".into())),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Ok(v),
            TensorData::F32(_) => Err(CoreError::Shape("expected i32 tensor, found f32".into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n: usize = self.shape.iter().product();
        let mut out = Vec::with_capacity(8 + 2 + 8 * self.shape.len() + 4 * n + 4);
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(self.dtype() as u8);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        if r.take(8)? != TENSOR_MAGIC {
            return Err(CoreError::format(path, "bad tensor magic"));
        }
        let dtype = match r.u8()? {
            0 => DType::F32,
            1 => DType::I32,
            other => return Err(CoreError::format(path, format!("unknown dtype code {other}"))),
        };
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?).map_err(|_| CoreError::format(path, "dimension overflows usize"))?;
            shape.push(d);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CoreError::format(path, "element count overflows"))?;
        let payload_len = n
            .checked_mul(4)
            .ok_or_else(|| CoreError::format(path, "payload size overflows"))?;
        let body_end = r.pos + payload_len;
        // Size first, so a truncated file reports as a checksum failure
        // rather than an arbitrary parse error.
        if bytes.len() != body_end + 4 {
            let stored = bytes
                .len()
                .checked_sub(4)
                .map(|i| u32::from_le_bytes(bytes[i..].try_into().unwrap()))
                .unwrap_or(0);
            let computed = crc32fast::hash(&bytes[..bytes.len().saturating_sub(4)]);
            if bytes.len() < body_end + 4 {
                return Err(CoreError::Checksum {
                    path: path.to_path_buf(),
                    stored,
                    computed,
                });
            }
            return Err(CoreError::format(
                path,
                format!("{} trailing bytes after payload", bytes.len() - body_end - 4),
            ));
        }
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(CoreError::Checksum {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }
        let payload = r.take(payload_len)?;
        let words = payload.chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).unwrap());
        let data = match dtype {
            DType::F32 => TensorData::F32(words.map(f32::from_le_bytes).collect()),
            DType::I32 => TensorData::I32(words.map(i32::from_le_bytes).collect()),
        };
        Ok(Self { shape, data })
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    if shape.len() > u8::MAX as usize {
        return Err(CoreError::Shape(format!("rank {} exceeds 255", shape.len())));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(CoreError::Shape(format!(
            "shape {shape:?} holds {n} elements but data has {len}"
        )));
    }
    Ok(())
}

/// Splits off and checks a trailing CRC32, returning the covered body.
pub fn verify_trailing_crc<'a>(bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    if bytes.len() < 4 {
        return Err(CoreError::Checksum {
            path: path.to_path_buf(),
            stored: 0,
            computed: crc32fast::hash(&[]),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CoreError::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    Ok(body)
}

/// Appends the CRC32 of everything written so far.
pub fn append_crc(out: &mut Vec<u8>) {
    let crc = crc32fast::hash(out);
    out.extend_from_slice(&crc.to_le_bytes());
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, tensor.to_bytes()).map_err(|e| CoreError::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    Tensor::from_bytes(&bytes, path)
}

/// Raw contents of a codebook file.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookFile {
    pub n_levels: usize,
    pub vocab_size: usize,
    pub frame_size: usize,
    /// `n_levels * vocab_size * frame_size` values, row-major.
    pub centroids: Vec<f32>,
}

impl CodebookFile {
    pub fn to_bytes(&self, magic: &[u8; 8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.centroids.len());
        out.extend_from_slice(magic);
        for v in [self.n_levels, self.vocab_size, self.frame_size] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for c in &self.centroids {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8; 8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        if r.take(8)? != magic {
            return Err(CoreError::format(
                path,
                format!("expected magic {:?}", String::from_utf8_lossy(&magic[..7])),
            ));
        }
        let n_levels = r.u32()? as usize;
        let vocab_size = r.u32()? as usize;
        let frame_size = r.u32()? as usize;
        let n = n_levels
            .checked_mul(vocab_size)
            .and_then(|x| x.checked_mul(frame_size))
            .ok_or_else(|| CoreError::format(path, "codebook size overflows"))?;
        if bytes.len() != 20 + 4 * n {
            return Err(CoreError::format(
                path,
                format!("expected {} bytes for header {n_levels}x{vocab_size}x{frame_size}, found {}", 20 + 4 * n, bytes.len()),
            ));
        }
        let centroids = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            n_levels,
            vocab_size,
            frame_size,
            centroids,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>, magic: &[u8; 8]) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes(magic)).map_err(|e| CoreError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>, magic: &[u8; 8]) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_bytes(&bytes, magic, path)
    }
}

/// Cursor over a byte slice with format errors tagged by file path.
pub struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(CoreError::format(
                self.path,
                format!("unexpected end of file at byte {} (wanted {n} more)", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
