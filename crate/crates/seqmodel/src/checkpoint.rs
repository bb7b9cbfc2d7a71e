//! Checkpoint container.
//!
//! Layout, little-endian: magic `MEOWCK1\0`; u32 length + UTF-8 stage tag;
//! u32 length + UTF-8 JSON config; u32 tensor count; per tensor a u32 length +
//! UTF-8 name, u8 rank, u64 dims and f32 row-major payload; trailing CRC32 of
//! everything before it.

use std::collections::HashMap;
use std::path::Path;

use vidtune_core::container::{append_crc, verify_trailing_crc, ByteReader};
use vidtune_core::{CoreError, Result};

use crate::config::TransformerConfig;
use crate::weights::ModelWeights;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MEOWCK1\0";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free-form tag naming what the weights were trained for.
    pub stage: String,
    pub weights: ModelWeights<f32>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut ByteReader<'_>, path: &Path) -> Result<String> {
    let n = r.u32()? as usize;
    String::from_utf8(r.take(n)?.to_vec()).map_err(|_| CoreError::format(path, "string field is not UTF-8"))
}

impl Checkpoint {
    pub fn new(stage: impl Into<String>, weights: ModelWeights<f32>) -> Self {
        Self {
            stage: stage.into(),
            weights,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_str(&mut out, &self.stage);
        put_str(&mut out, &serde_json::to_string(&self.weights.config).expect("config serializes"));
        let tensors = self.weights.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            put_str(&mut out, name);
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        append_crc(&mut out);
        out
    }

    /// Parses a checkpoint. With `expected`, tensors are checked against that
    /// configuration instead of the embedded one, and the first tensor whose
    /// shape differs is named in the error.
    pub fn from_bytes(bytes: &[u8], path: &Path, expected: Option<&TransformerConfig>) -> Result<Self> {
        let body = verify_trailing_crc(bytes, path)?;
        let mut r = ByteReader::new(body, path);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(CoreError::format(path, "bad checkpoint magic"));
        }
        let stage = get_str(&mut r, path)?;
        let embedded: TransformerConfig = serde_json::from_str(&get_str(&mut r, path)?)
            .map_err(|e| CoreError::format(path, format!("config block: {e}")))?;
        let config = expected.cloned().unwrap_or(embedded);
        let n = r.u32()? as usize;
        let mut stored: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::with_capacity(n);
        for _ in 0..n {
            let name = get_str(&mut r, path)?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let count: usize = shape.iter().product();
            if count.checked_mul(4).is_none_or(|b| b > r.remaining()) {
                return Err(CoreError::format(path, format!("tensor '{name}' overruns the file")));
            }
            let data = r
                .take(4 * count)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            stored.insert(name, (shape, data));
        }
        if r.remaining() != 0 {
            return Err(CoreError::format(path, "trailing bytes after the last tensor"));
        }
        let mut weights = ModelWeights::<f32>::init(&config, 0)?;
        let mut failure = None;
        weights.for_each_mut(|name, mut t| {
            if failure.is_some() {
                return;
            }
            match stored.remove(name) {
                None => failure = Some(CoreError::format(path, format!("missing tensor '{name}'"))),
                Some((shape, _)) if shape != t.shape() => {
                    failure = Some(CoreError::Shape(format!(
                        "tensor '{name}' has shape {shape:?} in {}, expected {:?}",
                        path.display(),
                        t.shape()
                    )))
                }
                Some((_, data)) => t.iter_mut().zip(data).for_each(|(d, s)| *d = s),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = stored.keys().min() {
            return Err(CoreError::format(path, format!("unexpected tensor '{extra}'")));
        }
        if !weights.all_finite() {
            return Err(CoreError::format(path, "non-finite parameter values"));
        }
        Ok(Self { stage, weights })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with(path, None)
    }

    pub fn load_with(path: impl AsRef<Path>, expected: Option<&TransformerConfig>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_bytes(&bytes, path, expected)
    }
}

pub fn save_checkpoint(weights: &ModelWeights<f32>, stage: &str, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::new(stage, weights.clone()).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
