//! Self-describing binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "I2ICKPT\0" | version u32
//! run config   u64 len, UTF-8
//! vocabulary   u32 count, then (u32 len, UTF-8) per token
//! state        u64 len, JSON
//! arrays       u32 count, then per array:
//!              u32 name len, name, u8 dtype, u32 ndim, u64 dims..., payload
//! crc32 of every preceding byte, u32
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"I2ICKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint is corrupt: {0}")]
    Integrity(String),
    #[error("checkpoint does not match this run: {0}")]
    Incompatible(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl NamedArray {
    pub fn from_values<T: Scalar>(name: impl Into<String>, shape: &[usize], values: &[T]) -> Self {
        let mut data = Vec::with_capacity(values.len() * T::DTYPE.size());
        for v in values {
            v.write_le(&mut data);
        }
        Self {
            name: name.into(),
            dtype: T::DTYPE,
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Decodes the payload, converting between precisions when needed.
    pub fn values<T: Scalar>(&self) -> Vec<T> {
        let size = self.dtype.size();
        self.data
            .chunks_exact(size)
            .map(|c| match self.dtype {
                DType::F64 => T::lit(f64::read_le(c)),
                DType::F32 => T::lit(f64::from(f32::read_le(c))),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub run_config: String,
    pub vocabulary: Vec<String>,
    pub state: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_long(&mut out, self.run_config.as_bytes());
        out.extend_from_slice(&(self.vocabulary.len() as u32).to_le_bytes());
        for t in &self.vocabulary {
            put_short(&mut out, t.as_bytes());
        }
        let state = serde_json::to_vec(&self.state).expect("JSON values always serialize");
        put_long(&mut out, &state);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            put_short(&mut out, a.name.as_bytes());
            out.push(a.dtype.code());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&a.data);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let bad = |m: &str| CheckpointError::Integrity(m.to_string());
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(bad("checksum mismatch (truncated or modified file)"));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let run_config = r.string_long()?;
        let n_vocab = r.u32()? as usize;
        let mut vocabulary = Vec::with_capacity(n_vocab.min(1 << 20));
        for _ in 0..n_vocab {
            vocabulary.push(r.string_short()?);
        }
        let state_len = r.u64()? as usize;
        let state =
            serde_json::from_slice(r.take(state_len)?).map_err(|e| bad(&format!("state: {e}")))?;
        let n_arrays = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n_arrays.min(1 << 16));
        for _ in 0..n_arrays {
            let name = r.string_short()?;
            let dtype = DType::from_code(r.take(1)?[0]).ok_or_else(|| bad("unknown dtype"))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let data = r.take(n * dtype.size())?.to_vec();
            arrays.push(NamedArray {
                name,
                dtype,
                shape,
                data,
            });
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            run_config,
            vocabulary,
            state,
            arrays,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        drop(f);
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn put_short(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_long(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Integrity("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn utf8(b: &[u8]) -> Result<String, CheckpointError> {
        String::from_utf8(b.to_vec())
            .map_err(|_| CheckpointError::Integrity("invalid UTF-8".into()))
    }

    fn string_short(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        Self::utf8(self.take(n)?)
    }

    fn string_long(&mut self) -> Result<String, CheckpointError> {
        let n = self.u64()? as usize;
        Self::utf8(self.take(n)?)
    }
}
