//! Little-endian binary containers with an 8-byte magic, a `u32` version
//! and a trailing CRC-32 over every preceding byte.
//!
//! | file       | magic      | body                                                        |
//! |------------|------------|-------------------------------------------------------------|
//! | features   | `OVIS.FTR` | `u64` rows, `u32` dim, rows x dim `f32`                     |
//! | checkpoint | `OVIS.MDL` | 7 x `u32` config, `u32` count, count x (name, shape, `f32`) |
//! | index      | `OVIS.IDX` | see [`crate::index`]                                        |

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::encoder::{EncoderConfig, EncoderError, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const FEATURE_MAGIC: &[u8; 8] = b"OVIS.FTR";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OVIS.MDL";
pub const INDEX_MAGIC: &[u8; 8] = b"OVIS.IDX";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("file truncated")]
    Truncated,
    #[error("CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    Crc { stored: u32, computed: u32 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid content: {0}")]
    Invalid(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

#[derive(Debug, Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn with_header(magic: &[u8; 8]) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(FORMAT_VERSION);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for &v in vs {
            self.f32(v);
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    /// Appends the CRC-32 trailer and returns the finished buffer.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub struct ByteReader<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    /// Verifies magic, version and CRC trailer.
    pub fn open(bytes: &'a [u8], magic: &[u8; 8]) -> Result<Self, FormatError> {
        if bytes.len() < 8 {
            return Err(FormatError::Truncated);
        }
        if &bytes[..8] != magic {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
            });
        }
        if bytes.len() < 16 {
            return Err(FormatError::Truncated);
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let computed = crc32(body);
        if stored != computed {
            return Err(FormatError::Crc { stored, computed });
        }
        let mut r = Self { body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(FormatError::Version(version));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        if end > self.body.len() {
            return Err(FormatError::Truncated);
        }
        let s = &self.body[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>, FormatError> {
        let raw = self.take(n.checked_mul(4).ok_or(FormatError::Truncated)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        self.take(n)
    }

    pub fn usize_from_u64(&mut self) -> Result<usize, FormatError> {
        usize::try_from(self.u64()?).map_err(|_| FormatError::Invalid("count exceeds address space".into()))
    }

    /// Fails unless every byte before the trailer has been consumed.
    pub fn finish(self) -> Result<(), FormatError> {
        if self.pos != self.body.len() {
            return Err(FormatError::Invalid(format!(
                "{} trailing bytes before checksum",
                self.body.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// `rows x dim` feature matrix as stored in a feature file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn encode_features(m: &FeatureMatrix) -> Vec<u8> {
    let mut w = ByteWriter::with_header(FEATURE_MAGIC);
    w.u64(m.rows as u64);
    w.u32(m.dim as u32);
    w.f32s(&m.data);
    w.finish()
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMatrix, FormatError> {
    let mut r = ByteReader::open(bytes, FEATURE_MAGIC)?;
    let rows = r.usize_from_u64()?;
    let dim = r.u32()? as usize;
    let data = r.f32s(rows.checked_mul(dim).ok_or(FormatError::Truncated)?)?;
    r.finish()?;
    if !data.iter().all(|v| v.is_finite()) {
        return Err(FormatError::NonFinite("feature file"));
    }
    Ok(FeatureMatrix { rows, dim, data })
}

pub fn write_features(path: impl AsRef<Path>, m: &FeatureMatrix) -> Result<(), FormatError> {
    fs::write(path, encode_features(m))?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix, FormatError> {
    decode_features(&fs::read(path)?)
}

fn write_config(w: &mut ByteWriter, c: &EncoderConfig) {
    for v in [
        c.layers,
        c.hidden,
        c.heads,
        c.ffn_dim,
        c.vocab_size,
        c.max_text_len,
        c.feature_dim,
    ] {
        w.u32(v as u32);
    }
}

fn read_config(r: &mut ByteReader<'_>) -> Result<EncoderConfig, FormatError> {
    let mut v = [0usize; 7];
    for slot in &mut v {
        *slot = r.u32()? as usize;
    }
    Ok(EncoderConfig {
        layers: v[0],
        hidden: v[1],
        heads: v[2],
        ffn_dim: v[3],
        vocab_size: v[4],
        max_text_len: v[5],
        feature_dim: v[6],
    })
}

/// Serialises parameters as 32-bit reals regardless of `T`.
pub fn encode_checkpoint<T: Scalar>(params: &ModelParams<T>) -> Vec<u8> {
    let mut w = ByteWriter::with_header(CHECKPOINT_MAGIC);
    write_config(&mut w, &params.config);
    let named = params.named_tensors();
    w.u32(named.len() as u32);
    for (name, t) in named {
        w.u32(name.len() as u32);
        w.bytes(name.as_bytes());
        w.u32(t.rows() as u32);
        w.u32(t.cols() as u32);
        for &v in t.data() {
            w.f32(v.to_f32_lossy());
        }
    }
    w.finish()
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ModelParams<T>, FormatError> {
    let mut r = ByteReader::open(bytes, CHECKPOINT_MAGIC)?;
    let config = read_config(&mut r)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.bytes(len)?)
            .map_err(|_| FormatError::Invalid("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = r.f32s(rows.checked_mul(cols).ok_or(FormatError::Truncated)?)?;
        if !data.iter().all(|v| v.is_finite()) {
            return Err(FormatError::NonFinite("checkpoint"));
        }
        let t = Tensor::new(rows, cols, data.into_iter().map(T::of_f32).collect())
            .map_err(|e| FormatError::Invalid(e.to_string()))?;
        tensors.push((name, t));
    }
    r.finish()?;
    Ok(ModelParams::from_tensors(config, tensors)?)
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, params: &ModelParams<T>) -> Result<u32, FormatError> {
    let bytes = encode_checkpoint(params);
    fs::write(path, &bytes)?;
    Ok(crc32(&bytes))
}

/// Loads a checkpoint and returns it with its fingerprint (CRC-32 of the
/// whole file).
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(ModelParams<T>, u32), FormatError> {
    let bytes = fs::read(path)?;
    let params = decode_checkpoint(&bytes)?;
    Ok((params, crc32(&bytes)))
}

/// Fingerprint binding an index to the checkpoint it was built from.
pub fn checkpoint_fingerprint<T: Scalar>(params: &ModelParams<T>) -> u32 {
    crc32(&encode_checkpoint(params))
}
