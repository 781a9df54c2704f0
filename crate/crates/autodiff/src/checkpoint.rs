//! Binary parameter container.
//!
//! Layout, all integers little endian:
//!
//! ```text
//! "SJCK" | u32 version | u32 manifest_len | manifest JSON
//! u32 count | count x (u32 name_len | name | u8 trainable | u8 dtype_bytes | 4 x u64 dims | data)
//! 32-byte SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SJCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub manifest: serde_json::Value,
    pub params: ParamStore<T>,
}

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(AutodiffError::Checkpoint(msg.into()))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return bad("truncated");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn new(manifest: serde_json::Value, params: ParamStore<T>) -> Self {
        Self { manifest, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let manifest = serde_json::to_vec(&self.manifest).expect("JSON value serializes");
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, value, trainable) in self.params.raw_entries() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(trainable as u8);
            out.push(T::BYTES);
            for d in value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&T::to_le_bytes_vec(value.data()));
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses and verifies a container. Stored values of the other precision are converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 {
            return bad("file too short");
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return bad("checksum mismatch");
        }
        let mut c = Cursor { buf: body, pos: 0 };
        if c.take(4)? != MAGIC {
            return bad("bad magic");
        }
        let version = c.u32()?;
        if version != VERSION {
            return bad(format!("unsupported version {version}"));
        }
        let mlen = c.u32()? as usize;
        let manifest: serde_json::Value =
            serde_json::from_slice(c.take(mlen)?).map_err(|e| AutodiffError::Checkpoint(format!("manifest: {e}")))?;
        let count = c.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let nlen = c.u32()? as usize;
            let name = std::str::from_utf8(c.take(nlen)?)
                .map_err(|_| AutodiffError::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let trainable = c.u8()? != 0;
            let dtype = c.u8()? as usize;
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = c.u64()? as usize;
            }
            let n: usize = shape.iter().product();
            let raw = c.take(n * dtype)?;
            let data: Vec<T> = match dtype {
                4 => raw.chunks_exact(4).map(|ch| T::from_f64(f32::from_le_chunk(ch) as f64)).collect(),
                8 => raw.chunks_exact(8).map(|ch| T::from_f64(f64::from_le_chunk(ch))).collect(),
                other => return bad(format!("unknown dtype width {other}")),
            };
            let t = Tensor::from_vec(shape, data)?;
            if trainable {
                params.add(name, t);
            } else {
                params.add_buffer(name, t);
            }
        }
        if c.pos != body.len() {
            return bad("trailing bytes");
        }
        Ok(Self { manifest, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
