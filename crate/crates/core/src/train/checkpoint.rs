//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CLIMCKPT" | version u32 | config sha256 [32] | step u64
//! precision name (u32 len + bytes)
//! parameter count u32, then per parameter:
//!     name (u32 len + bytes) | decay u8 | ndim u32 | dims u64… | values
//! adam step u64 | first moments… | second moments…   (values only)
//! rng seed [32] | rng stream u64 | rng word position u128
//! config JSON (u64 len + bytes)
//! sha256 of everything above [32]
//! ```

use std::path::Path;

use clim_tensor::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::{ParamEntry, ParamStore};
use crate::train::optim::AdamState;

pub const MAGIC: &[u8; 8] = b"CLIMCKPT";
pub const VERSION: u32 = 1;

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    pub config: RunConfig,
    pub step: u64,
    pub params: ParamStore<T>,
    pub adam: AdamState<T>,
    pub rng: ChaCha8Rng,
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_values<T: Real>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config.hash_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_bytes(&mut out, T::NAME.as_bytes());
        let entries = self.params.entries();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for e in entries {
            put_bytes(&mut out, e.name.as_bytes());
            out.push(u8::from(e.decay));
            out.extend_from_slice(&(e.value.shape().len() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_values(&mut out, &e.value);
        }
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        for t in self.adam.m.iter().chain(&self.adam.v) {
            put_values(&mut out, t);
        }
        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        let json = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, at: 0, path };
        if r.take(8)? != MAGIC {
            return Err(r.fail("not a checkpoint (bad magic)"));
        }
        let body = bytes.len().checked_sub(32).ok_or_else(|| r.fail("truncated"))?;
        if Sha256::digest(&bytes[..body]).as_slice() != &bytes[body..] {
            return Err(r.fail("checksum mismatch (corrupt or truncated file)"));
        }
        let bytes = &bytes[..body];
        r.bytes = bytes;
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(&format!("unsupported version {version}")));
        }
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let step = r.u64()?;
        let precision = r.string()?;
        if precision != T::NAME {
            return Err(r.fail(&format!("holds {precision} values, expected {}", T::NAME)));
        }
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let decay = r.take(1)?[0] != 0;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let value = r.tensor(shape)?;
            params.add(name, value, decay);
        }
        let t = r.u64()?;
        let shapes: Vec<Vec<usize>> = params
            .entries()
            .iter()
            .map(|e: &ParamEntry<T>| e.value.shape().to_vec())
            .collect();
        let m = shapes.iter().map(|s| r.tensor(s.clone())).collect::<Result<Vec<_>>>()?;
        let v = shapes.iter().map(|s| r.tensor(s.clone())).collect::<Result<Vec<_>>>()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let len = r.u64()? as usize;
        let config: RunConfig = serde_json::from_slice(r.take(len)?)?;
        if r.at != bytes.len() {
            return Err(r.fail("trailing bytes"));
        }
        if config.hash_bytes() != hash {
            return Err(r.fail("config hash does not match the embedded config"));
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Ok(Self {
            config,
            step,
            params,
            adam: AdamState { t, m, v },
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, path)
    }
}

/// Precision recorded in a checkpoint file, read without decoding the rest.
pub fn peek_precision(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(r.fail("not a checkpoint (bad magic)"));
    }
    r.take(4 + 32 + 8)?;
    r.string()
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: &str) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(self.fail(&format!("truncated at byte {}", self.at)));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| self.fail("invalid UTF-8 name"))
    }

    fn tensor<T: Real>(&mut self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(T::BYTES).ok_or_else(|| self.fail("shape overflow"))?)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok(Tensor::new(shape, data)?)
    }
}
