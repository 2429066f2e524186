//! Checkpoint files.
//!
//! ```text
//! magic        8 bytes  "AMBCKPT\0"
//! version      u16 LE
//! encoding     u8       0 = mask, 1 = gaussian
//! n, m         u32 LE each
//! sigma_data   f64 LE
//! hidden count u32 LE, then one u32 LE width per hidden layer
//! digest       32 bytes (config SHA-256)
//! param count  u64 LE
//! params       f64 LE each
//! checksum     32 bytes, SHA-256 of everything above
//! ```

use std::path::Path;

use sha2::{Digest as _, Sha256};

use super::{DenoiserModel, ModelArch, OperatorEncoding};
use crate::digest::Digest;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"AMBCKPT\0";
pub const CHECKPOINT_VERSION: u16 = 1;

impl DenoiserModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = self.arch();
        let mut out = Vec::with_capacity(96 + 8 * self.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(match arch.encoding {
            OperatorEncoding::Mask => 0,
            OperatorEncoding::Gaussian => 1,
        });
        out.extend_from_slice(&(arch.n as u32).to_le_bytes());
        out.extend_from_slice(&(arch.m as u32).to_le_bytes());
        out.extend_from_slice(&arch.sigma_data.to_le_bytes());
        out.extend_from_slice(&(arch.hidden.len() as u32).to_le_bytes());
        for &w in &arch.hidden {
            out.extend_from_slice(&(w as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.config_digest().0);
        out.extend_from_slice(&(self.num_params() as u64).to_le_bytes());
        for p in self.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 + 32 {
            return Err(Error::CorruptCheckpoint(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader { buf: body, pos: 8 };
        let version = u16::from_le_bytes(r.take::<2>()?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { expected: CHECKPOINT_VERSION, found: version });
        }
        if Sha256::digest(body).as_slice() != sum {
            return Err(Error::CorruptCheckpoint("checksum mismatch (truncated or modified file)".into()));
        }
        let encoding = match r.take::<1>()?[0] {
            0 => OperatorEncoding::Mask,
            1 => OperatorEncoding::Gaussian,
            t => return Err(Error::CorruptCheckpoint(format!("unknown encoding tag {t}"))),
        };
        let n = u32::from_le_bytes(r.take()?) as usize;
        let m = u32::from_le_bytes(r.take()?) as usize;
        let sigma_data = f64::from_le_bytes(r.take()?);
        let depth = u32::from_le_bytes(r.take()?) as usize;
        let hidden = (0..depth)
            .map(|_| r.take::<4>().map(|b| u32::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        let digest = Digest(r.take::<32>()?);
        let count = u64::from_le_bytes(r.take()?) as usize;
        let arch = ModelArch { encoding, n, m, hidden, sigma_data };
        if count != arch.num_params() || r.remaining() != 8 * count {
            return Err(Error::CorruptCheckpoint(format!(
                "architecture needs {} parameters, header says {count}, payload holds {}",
                arch.num_params(),
                r.remaining() / 8
            )));
        }
        let params = (0..count).map(|_| r.take::<8>().map(f64::from_le_bytes)).collect::<Result<Vec<_>>>()?;
        DenoiserModel::from_params(arch, params, digest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let out = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::CorruptCheckpoint("truncated header".into()))?;
        self.pos = end;
        Ok(out.try_into().unwrap())
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}
