//! Binary policy checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic            4 bytes  = "SRDQ"
//! version          u16      = 1
//! descriptor_len   u32
//! descriptor       UTF-8, identifies the action-space geometry
//! n_sizes          u16      >= 2
//! layer_sizes      n_sizes x u64
//! parameters       f64 x param_count, per layer weights row-major then biases
//! ```
//!
//! Loads are strict: truncation, version drift, and trailing bytes all
//! fail with an error naming the offending field.

use std::fs;
use std::path::Path;

use crate::agent::network::QNetwork;
use crate::env::ActionSpace;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SRDQ";
pub const CHECKPOINT_VERSION: u16 = 1;

/// A trained Q-network together with the action-space identity it was
/// trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCheckpoint {
    pub action_space: String,
    pub network: QNetwork,
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).ok_or_else(|| {
            Error::Checkpoint(format!("length overflow while reading {field}"))
        })?;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {field}: need {n} bytes at offset {}, have {}",
                self.at,
                self.bytes.len() - self.at
            )));
        }
        let slice = &self.bytes[self.at..end];
        self.at = end;
        Ok(slice)
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        let b = self.take(2, field)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        let b = self.take(8, field)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        let b = self.take(8, field)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

impl PolicyCheckpoint {
    pub fn new(action_space: &ActionSpace, network: QNetwork) -> Self {
        PolicyCheckpoint {
            action_space: action_space.descriptor(),
            network,
        }
    }

    /// Fail unless the checkpoint was trained for `space`.
    pub fn verify_action_space(&self, space: &ActionSpace) -> Result<()> {
        let current = space.descriptor();
        if self.action_space != current {
            return Err(Error::Checkpoint(format!(
                "action-space mismatch: checkpoint has '{}', run expects '{current}'",
                self.action_space
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let sizes = self.network.layer_sizes();
        let params = self.network.params_flat();
        let mut out = Vec::with_capacity(
            4 + 2 + 4 + self.action_space.len() + 2 + sizes.len() * 8 + params.len() * 8,
        );
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.action_space.len() as u32).to_le_bytes());
        out.extend_from_slice(self.action_space.as_bytes());
        out.extend_from_slice(&(sizes.len() as u16).to_le_bytes());
        for s in sizes {
            out.extend_from_slice(&(*s as u64).to_le_bytes());
        }
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let dlen = r.u32("descriptor_len")? as usize;
        let dbytes = r.take(dlen, "descriptor")?;
        let action_space = std::str::from_utf8(dbytes)
            .map_err(|_| Error::Checkpoint("descriptor is not valid UTF-8".into()))?
            .to_string();
        let n_sizes = r.u16("n_sizes")? as usize;
        if n_sizes < 2 {
            return Err(Error::Checkpoint(format!(
                "n_sizes is {n_sizes}, a network needs at least 2 layer sizes"
            )));
        }
        let mut sizes = Vec::with_capacity(n_sizes);
        for i in 0..n_sizes {
            let s = r.u64(&format!("layer_sizes[{i}]"))?;
            if s == 0 || s > u64::from(u32::MAX) {
                return Err(Error::Checkpoint(format!(
                    "layer_sizes[{i}] = {s} is out of range"
                )));
            }
            sizes.push(s as usize);
        }
        let mut network = QNetwork::new(&sizes, 0)
            .map_err(|e| Error::Checkpoint(format!("invalid layer sizes: {e}")))?;
        let count = network.param_count();
        let mut params = Vec::with_capacity(count);
        for i in 0..count {
            params.push(r.f64(&format!("parameters[{i}]"))?);
        }
        network
            .set_params_flat(&params)
            .expect("parameter count derived from the same sizes");
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after parameters",
                bytes.len() - r.at
            )));
        }
        Ok(PolicyCheckpoint {
            action_space,
            network,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::Io {
            context: format!("writing checkpoint {}", path.display()),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Io {
            context: format!("reading checkpoint {}", path.display()),
            source: e,
        })?;
        Self::from_bytes(&bytes)
    }
}
