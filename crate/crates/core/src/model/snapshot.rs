//! Content-addressed parameter snapshots.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic     b"BLSNAP01"
//! precision u8            4 = f32, 8 = f64
//! cfg_len   u32
//! config    cfg_len bytes  canonical JSON of ModelConfig
//! cfg_hash  32 bytes       SHA-256 of config
//! count     u64            parameter count
//! body      count × precision bytes
//! ```
//!
//! The snapshot hash is the SHA-256 of `body`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Model, ModelConfig, ParamLayout};
use crate::error::{Error, Result};
use crate::record::write_atomic;
use crate::scalar::Scalar;
use crate::types::ModelTag;

const MAGIC: &[u8; 8] = b"BLSNAP01";

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSnapshot {
    config: ModelConfig,
    config_hash: String,
    precision: u8,
    body: Vec<u8>,
    hash: String,
}

impl ParamSnapshot {
    pub fn capture<T: Scalar>(model: &Model<T>) -> Self {
        let mut body = Vec::with_capacity(model.n_params() * T::BYTES as usize);
        for &p in model.params() {
            p.write_le(&mut body);
        }
        let hash = hex::encode(Sha256::digest(&body));
        ParamSnapshot {
            config: model.config().clone(),
            config_hash: model.config().hash(),
            precision: T::BYTES,
            body,
            hash,
        }
    }

    /// Rebuilds a model, optionally requiring a specific config hash.
    pub fn restore<T: Scalar>(&self, expected_config_hash: Option<&str>) -> Result<Model<T>> {
        if let Some(expected) = expected_config_hash {
            if expected != self.config_hash {
                return Err(Error::HashMismatch {
                    expected: expected.to_string(),
                    found: self.config_hash.clone(),
                });
            }
        }
        let params: Vec<T> = match self.precision {
            4 => self
                .body
                .chunks_exact(4)
                .map(|c| T::lit(f32::read_le(c) as f64))
                .collect(),
            8 => self
                .body
                .chunks_exact(8)
                .map(|c| T::lit(f64::read_le(c)))
                .collect(),
            other => return Err(Error::Format(format!("unknown precision tag {other}"))),
        };
        Model::from_params(self.config.clone(), params)
    }

    /// Restores and tags the result as the frozen reference.
    pub fn restore_reference<T: Scalar>(&self) -> Result<Model<T>> {
        Ok(self.restore::<T>(None)?.with_tag(ModelTag::Reference))
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn precision(&self) -> u8 {
        self.precision
    }

    pub fn n_params(&self) -> usize {
        self.body.len() / self.precision as usize
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        let mut out = Vec::with_capacity(64 + cfg.len() + self.body.len());
        out.extend_from_slice(MAGIC);
        out.push(self.precision);
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&hex::decode(&self.config_hash).expect("hex digest"));
        out.extend_from_slice(&(self.n_params() as u64).to_le_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a parameter snapshot".into()));
        }
        let precision = r.take(1)?[0];
        if precision != 4 && precision != 8 {
            return Err(Error::Format(format!("unknown precision tag {precision}")));
        }
        let cfg_len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
            .map_err(|e| Error::Format(format!("snapshot config: {e}")))?;
        config.validate()?;
        let config_hash = hex::encode(r.take(32)?);
        if config_hash != config.hash() {
            return Err(Error::HashMismatch {
                expected: config_hash,
                found: config.hash(),
            });
        }
        let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        if count != ParamLayout::new(&config).len() {
            return Err(Error::Shape(format!(
                "snapshot holds {count} parameters, config needs {}",
                ParamLayout::new(&config).len()
            )));
        }
        let body = r.take(count * precision as usize)?.to_vec();
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after snapshot body".into()));
        }
        let hash = hex::encode(Sha256::digest(&body));
        Ok(ParamSnapshot {
            config,
            config_hash,
            precision,
            body,
            hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}
