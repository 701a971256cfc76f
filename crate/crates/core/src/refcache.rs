//! Precomputed reference-model log-likelihoods.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! magic        b"BLCACHE1"
//! snapshot     32 bytes   reference snapshot hash
//! corpus       32 bytes   corpus file hash
//! count        u64
//! entries      count × {
//!     id_len u32, id bytes, role u8, mode u8, snapshot 32 bytes,
//!     n u32, total f64, per_token n × f32 }
//! trailer      32 bytes   SHA-256 of everything above
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::data::{Corpus, Records};
use crate::error::{Error, Result};
use crate::model::{Model, ParamSnapshot};
use crate::record::write_atomic;
use crate::scalar::Scalar;
use crate::types::{Mode, ModelTag, SequenceLogProb, TokenSeq, VisualContext};

const MAGIC: &[u8; 8] = b"BLCACHE1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Response,
    Chosen,
    Rejected,
}

impl Role {
    fn code(self) -> u8 {
        match self {
            Role::Response => 0,
            Role::Chosen => 1,
            Role::Rejected => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Role::Response,
            1 => Role::Chosen,
            2 => Role::Rejected,
            _ => return Err(Error::Format(format!("unknown role code {c}"))),
        })
    }
}

fn mode_code(m: Mode) -> u8 {
    match m {
        Mode::Multimodal => 0,
        Mode::TextOnly => 1,
    }
}

fn mode_from_code(c: u8) -> Result<Mode> {
    match c {
        0 => Ok(Mode::Multimodal),
        1 => Ok(Mode::TextOnly),
        _ => Err(Error::Format(format!("unknown mode code {c}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CacheKey {
    pub id: String,
    pub role: Role,
    pub mode: Mode,
    pub snapshot_hash: String,
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{:?}/{}@{}",
            self.id,
            self.role,
            self.mode,
            &self.snapshot_hash[..self.snapshot_hash.len().min(12)]
        )
    }
}

/// Record id, response role and conditioning mode.
type EntryKey = (String, Role, Mode);

#[derive(Clone, Debug, PartialEq)]
pub struct CacheFile {
    snapshot_hash: String,
    corpus_hash: String,
    entries: BTreeMap<EntryKey, SequenceLogProb>,
}

/// Anything that can produce reference traces during training.
pub trait ReferenceSource: Sync {
    /// Hash of the snapshot the traces come from.
    fn snapshot_hash(&self) -> &str;

    fn trace(
        &self,
        id: &str,
        role: Role,
        visual: Option<&VisualContext>,
        instruction: &TokenSeq,
        response: &TokenSeq,
    ) -> Result<SequenceLogProb>;
}

/// Scores the frozen reference on demand.
pub struct LiveReference<T: Scalar = f32> {
    model: Model<T>,
    hash: String,
}

impl<T: Scalar> LiveReference<T> {
    pub fn new(snapshot: &ParamSnapshot) -> Result<Self> {
        Ok(LiveReference {
            model: snapshot.restore_reference()?,
            hash: snapshot.hash().to_string(),
        })
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }
}

impl<T: Scalar> ReferenceSource for LiveReference<T> {
    fn snapshot_hash(&self) -> &str {
        &self.hash
    }

    fn trace(
        &self,
        _id: &str,
        _role: Role,
        visual: Option<&VisualContext>,
        instruction: &TokenSeq,
        response: &TokenSeq,
    ) -> Result<SequenceLogProb> {
        self.model.score_sequence(visual, instruction, response)
    }
}

impl ReferenceSource for CacheFile {
    fn snapshot_hash(&self) -> &str {
        &self.snapshot_hash
    }

    fn trace(
        &self,
        id: &str,
        role: Role,
        visual: Option<&VisualContext>,
        _instruction: &TokenSeq,
        response: &TokenSeq,
    ) -> Result<SequenceLogProb> {
        let mode = if visual.is_some() {
            Mode::Multimodal
        } else {
            Mode::TextOnly
        };
        let lp = self.lookup(&CacheKey {
            id: id.to_string(),
            role,
            mode,
            snapshot_hash: self.snapshot_hash.clone(),
        })?;
        if lp.len() != response.len() {
            return Err(Error::InconsistentTraces(format!(
                "cached trace for {id} covers {} tokens, response has {}",
                lp.len(),
                response.len()
            )));
        }
        Ok(lp.clone())
    }
}

type Job<'a> = (&'a str, Role, &'a VisualContext, &'a TokenSeq, &'a TokenSeq);

fn jobs(corpus: &Corpus) -> Vec<Job<'_>> {
    match &corpus.records {
        Records::Vit(v) => v
            .iter()
            .map(|e| {
                (
                    e.example_id.as_str(),
                    Role::Response,
                    &e.visual,
                    &e.instruction,
                    &e.response,
                )
            })
            .collect(),
        Records::Preference(p) => p
            .iter()
            .flat_map(|e| {
                [
                    (
                        e.pair_id.as_str(),
                        Role::Chosen,
                        &e.visual,
                        &e.instruction,
                        &e.chosen,
                    ),
                    (
                        e.pair_id.as_str(),
                        Role::Rejected,
                        &e.visual,
                        &e.instruction,
                        &e.rejected,
                    ),
                ]
            })
            .collect(),
    }
}

impl CacheFile {
    /// Scores every record of `corpus` under the reference snapshot in each of `modes`.
    pub fn build(
        corpus: &Corpus,
        corpus_hash: &str,
        snapshot: &ParamSnapshot,
        modes: &[Mode],
    ) -> Result<Self> {
        let model: Model<f32> = snapshot.restore_reference()?;
        let work = jobs(corpus);
        let scored: Vec<Vec<(EntryKey, SequenceLogProb)>> = work
            .par_iter()
            .map(|&(id, role, visual, instruction, response)| {
                modes
                    .iter()
                    .map(|&mode| {
                        let v = (mode == Mode::Multimodal).then_some(visual);
                        let lp = model.score_sequence(v, instruction, response).map_err(
                            |e| match e {
                                Error::SequenceTooLong { len, max, .. } => Error::SequenceTooLong {
                                    len,
                                    max,
                                    id: Some(id.to_string()),
                                },
                                other => other,
                            },
                        )?;
                        Ok(((id.to_string(), role, mode), lp))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let mut entries = BTreeMap::new();
        for (k, v) in scored.into_iter().flatten() {
            if entries.insert(k.clone(), v).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate cache key {}/{:?}",
                    k.0, k.1
                )));
            }
        }
        Ok(CacheFile {
            snapshot_hash: snapshot.hash().to_string(),
            corpus_hash: corpus_hash.to_string(),
            entries,
        })
    }

    pub fn corpus_hash(&self) -> &str {
        &self.corpus_hash
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = CacheKey> + '_ {
        self.entries.keys().map(|(id, role, mode)| CacheKey {
            id: id.clone(),
            role: *role,
            mode: *mode,
            snapshot_hash: self.snapshot_hash.clone(),
        })
    }

    pub fn lookup(&self, key: &CacheKey) -> Result<&SequenceLogProb> {
        if key.snapshot_hash != self.snapshot_hash {
            return Err(Error::HashMismatch {
                expected: key.snapshot_hash.clone(),
                found: self.snapshot_hash.clone(),
            });
        }
        self.entries
            .get(&(key.id.clone(), key.role, key.mode))
            .ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    /// Fails unless the cache was built from exactly this snapshot and corpus.
    pub fn verify(&self, snapshot_hash: &str, corpus_hash: Option<&str>) -> Result<()> {
        if snapshot_hash != self.snapshot_hash {
            return Err(Error::HashMismatch {
                expected: snapshot_hash.to_string(),
                found: self.snapshot_hash.clone(),
            });
        }
        if let Some(c) = corpus_hash {
            if c != self.corpus_hash {
                return Err(Error::HashMismatch {
                    expected: c.to_string(),
                    found: self.corpus_hash.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let snap = hex::decode(&self.snapshot_hash).expect("hex digest");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&snap);
        out.extend_from_slice(&hex::decode(&self.corpus_hash).expect("hex digest"));
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for ((id, role, mode), lp) in &self.entries {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.push(role.code());
            out.push(mode_code(*mode));
            out.extend_from_slice(&snap);
            out.extend_from_slice(&(lp.len() as u32).to_le_bytes());
            out.extend_from_slice(&lp.total().to_le_bytes());
            for &t in lp.per_token() {
                out.extend_from_slice(&(t as f32).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 + 8 + 64 + 8 {
            return Err(Error::Format("cache file too short".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::HashMismatch {
                expected: hex::encode(trailer),
                found: hex::encode(Sha256::digest(body)),
            });
        }
        let mut r = Reader {
            bytes: body,
            pos: 0,
        };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a reference cache".into()));
        }
        let snapshot_hash = hex::encode(r.take(32)?);
        let corpus_hash = hex::encode(r.take(32)?);
        let count = r.u64()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let id_len = r.u32()? as usize;
            let id = String::from_utf8(r.take(id_len)?.to_vec())
                .map_err(|_| Error::Format("cache id is not UTF-8".into()))?;
            let role = Role::from_code(r.take(1)?[0])?;
            let mode = mode_from_code(r.take(1)?[0])?;
            if hex::encode(r.take(32)?) != snapshot_hash {
                return Err(Error::Format(format!(
                    "entry {id} belongs to another snapshot"
                )));
            }
            let n = r.u32()? as usize;
            let total = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            let per_token = (0..n)
                .map(|_| Ok(f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64))
                .collect::<Result<Vec<_>>>()?;
            let lp = SequenceLogProb::with_total(per_token, total, mode, ModelTag::Reference)?;
            if entries.insert((id.clone(), role, mode), lp).is_some() {
                return Err(Error::Format(format!("duplicate cache key {id}")));
            }
        }
        if r.pos != body.len() {
            return Err(Error::Format(
                "entry count disagrees with file length".into(),
            ));
        }
        Ok(CacheFile {
            snapshot_hash,
            corpus_hash,
            entries,
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

/// Loads the corpus at `path` and scores it; the cache records the file's hash.
pub fn build_cache(path: &Path, snapshot: &ParamSnapshot, modes: &[Mode]) -> Result<CacheFile> {
    let corpus = crate::data::load_corpus(path)?;
    CacheFile::build(&corpus, &crate::record::file_sha256(path)?, snapshot, modes)
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
            .ok_or_else(|| Error::Format("unexpected end of cache file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
