//! Corpus files: a header line followed by one record per line.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::world::WorldConfig;
use crate::error::{Error, Result};
use crate::record::{from_line, read_lines, to_line, write_atomic};
use crate::types::{MultimodalExample, PreferencePair};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Vit,
    Preference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub corpus: CorpusKind,
    pub count: usize,
    pub seed: u64,
    pub world_hash: String,
    pub vocab_size: u32,
    pub objects: Vec<String>,
}

impl CorpusHeader {
    pub fn new(kind: CorpusKind, count: usize, seed: u64, world: &WorldConfig) -> Self {
        CorpusHeader {
            corpus: kind,
            count,
            seed,
            world_hash: world.hash(),
            vocab_size: world.vocab_size(),
            objects: world.object_names.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Records {
    Vit(Vec<MultimodalExample>),
    Preference(Vec<PreferencePair>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub records: Records,
    /// 1-based file line of each record.
    pub lines: Vec<usize>,
}

impl Corpus {
    pub fn vit(header: CorpusHeader, examples: Vec<MultimodalExample>) -> Self {
        let lines = (2..examples.len() + 2).collect();
        Corpus {
            header,
            records: Records::Vit(examples),
            lines,
        }
    }

    pub fn preference(header: CorpusHeader, pairs: Vec<PreferencePair>) -> Self {
        let lines = (2..pairs.len() + 2).collect();
        Corpus {
            header,
            records: Records::Preference(pairs),
            lines,
        }
    }

    pub fn len(&self) -> usize {
        match &self.records {
            Records::Vit(v) => v.len(),
            Records::Preference(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn examples(&self) -> Result<&[MultimodalExample]> {
        match &self.records {
            Records::Vit(v) => Ok(v),
            Records::Preference(_) => Err(Error::invalid(
                "expected a VIT corpus, found preference pairs",
            )),
        }
    }

    pub fn pairs(&self) -> Result<&[PreferencePair]> {
        match &self.records {
            Records::Preference(p) => Ok(p),
            Records::Vit(_) => Err(Error::invalid(
                "expected a preference corpus, found VIT examples",
            )),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = to_line(&self.header);
        out.push('\n');
        let mut push = |line: String| {
            out.push_str(&line);
            out.push('\n');
        };
        match &self.records {
            Records::Vit(v) => v.iter().for_each(|e| push(to_line(e))),
            Records::Preference(p) => p.iter().for_each(|e| push(to_line(e))),
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

/// Sibling path holding the world document of a corpus file.
pub fn world_path(corpus: &Path) -> PathBuf {
    let mut name = corpus.file_name().unwrap_or_default().to_os_string();
    name.push(".world.json");
    corpus.with_file_name(name)
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let lines = read_lines(path)?;
    let Some(((hline, htext), rest)) = lines.split_first() else {
        return Err(Error::Parse {
            line: 1,
            message: "empty corpus file".into(),
        });
    };
    let header: CorpusHeader = from_line(htext, *hline)?;
    let numbers: Vec<usize> = rest.iter().map(|(n, _)| *n).collect();
    let records = match header.corpus {
        CorpusKind::Vit => Records::Vit(
            rest.iter()
                .map(|(n, l)| from_line(l, *n))
                .collect::<Result<_>>()?,
        ),
        CorpusKind::Preference => Records::Preference(
            rest.iter()
                .map(|(n, l)| from_line(l, *n))
                .collect::<Result<_>>()?,
        ),
    };
    Ok(Corpus {
        header,
        records,
        lines: numbers,
    })
}

pub fn load_world(path: &Path) -> Result<WorldConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let world: WorldConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    world.validate()?;
    Ok(world)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub line: usize,
    pub id: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every record against the core invariants and the header's closed vocabulary.
pub fn validate_corpus(corpus: &Corpus) -> ValidationReport {
    let vocab: BTreeSet<&str> = corpus.header.objects.iter().map(String::as_str).collect();
    let mut report = ValidationReport::default();
    let mut seen = BTreeSet::new();
    let mut check =
        |line: usize, id: &str, valid: Result<()>, gt: &BTreeSet<String>, vocab_sizes: &[u32]| {
            let mut push = |message: String| {
                report.violations.push(Violation {
                    line,
                    id: id.to_string(),
                    message,
                })
            };
            if let Err(e) = valid {
                push(e.to_string());
            }
            if !seen.insert(id.to_string()) {
                push(format!("duplicate id {id}"));
            }
            for o in gt {
                if !vocab.contains(o.as_str()) {
                    push(format!(
                        "{id}: ground-truth object {o:?} is not in the corpus vocabulary"
                    ));
                }
            }
            if vocab_sizes.iter().any(|&v| v != corpus.header.vocab_size) {
                push(format!("{id}: token vocabulary differs from header"));
            }
        };
    match &corpus.records {
        Records::Vit(v) => {
            for (e, &line) in v.iter().zip(&corpus.lines) {
                let sizes = [e.instruction.vocab_size, e.response.vocab_size];
                check(line, &e.example_id, e.validate(), &e.gt_objects, &sizes);
            }
        }
        Records::Preference(p) => {
            for (e, &line) in p.iter().zip(&corpus.lines) {
                let sizes = [
                    e.instruction.vocab_size,
                    e.chosen.vocab_size,
                    e.rejected.vocab_size,
                ];
                check(line, &e.pair_id, e.validate(), &e.gt_objects, &sizes);
            }
        }
    }
    if corpus.len() != corpus.header.count {
        report.violations.push(Violation {
            line: 1,
            id: String::new(),
            message: format!(
                "header declares {} records, file has {}",
                corpus.header.count,
                corpus.len()
            ),
        });
    }
    report
}
