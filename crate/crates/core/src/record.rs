//! Line-delimited JSON records for corpora, logs and reports.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::MultimodalExample;

/// Serializes one value as a single JSON line (no trailing newline).
pub fn to_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("record types serialize infallibly")
}

pub fn from_line<T: DeserializeOwned>(line: &str, line_no: usize) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })
}

pub fn serialize_example(example: &MultimodalExample) -> String {
    to_line(example)
}

pub fn deserialize_example(line: &str) -> Result<MultimodalExample> {
    let ex: MultimodalExample = from_line(line, 1)?;
    ex.validate()?;
    Ok(ex)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Writes `bytes` to `path` via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp~");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_lines<T: Serialize>(path: &Path, header: Option<&str>, items: &[T]) -> Result<()> {
    let mut buf = String::new();
    if let Some(h) = header {
        buf.push_str(h);
        buf.push('\n');
    }
    for item in items {
        buf.push_str(&to_line(item));
        buf.push('\n');
    }
    write_atomic(path, buf.as_bytes())
}

/// Reads non-empty lines with their 1-based line numbers.
pub fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, l)| from_line(&l, n))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::*;
    use std::collections::BTreeSet;

    fn minimal() -> MultimodalExample {
        MultimodalExample {
            example_id: "ex-0".into(),
            visual: VisualContext::new("img-0", vec![vec![0.1, -2.5e-17, 3.0]]).unwrap(),
            instruction: TokenSeq::new(vec![], 64).unwrap(),
            response: TokenSeq::new(vec![5], 64).unwrap(),
            gt_objects: BTreeSet::new(),
            annotations: None,
        }
    }

    #[test]
    fn minimal_example_round_trips() {
        let ex = minimal();
        let line = serialize_example(&ex);
        assert!(!line.contains('\n'));
        assert_eq!(deserialize_example(&line).unwrap(), ex);
    }

    #[test]
    fn full_taxonomy_round_trips() {
        let mut ex = minimal();
        ex.gt_objects = ["cup".to_string(), "saucer".to_string()].into();
        ex.annotations = Some(
            TaxonomyCategory::ALL
                .iter()
                .enumerate()
                .map(|(i, &category)| TaxonomyLabel {
                    category,
                    count: i as u32,
                })
                .collect(),
        );
        assert_eq!(deserialize_example(&serialize_example(&ex)).unwrap(), ex);
    }

    #[test]
    fn top_level_field_names() {
        let v: serde_json::Value = serde_json::from_str(&serialize_example(&minimal())).unwrap();
        for k in [
            "example_id",
            "image_id",
            "instruction",
            "response",
            "gt_objects",
        ] {
            assert!(v.get(k).is_some(), "missing {k}");
        }
    }

    #[test]
    fn bias_record_round_trip_omits_rejected_for_vit() {
        let r = BiasRecord {
            step: 3,
            phase: Phase::Vit,
            reward: 0.1 + 0.2,
            bias: -1.0 / 3.0,
            reward_rejected: None,
            bias_rejected: None,
            alpha: 5.05e-5,
            gamma: 0.0,
            lr: Some(1e-4),
            loss: Some(LossBreakdown::from_terms(&[(Component::Vit, 2.0, 1.0)])),
        };
        let line = to_line(&r);
        assert!(!line.contains("reward_rejected"));
        assert_eq!(from_line::<BiasRecord>(&line, 1).unwrap(), r);
    }
}
