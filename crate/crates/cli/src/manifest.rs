use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use biaslab::record::{file_sha256, write_atomic};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub duration_secs: f64,
    pub tool_version: String,
}

/// Collects hashes while a command runs and writes the manifest at the end.
pub struct ManifestBuilder {
    command: String,
    config: Value,
    out: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: &impl Serialize, out: &Path) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            out: out.to_path_buf(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started: Instant::now(),
        }
    }

    /// Outputs are keyed relative to the output directory so reruns elsewhere compare equal.
    fn key(&self, path: &Path) -> String {
        path.strip_prefix(&self.out)
            .unwrap_or(path)
            .display()
            .to_string()
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let h = file_sha256(path)?;
        self.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        let h = file_sha256(path)?;
        self.outputs.insert(self.key(path), h);
        Ok(())
    }

    pub fn finish(self) -> Result<RunManifest, CliError> {
        let manifest = RunManifest {
            command: self.command.clone(),
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            duration_secs: self.started.elapsed().as_secs_f64(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let name = format!("{}.manifest.json", self.command.replace(' ', "-"));
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        write_atomic(&self.out.join(name), text.as_bytes())?;
        Ok(manifest)
    }
}
