//! Resolved run configuration: defaults, then preset, then config file, then flags.

use std::path::{Path, PathBuf};

use biaslab::data::WorldConfig;
use biaslab::model::ModelConfig;
use biaslab::train::TrainConfig;
use biaslab::types::Mode;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenData {
    pub n_vit: usize,
    pub n_pref: usize,
    pub n_eval: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CacheRef {
    pub corpus: Option<PathBuf>,
    pub snapshot: Option<PathBuf>,
    pub modes: Vec<Mode>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Train {
    pub corpus: Option<PathBuf>,
    /// Frozen reference; the policy starts from the same parameters.
    pub reference: Option<PathBuf>,
    #[serde(flatten)]
    pub config: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheck {
    pub corpus: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    /// Policy snapshot; defaults to the reference with seeded Gaussian noise.
    pub policy: Option<PathBuf>,
    pub perturbation: f64,
    pub examples: usize,
    pub coords: usize,
    pub h: f64,
    pub tolerance: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Eval {
    pub snapshot: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub max_len: usize,
    pub end_token: u32,
    pub judge_score: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub logs: Vec<PathBuf>,
    pub tail: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    /// The single seed of a run; copied into `train.seed`.
    pub seed: u64,
    pub out: PathBuf,
    pub preset: Option<String>,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub gen_data: GenData,
    pub cache_ref: CacheRef,
    pub train: Train,
    pub grad_check: GradCheck,
    pub eval: Eval,
    pub report: Report,
}

impl RunConfig {
    fn defaults(train: TrainConfig) -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("."),
            preset: None,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            gen_data: GenData {
                n_vit: 6400,
                n_pref: 2000,
                n_eval: 500,
            },
            cache_ref: CacheRef {
                corpus: None,
                snapshot: None,
                modes: vec![Mode::Multimodal, Mode::TextOnly],
                output: None,
            },
            train: Train {
                corpus: None,
                reference: None,
                config: train,
            },
            grad_check: GradCheck {
                corpus: None,
                reference: None,
                policy: None,
                perturbation: 0.05,
                examples: 3,
                coords: 20,
                h: 1e-4,
                tolerance: 1e-4,
                alpha: 1e-5,
                gamma: 1.0,
                beta: 0.1,
            },
            eval: Eval {
                snapshot: None,
                corpus: None,
                max_len: 48,
                end_token: 0,
                judge_score: None,
            },
            report: Report {
                logs: Vec::new(),
                tail: biaslab::report::DEFAULT_TAIL,
            },
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.config.validate()?;
        if self.model.vocab_size != self.world.vocab_size() as usize {
            return Err(CliError::Config(format!(
                "model.vocab_size {} differs from the world's {}",
                self.model.vocab_size,
                self.world.vocab_size()
            )));
        }
        if self.model.d_v != self.world.feature_dim {
            return Err(CliError::Config(format!(
                "model.d_v {} differs from world.feature_dim {}",
                self.model.d_v, self.world.feature_dim
            )));
        }
        Ok(())
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets a dotted `path` inside `root`, creating tables as needed.
pub fn set_path(root: &mut Value, path: &str, value: Value) {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert(p.to_string(), value);
            return;
        }
        cur = obj
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
}

fn read_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::from_io(path, e))?;
    let table: toml::Value = toml::from_str(&text).map_err(|e| CliError::ConfigParse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(serde_json::to_value(table).expect("toml converts to json"))
}

/// Builds the resolved configuration.
///
/// `phase_default` is the training preset used when none is named.
pub fn resolve(
    file: Option<&Path>,
    preset_flag: Option<&str>,
    overrides: Vec<(String, Value)>,
    phase_default: &str,
) -> Result<RunConfig, CliError> {
    let file_value = file.map(read_file).transpose()?;
    let preset = preset_flag.map(str::to_string).or_else(|| {
        file_value
            .as_ref()
            .and_then(|v| v.get("preset"))
            .and_then(Value::as_str)
            .map(str::to_string)
    });
    let train = TrainConfig::preset(preset.as_deref().unwrap_or(phase_default))?;
    let mut value = serde_json::to_value(RunConfig::defaults(train)).expect("config serializes");
    if let Some(f) = file_value {
        merge(&mut value, f);
    }
    for (path, v) in overrides {
        set_path(&mut value, &path, v);
    }
    set_path(
        &mut value,
        "preset",
        preset.map_or(Value::Null, Value::String),
    );
    let mut cfg: RunConfig =
        serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.train.config.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}
