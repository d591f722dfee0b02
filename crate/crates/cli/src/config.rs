//! Run configuration: defaults, then the JSON config file, then command-line
//! overrides. The resolved value is what every command sees and what gets
//! written to `config.lock.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use ibg_core::attribution::{AttributionConfig, Method};
use ibg_core::data::{GeneratorConfig, Split};
use ibg_core::dimension_analysis::DimConfig;
use ibg_core::faithfulness::FaithfulnessConfig;
use ibg_core::model::ModelConfig;
use ibg_core::training::TrainConfig;

use crate::error::{Category, CliError};

pub const LOCK_FILE: &str = "config.lock.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Base,
    Ibg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Alpha,
    Beta,
    #[value(name = "low_dim", alias = "low-dim")]
    LowDim,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Beta => "beta",
            SweepAxis::LowDim => "low_dim",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            axis: SweepAxis::Alpha,
            values: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/corpus.jsonl`.
    pub corpus: Option<PathBuf>,
    /// Model to read. Defaults to `<output_dir>/model-base.json` when training
    /// the ibg phase and `<output_dir>/model-ibg.json` otherwise.
    pub checkpoint: Option<PathBuf>,
    pub phase: Phase,
    pub method: Method,
    pub split: Split,
    /// Opinion words listed per example by `explain`.
    pub top_k: usize,
    pub generator: GeneratorConfig,
    /// `vocab_size` is taken from the corpus vocabulary.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attribution: AttributionConfig,
    pub faithfulness: FaithfulnessConfig,
    pub dims: DimConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("out"),
            corpus: None,
            checkpoint: None,
            phase: Phase::Base,
            method: Method::Ibg,
            split: Split::Test,
            top_k: 3,
            generator: GeneratorConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            attribution: AttributionConfig::default(),
            faithfulness: FaithfulnessConfig::default(),
            dims: DimConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn corpus_path(&self) -> PathBuf {
        self.corpus
            .clone()
            .unwrap_or_else(|| self.output_dir.join("corpus.jsonl"))
    }

    pub fn checkpoint_path(&self, default_phase: Phase) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join(checkpoint_name(default_phase)))
    }

    pub fn write_lock(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.output_dir)?;
        let mut text = serde_json::to_string_pretty(self).map_err(CliError::internal)?;
        text.push('\n');
        std::fs::write(self.output_dir.join(LOCK_FILE), text)?;
        Ok(())
    }
}

pub fn checkpoint_name(phase: Phase) -> &'static str {
    match phase {
        Phase::Base => "model-base.json",
        Phase::Ibg => "model-ibg.json",
    }
}

/// Resolves defaults < file < `--set` overrides < dedicated flags.
pub fn resolve(file: Option<&Path>, sets: &[String], flags: Vec<(&str, Value)>) -> Result<RunConfig, CliError> {
    let mut value = serde_json::to_value(RunConfig::default()).map_err(CliError::internal)?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(e, path))?;
        let from_file: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::new(Category::ConfigConflict, format!("{}: {e}", path.display())))?;
        merge(&mut value, from_file);
    }
    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| CliError::new(Category::ConfigConflict, format!("--set expects key=value, got `{s}`")))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
        set_path(&mut value, key, parsed)?;
    }
    for (key, v) in flags {
        set_path(&mut value, key, v)?;
    }
    let config: RunConfig =
        serde_json::from_value(value).map_err(|e| CliError::new(Category::ConfigConflict, format!("config: {e}")))?;
    config.attribution.validate()?;
    config.train.validate()?;
    Ok(config)
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
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

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<(), CliError> {
    let mut cur = root;
    for part in key.split('.') {
        let obj = cur.as_object_mut().ok_or_else(|| {
            CliError::new(
                Category::ConfigConflict,
                format!("`{key}` does not name a config field"),
            )
        })?;
        cur = obj.entry(part.to_owned()).or_insert(Value::Null);
    }
    *cur = v;
    Ok(())
}
