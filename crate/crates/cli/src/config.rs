//! Run configuration, read from a single TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use circuit_reuse::model::{ModelConfig, Nonlinearity, Norm, TrainConfig};
use circuit_reuse::tasks::{TaskId, Vocab, MAX_PROMPT_LEN};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every random stream in the run is derived from it.
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub tasks: TaskSection,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub extract: ExtractSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Model shape; the vocabulary size and context length follow from the tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub nonlinearity: Nonlinearity,
    pub norm: Norm,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(1, 1);
        Self {
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            d_model: d.d_model,
            d_head: d.d_head,
            d_mlp: d.d_mlp,
            nonlinearity: d.nonlinearity,
            norm: d.norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub names: Vec<TaskId>,
    /// Examples per task used for circuit extraction.
    pub n_train: usize,
    /// Held-out examples per task used for every accuracy measurement.
    pub n_eval: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            names: TaskId::ALL.to_vec(),
            n_train: 1000,
            n_eval: 500,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractSection {
    /// Training step whose checkpoint is extracted and analysed; the last
    /// scheduled checkpoint when absent.
    pub checkpoint: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub k_sweep: Vec<f64>,
    pub p_sweep: Vec<f64>,
    pub n_controls: usize,
    /// P of the shared set whose necessity is measured by `analyze` and `sweep`.
    pub necessity_p: f64,
    /// P of the per-task shared sets compared by `crosstask`.
    pub crosstask_p: f64,
    /// K values at which `crosstask` runs ablations; overlap and
    /// decomposition sizes are reported for the whole K sweep.
    pub crosstask_k: Vec<f64>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            k_sweep: vec![0.01, 0.05, 0.10, 0.20, 0.30],
            p_sweep: vec![0.95, 0.96, 0.97, 0.98, 0.99, 1.00],
            n_controls: 5,
            necessity_p: 0.97,
            crosstask_p: 0.97,
            crosstask_k: vec![0.10],
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn check_fractions(field: &str, values: &[f64]) -> Result<(), CliError> {
    if values.is_empty() {
        return Err(config_err(format!("{field} must not be empty")));
    }
    for (i, &v) in values.iter().enumerate() {
        if !(v > 0.0 && v <= 1.0) {
            return Err(config_err(format!("{field}[{i}] = {v} must lie in (0, 1]")));
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let config: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => config_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model_config()
            .validate()
            .map_err(|e| config_err(e.to_string()))?;
        self.training.validate().map_err(|e| config_err(e.to_string()))?;
        let t = &self.tasks;
        if t.names.is_empty() {
            return Err(config_err("tasks.names must not be empty"));
        }
        for (i, name) in t.names.iter().enumerate() {
            if t.names[..i].contains(name) {
                return Err(config_err(format!("tasks.names lists {name} twice")));
            }
        }
        if t.n_train == 0 {
            return Err(config_err("tasks.n_train must be positive"));
        }
        if t.n_eval == 0 {
            return Err(config_err("tasks.n_eval must be positive"));
        }
        let a = &self.analysis;
        check_fractions("analysis.k_sweep", &a.k_sweep)?;
        check_fractions("analysis.p_sweep", &a.p_sweep)?;
        check_fractions("analysis.necessity_p", &[a.necessity_p])?;
        check_fractions("analysis.crosstask_p", &[a.crosstask_p])?;
        if let Some(&k) = a.crosstask_k.iter().find(|k| !a.k_sweep.contains(k)) {
            return Err(config_err(format!(
                "analysis.crosstask_k: {k} is not in analysis.k_sweep"
            )));
        }
        if let Some(step) = self.extract.checkpoint {
            if !self.training.checkpoints.contains(&step) {
                return Err(config_err(format!(
                    "extract.checkpoint: step {step} is not in training.checkpoints"
                )));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_model: m.d_model,
            d_head: m.d_head,
            d_mlp: m.d_mlp,
            vocab_size: Vocab::builtin().len(),
            max_seq_len: MAX_PROMPT_LEN,
            nonlinearity: m.nonlinearity,
            norm: m.norm,
        }
    }

    /// The checkpoint step analysed by `extract`, `analyze` and `crosstask`.
    pub fn analysis_step(&self) -> u64 {
        self.extract
            .checkpoint
            .or_else(|| self.training.checkpoints.iter().copied().max())
            .unwrap_or(0)
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serialises");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
