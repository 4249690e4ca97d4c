//! Experiment configuration: JSON ingestion and validation.

use std::fs;
use std::path::{Path, PathBuf};

use fedone_core::estimator::LocalTrainConfig;
use fedone_core::federation::{ClientWeighting, SamplingMode};
use fedone_core::oracle::{OracleKind, OracleSpec};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BUDGET: usize = 500;

const ORACLE_KINDS: [&str; 3] = ["hidden_prompt", "linear_surrogate", "remote_llm"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
}

impl ConfigError {
    fn invalid(field: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// Field named by a validation error, if any.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { field, .. } => Some(field),
            _ => None,
        }
    }
}

impl From<serde_json::Error> for ConfigError {
    fn from(e: serde_json::Error) -> Self {
        ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

fn default_tau() -> f64 {
    1.0
}

fn default_nu() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSection {
    pub length: usize,
    pub vocab_size: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_nu")]
    pub nu: f64,
}

/// Synthetic labelled dataset; ignored for the remote oracle, whose
/// examples come from the oracle section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub num_classes: usize,
    pub examples_per_class: usize,
}

fn default_budget() -> usize {
    DEFAULT_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    /// Total number of clients `K`.
    pub clients: usize,
    /// Single activated-client count; used when `sweep` is absent.
    #[serde(default)]
    pub k_star: Option<usize>,
    /// Round budget per run.
    #[serde(default = "default_budget")]
    pub rounds: usize,
    pub local: LocalTrainConfig,
    #[serde(default)]
    pub weighting: ClientWeighting,
    #[serde(default)]
    pub q: Option<Vec<f64>>,
    #[serde(default)]
    pub sampling: SamplingMode,
    #[serde(default)]
    pub track_diversity: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Even,
    Kshot { k: usize },
    Dirichlet { concentration: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", rename_all = "snake_case", deny_unknown_fields)]
pub enum Target {
    /// Reached when the global expected loss drops to the threshold.
    Loss { threshold: f64 },
    /// Reached when validation accuracy of the mode prompt hits the threshold.
    Accuracy { threshold: f64 },
}

impl Target {
    pub fn reached(&self, loss: f64, accuracy: Option<f64>) -> bool {
        match *self {
            Target::Loss { threshold } => loss <= threshold,
            Target::Accuracy { threshold } => accuracy.is_some_and(|a| a >= threshold),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierRule {
    /// Drop points beyond 1.5 IQR from the quartiles.
    #[default]
    Iqr,
    None,
}

fn default_sweep() -> Vec<usize> {
    Vec::new()
}

fn default_replications() -> usize {
    1
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub prompt: PromptSection,
    #[serde(default)]
    pub dataset: Option<DatasetSection>,
    pub federation: FederationSection,
    pub oracle: OracleSpec,
    pub partition: PartitionSpec,
    #[serde(default = "default_sweep")]
    pub sweep: Vec<usize>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    pub target: Target,
    #[serde(default)]
    pub outlier_rule: OutlierRule,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    /// K* values to run: the sweep if given, else `federation.k_star`, else 1.
    pub fn sweep_values(&self) -> Vec<usize> {
        if !self.sweep.is_empty() {
            self.sweep.clone()
        } else {
            vec![self.federation.k_star.unwrap_or(1)]
        }
    }

    pub fn is_remote(&self) -> bool {
        matches!(self.oracle.kind, OracleKind::RemoteLlm(_))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.prompt;
        if p.length == 0 {
            return Err(ConfigError::invalid("prompt.length", "must be at least 1"));
        }
        if p.vocab_size < 2 {
            return Err(ConfigError::invalid("prompt.vocab_size", "must be at least 2"));
        }
        if !(p.tau > 0.0 && p.tau.is_finite()) {
            return Err(ConfigError::invalid("prompt.tau", "must be positive"));
        }
        if !(p.nu > 0.0 && p.nu.is_finite()) {
            return Err(ConfigError::invalid("prompt.nu", "must be positive"));
        }
        if p.nu > 1.0 / p.vocab_size as f64 {
            return Err(ConfigError::invalid(
                "prompt.nu",
                format!("floor {} exceeds the initial value 1/N = {}", p.nu, 1.0 / p.vocab_size as f64),
            ));
        }

        let f = &self.federation;
        if f.clients == 0 {
            return Err(ConfigError::invalid("federation.clients", "must be at least 1"));
        }
        if f.rounds == 0 {
            return Err(ConfigError::invalid("federation.rounds", "must be at least 1"));
        }
        if let Some(k) = f.k_star {
            if k == 0 || k > f.clients {
                return Err(ConfigError::invalid(
                    "federation.k_star",
                    format!("{k} outside 1..={}", f.clients),
                ));
            }
        }
        f.local
            .validate()
            .map_err(|e| ConfigError::invalid("federation.local", e.to_string()))?;
        if let Some(q) = &f.q {
            if q.len() != f.clients {
                return Err(ConfigError::invalid(
                    "federation.q",
                    format!("{} weights for {} clients", q.len(), f.clients),
                ));
            }
            let sum: f64 = q.iter().sum();
            if q.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(ConfigError::invalid("federation.q", "entries must be >= 0 and sum to 1"));
            }
        }
        for &k in &self.sweep {
            if k == 0 || k > f.clients {
                return Err(ConfigError::invalid(
                    "sweep",
                    format!("K* = {k} outside 1..={}", f.clients),
                ));
            }
        }
        if self.replications == 0 {
            return Err(ConfigError::invalid("replications", "must be at least 1"));
        }

        if !(self.oracle.clip > 0.0) {
            return Err(ConfigError::invalid("oracle.clip", "must be positive"));
        }
        if !(self.oracle.noise_std >= 0.0) {
            return Err(ConfigError::invalid("oracle.noise_std", "must be non-negative"));
        }

        match &self.partition {
            PartitionSpec::Even => {}
            PartitionSpec::Kshot { k } => {
                if *k == 0 {
                    return Err(ConfigError::invalid("partition.k", "must be at least 1"));
                }
            }
            PartitionSpec::Dirichlet { concentration } => {
                if !(*concentration > 0.0 && concentration.is_finite()) {
                    return Err(ConfigError::invalid("partition.concentration", "must be positive"));
                }
            }
        }

        match self.target {
            Target::Loss { threshold } if !threshold.is_finite() => {
                return Err(ConfigError::invalid("target.threshold", "must be finite"));
            }
            Target::Accuracy { threshold } if !(0.0..=1.0).contains(&threshold) => {
                return Err(ConfigError::invalid("target.threshold", "accuracy must lie in [0, 1]"));
            }
            _ => {}
        }

        match &self.oracle.kind {
            OracleKind::RemoteLlm(remote) => {
                if remote.vocabulary.len() != p.vocab_size {
                    return Err(ConfigError::invalid(
                        "oracle.vocabulary",
                        format!("{} entries but prompt.vocab_size = {}", remote.vocabulary.len(), p.vocab_size),
                    ));
                }
                if remote.label_tokens.len() < 2 {
                    return Err(ConfigError::invalid("oracle.label_tokens", "need at least two classes"));
                }
                if remote.examples.len() < f.clients {
                    return Err(ConfigError::invalid(
                        "oracle.examples",
                        format!("{} examples for {} clients", remote.examples.len(), f.clients),
                    ));
                }
                if matches!(self.target, Target::Accuracy { .. }) && remote.validation.is_empty() {
                    return Err(ConfigError::invalid("oracle.validation", "accuracy target needs validation examples"));
                }
            }
            _ => {
                let Some(d) = &self.dataset else {
                    return Err(ConfigError::invalid("dataset", "required for synthetic oracles"));
                };
                if d.num_classes == 0 || d.examples_per_class == 0 {
                    return Err(ConfigError::invalid("dataset", "needs at least one class and one example per class"));
                }
                if d.num_classes * d.examples_per_class < f.clients {
                    return Err(ConfigError::invalid(
                        "dataset",
                        format!("{} examples for {} clients", d.num_classes * d.examples_per_class, f.clients),
                    ));
                }
                if matches!(self.target, Target::Accuracy { .. }) {
                    return Err(ConfigError::invalid(
                        "target.metric",
                        "synthetic oracles only support a loss target",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Parses and validates a config string.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let raw: serde_json::Value = serde_json::from_str(text)?;
    if let Some(kind) = raw.pointer("/oracle/kind") {
        let known = kind.as_str().is_some_and(|k| ORACLE_KINDS.contains(&k));
        if !known {
            return Err(ConfigError::invalid(
                "oracle.kind",
                format!("unknown oracle kind {kind}, expected one of {}", ORACLE_KINDS.join(", ")),
            ));
        }
    }
    let cfg: ExperimentConfig = serde_json::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}
