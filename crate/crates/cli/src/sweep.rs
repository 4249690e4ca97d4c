//! Seeded sweeps over K*: queries-to-target per (K*, replication).

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use fedone_core::federation::{
    partition_dirichlet, partition_even, partition_kshot, run_until, ClientShard, Dataset, Evaluator,
    FederationConfig, GlobalState,
};
use fedone_core::gumbel::PromptDistribution;
use fedone_core::oracle::{Example, LossOracle, MeteredOracle, OracleError, OracleKind, QueryLedger};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, PartitionSpec, Target};
use crate::summary::{summarize, GroupSummary};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

const DATA_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("experiment setup failed: {0}")]
    Setup(String),

    #[error("output error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Reached,
    BudgetExhausted,
    Failed,
}

/// One (K*, replication) run. Columns are fixed by field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub k_star: usize,
    pub replication: usize,
    pub seed: u64,
    pub status: RunStatus,
    pub rounds_to_target: Option<usize>,
    pub queries_to_target: Option<u64>,
    pub rounds_run: usize,
    pub final_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub training_queries: u64,
    pub eval_queries: u64,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

impl MetricsRow {
    /// Everything except wall time, which is the only non-replayable column.
    pub fn same_outcome(&self, other: &MetricsRow) -> bool {
        let mut a = self.clone();
        a.wall_time_s = other.wall_time_s;
        &a == other
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub outlier_rule: String,
    pub target: Target,
    pub budget_rounds: usize,
    pub replications: usize,
    pub groups: Vec<GroupSummary>,
    pub config: ExperimentConfig,
}

#[derive(Debug)]
pub struct SweepOutput {
    pub rows: Vec<MetricsRow>,
    pub summary: SweepSummary,
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
}

impl SweepOutput {
    pub fn failed_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.status == RunStatus::Failed).count()
    }
}

/// Deterministic seed for a sub-stream, mixed with splitmix64.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// Data, oracle and shards shared by every K* of one replication.
pub struct Replicate {
    pub oracle: Arc<dyn LossOracle>,
    pub shards: Vec<ClientShard>,
    pub eval_data: Vec<Example>,
}

fn setup_error(e: impl std::fmt::Display) -> SweepError {
    SweepError::Setup(e.to_string())
}

pub fn build_replicate(cfg: &ExperimentConfig, replication: usize) -> Result<Replicate, SweepError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[DATA_STREAM, replication as u64]));
    let (dataset, eval_data) = match &cfg.oracle.kind {
        OracleKind::RemoteLlm(remote) => {
            let classes = remote.label_tokens.len();
            let train: Vec<Example> = remote
                .examples
                .iter()
                .enumerate()
                .map(|(i, e)| Example {
                    input_id: i as u64,
                    label: e.label,
                })
                .collect();
            let offset = train.len() as u64;
            let validation: Vec<Example> = remote
                .validation
                .iter()
                .enumerate()
                .map(|(i, e)| Example {
                    input_id: offset + i as u64,
                    label: e.label,
                })
                .collect();
            if validation.iter().any(|e| e.label >= classes) {
                return Err(setup_error("validation label outside label_tokens"));
            }
            let eval = if validation.is_empty() { train.clone() } else { validation };
            (Dataset::new(train, classes).map_err(setup_error)?, eval)
        }
        _ => {
            let d = cfg
                .dataset
                .as_ref()
                .ok_or_else(|| setup_error("synthetic oracle without dataset"))?;
            let data = Dataset::synthetic(d.num_classes, d.examples_per_class).map_err(setup_error)?;
            let eval = data.examples().to_vec();
            (data, eval)
        }
    };
    let oracle = cfg
        .oracle
        .build(cfg.prompt.length, cfg.prompt.vocab_size, dataset.num_classes(), &mut rng)
        .map_err(setup_error)?;
    let k = cfg.federation.clients;
    let shards = match cfg.partition {
        PartitionSpec::Even => partition_even(&dataset, k, &mut rng),
        PartitionSpec::Kshot { k: shots } => partition_kshot(&dataset, k, shots, &mut rng),
        PartitionSpec::Dirichlet { concentration } => partition_dirichlet(&dataset, k, concentration, &mut rng),
    }
    .map_err(setup_error)?;
    Ok(Replicate {
        oracle,
        shards,
        eval_data,
    })
}

/// Trains one K* on one replication until the target or the budget.
pub fn run_one(cfg: &ExperimentConfig, rep: &Replicate, k_star: usize, replication: usize) -> Result<MetricsRow, SweepError> {
    let seed = derive_seed(cfg.seed, &[TRAIN_STREAM, k_star as u64, replication as u64]);
    let f = &cfg.federation;
    let mut fed = FederationConfig::new(k_star, f.rounds, f.local, seed);
    fed.weighting = f.weighting;
    fed.q = f.q.clone();
    fed.sampling = f.sampling;
    fed.track_diversity = f.track_diversity;
    fed.track_accuracy = matches!(cfg.target, Target::Accuracy { .. });
    fed.track_loss = matches!(cfg.target, Target::Loss { .. }) || !cfg.is_remote();

    let oracle = MeteredOracle::new(
        Arc::clone(&rep.oracle),
        cfg.oracle.clip,
        cfg.oracle.noise_std,
        Arc::new(QueryLedger::new()),
    )
    .map_err(setup_error)?;
    let mut evaluator = Evaluator::new(Arc::clone(&rep.oracle), cfg.oracle.clip, rep.eval_data.clone())
        .map_err(setup_error)?
        .with_mc_draws(256, seed);
    if cfg.is_remote() {
        evaluator = evaluator.with_enumeration_limit(0.0);
    }
    let init = PromptDistribution::uniform(cfg.prompt.length, cfg.prompt.vocab_size, cfg.prompt.tau, cfg.prompt.nu)
        .map_err(setup_error)?;
    let ledger = Arc::new(QueryLedger::new());
    let state = GlobalState::new(init, Arc::clone(&ledger));

    let target = cfg.target;
    let start = Instant::now();
    let result = run_until(&fed, state, &rep.shards, &oracle, &evaluator, |r| {
        target.reached(r.global_loss.unwrap_or(f64::INFINITY), r.accuracy)
    });
    let wall_time_s = start.elapsed().as_secs_f64();

    let row = match result {
        Ok(out) => {
            let last = out.records.last();
            MetricsRow {
                k_star,
                replication,
                seed,
                status: if out.stopped_early {
                    RunStatus::Reached
                } else {
                    RunStatus::BudgetExhausted
                },
                rounds_to_target: out.stopped_early.then_some(out.records.len()),
                queries_to_target: out.stopped_early.then(|| ledger.total()),
                rounds_run: out.records.len(),
                final_loss: last.and_then(|r| r.global_loss),
                final_accuracy: last.and_then(|r| r.accuracy),
                training_queries: ledger.total(),
                eval_queries: evaluator.ledger().total(),
                wall_time_s,
                error: None,
            }
        }
        Err(fedone_core::Error::Oracle(OracleError::Config(msg))) => {
            return Err(SweepError::Setup(msg));
        }
        Err(e) => MetricsRow {
            k_star,
            replication,
            seed,
            status: RunStatus::Failed,
            rounds_to_target: None,
            queries_to_target: None,
            rounds_run: ledger.snapshot().current_round,
            final_loss: None,
            final_accuracy: None,
            training_queries: ledger.total(),
            eval_queries: evaluator.ledger().total(),
            wall_time_s,
            error: Some(e.to_string()),
        },
    };
    Ok(row)
}

/// Runs every K* of the sweep for every replication, appending each row to
/// `metrics.csv` as soon as it finishes, then writes `summary.json`.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutput, SweepError> {
    run_sweep_with(cfg, |_| {})
}

/// As [`run_sweep`], calling `on_row` after each row is persisted.
pub fn run_sweep_with(cfg: &ExperimentConfig, mut on_row: impl FnMut(&MetricsRow)) -> Result<SweepOutput, SweepError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output)?;
    let metrics_path = cfg.output.join(METRICS_FILE);
    let summary_path = cfg.output.join(SUMMARY_FILE);
    let mut writer = csv::Writer::from_writer(File::create(&metrics_path)?);

    let sweep = cfg.sweep_values();
    let mut rows = Vec::with_capacity(sweep.len() * cfg.replications);
    for replication in 0..cfg.replications {
        let rep = build_replicate(cfg, replication)?;
        for &k_star in &sweep {
            let row = run_one(cfg, &rep, k_star, replication)?;
            writer.serialize(&row)?;
            writer.flush()?;
            on_row(&row);
            rows.push(row);
        }
    }
    drop(writer);

    let summary = SweepSummary {
        outlier_rule: match cfg.outlier_rule {
            crate::config::OutlierRule::Iqr => "iqr: drop points beyond 1.5 x IQR from the quartiles".into(),
            crate::config::OutlierRule::None => "none".into(),
        },
        target: cfg.target,
        budget_rounds: cfg.federation.rounds,
        replications: cfg.replications,
        groups: summarize(&rows, cfg.outlier_rule),
        config: cfg.clone(),
    };
    write_summary(&summary_path, &summary)?;
    Ok(SweepOutput {
        rows,
        summary,
        metrics_path,
        summary_path,
    })
}

fn write_summary(path: &Path, summary: &SweepSummary) -> Result<(), SweepError> {
    let file = File::create(path)?;
    serde_json::to_writer_pretty(file, summary)?;
    Ok(())
}

/// Reads rows back from a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, SweepError> {
    let mut reader = csv::Reader::from_path(path)?;
    let rows = reader.deserialize().collect::<Result<Vec<MetricsRow>, _>>()?;
    Ok(rows)
}
