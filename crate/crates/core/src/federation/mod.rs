//! Client sampling, aggregation and the federated round loop.

mod data;
mod eval;

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{local_train, LocalTrainConfig};
use crate::gumbel::{project_alpha, PromptDistribution};
use crate::oracle::{ClientId, MeteredOracle, QueryLedger};

pub use data::{partition_dirichlet, partition_even, partition_kshot, ClientShard, Dataset};
pub use eval::{Evaluator, EVAL_CLIENT};

const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientWeighting {
    /// `q_k = M_k / Σ M`.
    #[default]
    ShardProportional,
    Uniform,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    #[default]
    WithReplacement,
    WithoutReplacement,
}

/// How the per-client random streams of one round are derived.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientSeeding {
    /// Every selected slot gets its own stream.
    #[default]
    Independent,
    /// All selected clients replay the same stream (common random numbers).
    Common,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub k_star: usize,
    pub rounds: usize,
    pub local: LocalTrainConfig,
    #[serde(default)]
    pub weighting: ClientWeighting,
    /// Explicit sampling weights; overrides `weighting` when present.
    #[serde(default)]
    pub q: Option<Vec<f64>>,
    #[serde(default)]
    pub sampling: SamplingMode,
    #[serde(default)]
    pub seeding: ClientSeeding,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub track_diversity: bool,
    #[serde(default)]
    pub track_accuracy: bool,
    /// Evaluate the global expected loss after every round.
    #[serde(default = "default_true")]
    pub track_loss: bool,
}

fn default_true() -> bool {
    true
}

impl FederationConfig {
    pub fn new(k_star: usize, rounds: usize, local: LocalTrainConfig, seed: u64) -> Self {
        FederationConfig {
            k_star,
            rounds,
            local,
            weighting: ClientWeighting::default(),
            q: None,
            sampling: SamplingMode::default(),
            seeding: ClientSeeding::default(),
            seed,
            track_diversity: false,
            track_accuracy: false,
            track_loss: true,
        }
    }

    pub fn validate(&self, num_clients: usize) -> Result<()> {
        self.local.validate()?;
        if num_clients == 0 {
            return Err(Error::config("no clients"));
        }
        if self.k_star == 0 || self.k_star > num_clients {
            return Err(Error::config(format!(
                "k_star must lie in 1..={num_clients}, got {}",
                self.k_star
            )));
        }
        if let Some(q) = &self.q {
            validate_weights(q)?;
            if q.len() != num_clients {
                return Err(Error::config(format!(
                    "q has {} entries for {num_clients} clients",
                    q.len()
                )));
            }
            if self.sampling == SamplingMode::WithoutReplacement
                && q.iter().filter(|&&w| w > 0.0).count() < self.k_star
            {
                return Err(Error::config("fewer clients with positive weight than k_star"));
            }
        }
        Ok(())
    }

    /// Sampling weights for the given shards.
    pub fn client_weights(&self, shards: &[ClientShard]) -> Result<Vec<f64>> {
        if let Some(q) = &self.q {
            return Ok(q.clone());
        }
        let k = shards.len();
        if k == 0 {
            return Err(Error::config("no clients"));
        }
        Ok(match self.weighting {
            ClientWeighting::Uniform => vec![1.0 / k as f64; k],
            ClientWeighting::ShardProportional => {
                let total: usize = shards.iter().map(|s| s.len()).sum();
                if total == 0 {
                    return Err(Error::config("all shards are empty"));
                }
                shards.iter().map(|s| s.len() as f64 / total as f64).collect()
            }
        })
    }
}

fn validate_weights(q: &[f64]) -> Result<()> {
    if q.is_empty() {
        return Err(Error::config("q is empty"));
    }
    if let Some(w) = q.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(Error::config(format!("q has invalid entry {w}")));
    }
    let sum: f64 = q.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
        return Err(Error::config(format!("q sums to {sum}, expected 1")));
    }
    Ok(())
}

fn draw_categorical<R: Rng + ?Sized>(q: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cdf = 0.0;
    let mut last_positive = 0;
    for (k, &w) in q.iter().enumerate() {
        if w > 0.0 {
            last_positive = k;
        }
        cdf += w;
        if u < cdf && w > 0.0 {
            return k;
        }
    }
    last_positive
}

/// `k_star` independent draws from `Categorical(q)`; duplicates allowed.
pub fn sample_clients<R: Rng + ?Sized>(q: &[f64], k_star: usize, rng: &mut R) -> Result<Vec<ClientId>> {
    validate_weights(q)?;
    Ok((0..k_star).map(|_| draw_categorical(q, rng)).collect())
}

/// Successive weighted draws without replacement, renormalizing after each.
pub fn sample_clients_without_replacement<R: Rng + ?Sized>(
    q: &[f64],
    k_star: usize,
    rng: &mut R,
) -> Result<Vec<ClientId>> {
    validate_weights(q)?;
    let positive = q.iter().filter(|&&w| w > 0.0).count();
    if k_star > positive {
        return Err(Error::config(format!(
            "cannot draw {k_star} distinct clients from {positive} with positive weight"
        )));
    }
    let mut w = q.to_vec();
    let mut out = Vec::with_capacity(k_star);
    for _ in 0..k_star {
        let total: f64 = w.iter().sum();
        let normalized: Vec<f64> = w.iter().map(|v| v / total).collect();
        let k = draw_categorical(&normalized, rng);
        out.push(k);
        w[k] = 0.0;
    }
    Ok(out)
}

/// Entrywise mean of the client parameters, projected back onto the floor.
pub fn aggregate(client_dists: &[PromptDistribution]) -> Result<PromptDistribution> {
    let first = client_dists
        .first()
        .ok_or_else(|| Error::config("aggregate needs at least one distribution"))?;
    let mut sum = Array2::<f64>::zeros(first.shape());
    for d in client_dists {
        if d.shape() != first.shape() {
            return Err(Error::dim(format!(
                "client shape {:?} differs from {:?}",
                d.shape(),
                first.shape()
            )));
        }
        sum += d.alpha();
    }
    sum /= client_dists.len() as f64;
    Ok(project_alpha(first.with_alpha(sum)?))
}

/// Weighted gradient diversity `Σ q_k‖g_k‖² / ‖Σ q_k g_k‖²`, computed for
/// every row (prompt position) and reported as the max over rows. Returns
/// `+inf` when an aggregate row vanishes while its local rows do not.
pub fn gradient_diversity(local_grads: &[Array2<f64>], q: &[f64]) -> Result<f64> {
    if local_grads.len() != q.len() {
        return Err(Error::dim(format!(
            "{} gradients for {} weights",
            local_grads.len(),
            q.len()
        )));
    }
    let Some(first) = local_grads.first() else {
        return Err(Error::config("gradient diversity needs at least one gradient"));
    };
    let shape = first.dim();
    if local_grads.iter().any(|g| g.dim() != shape) {
        return Err(Error::dim("local gradients differ in shape"));
    }
    let mut mean = Array2::<f64>::zeros(shape);
    for (g, &w) in local_grads.iter().zip(q) {
        mean.scaled_add(w, g);
    }
    let mut worst: Option<f64> = None;
    for i in 0..shape.0 {
        let num: f64 = local_grads
            .iter()
            .zip(q)
            .map(|(g, &w)| w * g.row(i).dot(&g.row(i)))
            .sum();
        if num == 0.0 {
            continue;
        }
        let den = mean.row(i).dot(&mean.row(i));
        let ratio = if den > 0.0 { num / den } else { f64::INFINITY };
        worst = Some(worst.map_or(ratio, |w: f64| w.max(ratio)));
    }
    Ok(worst.unwrap_or(f64::INFINITY))
}

/// Server-side state between rounds. Clones share the ledger.
#[derive(Debug, Clone)]
pub struct GlobalState {
    pub dist: PromptDistribution,
    pub round: usize,
    pub ledger: Arc<QueryLedger>,
}

impl GlobalState {
    pub fn new(dist: PromptDistribution, ledger: Arc<QueryLedger>) -> Self {
        GlobalState {
            dist,
            round: 0,
            ledger,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<ClientId>,
    /// Expected loss of the aggregated distribution on the evaluation data.
    pub global_loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub diversity: Option<f64>,
    pub round_queries: u64,
    pub cumulative_queries: u64,
}

/// One round: sample clients, train each from the server copy, aggregate.
/// On any error the caller's state is left untouched.
pub fn run_round<R: Rng + ?Sized>(
    state: &GlobalState,
    shards: &[ClientShard],
    oracle: &MeteredOracle,
    evaluator: &Evaluator,
    cfg: &FederationConfig,
    rng: &mut R,
) -> Result<(GlobalState, RoundRecord)> {
    cfg.validate(shards.len())?;
    let q = cfg.client_weights(shards)?;
    let selected = match cfg.sampling {
        SamplingMode::WithReplacement => sample_clients(&q, cfg.k_star, rng)?,
        SamplingMode::WithoutReplacement => sample_clients_without_replacement(&q, cfg.k_star, rng)?,
    };
    let metered = oracle.with_ledger(Arc::clone(&state.ledger));
    state.ledger.set_round(state.round);
    let before = state.ledger.total();

    let common_seed: u64 = rng.random();
    let mut locals = Vec::with_capacity(selected.len());
    for &k in &selected {
        let seed = match cfg.seeding {
            ClientSeeding::Independent => rng.random(),
            ClientSeeding::Common => common_seed,
        };
        let mut client_rng = ChaCha8Rng::seed_from_u64(seed);
        let shard = &shards[k];
        locals.push(local_train(
            &state.dist,
            &metered,
            shard.client_id,
            &shard.examples,
            &cfg.local,
            &mut client_rng,
        )?);
    }
    let dist = aggregate(&locals)?;

    let diversity = if cfg.track_diversity {
        let mut grads = Vec::with_capacity(shards.len());
        for s in shards {
            match evaluator.exact_gradient(&dist, &s.examples)? {
                Some(g) => grads.push(g),
                None => break,
            }
        }
        if grads.len() == shards.len() {
            Some(gradient_diversity(&grads, &q)?)
        } else {
            None
        }
    } else {
        None
    };
    let accuracy = if cfg.track_accuracy {
        evaluator.accuracy(&dist)?
    } else {
        None
    };
    let global_loss = if cfg.track_loss {
        Some(evaluator.expected_loss(&dist)?)
    } else {
        None
    };
    let cumulative = state.ledger.total();
    let record = RoundRecord {
        round: state.round,
        selected,
        global_loss,
        accuracy,
        diversity,
        round_queries: cumulative - before,
        cumulative_queries: cumulative,
    };
    let next = GlobalState {
        dist,
        round: state.round + 1,
        ledger: Arc::clone(&state.ledger),
    };
    Ok((next, record))
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub state: GlobalState,
    pub records: Vec<RoundRecord>,
    /// True when the stop predicate fired before the round budget ran out.
    pub stopped_early: bool,
}

/// Runs rounds from `state` until `stop` returns true for a record or
/// `cfg.rounds` is exhausted. Training queries land on `state.ledger`, which
/// the caller keeps even if a round fails.
pub fn run_until(
    cfg: &FederationConfig,
    state: GlobalState,
    shards: &[ClientShard],
    oracle: &MeteredOracle,
    evaluator: &Evaluator,
    mut stop: impl FnMut(&RoundRecord) -> bool,
) -> Result<TrainingOutcome> {
    cfg.validate(shards.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = state;
    let mut records = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let (next, record) = run_round(&state, shards, oracle, evaluator, cfg, &mut rng)?;
        state = next;
        let done = stop(&record);
        records.push(record);
        if done {
            return Ok(TrainingOutcome {
                state,
                records,
                stopped_early: true,
            });
        }
    }
    Ok(TrainingOutcome {
        state,
        records,
        stopped_early: false,
    })
}

/// All `cfg.rounds` rounds from `init` on a fresh ledger.
pub fn run_training(
    cfg: &FederationConfig,
    init: PromptDistribution,
    shards: &[ClientShard],
    oracle: &MeteredOracle,
    evaluator: &Evaluator,
) -> Result<TrainingOutcome> {
    let state = GlobalState::new(init, Arc::new(QueryLedger::new()));
    run_until(cfg, state, shards, oracle, evaluator, |_| false)
}
