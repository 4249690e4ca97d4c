//! Metered-off diagnostics: global expected loss, exact gradients and
//! accuracy of the current server distribution.

use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::estimator::{for_each_prompt, ENUMERATION_LIMIT};
use crate::gumbel::{forward, sample_prompt, GumbelNoise, PromptDistribution, ProbMatrix};
use crate::oracle::{Batch, Example, LossOracle, MeteredOracle, OracleError, QueryLedger};

/// Client id used for evaluation queries on the evaluation ledger.
pub const EVAL_CLIENT: usize = usize::MAX;

const DEFAULT_MC_DRAWS: usize = 256;

/// Evaluates the server distribution at zero Gumbel noise, i.e. under
/// `p_ij ∝ α_ij^{1/τ}`. All oracle calls go to a private ledger so the
/// training ledger only ever sees training queries.
#[derive(Debug, Clone)]
pub struct Evaluator {
    oracle: MeteredOracle,
    data: Batch,
    mc_draws: usize,
    seed: u64,
    enumeration_limit: f64,
}

impl Evaluator {
    pub fn new(inner: Arc<dyn LossOracle>, clip: f64, data: Vec<Example>) -> Result<Self> {
        let oracle = MeteredOracle::new(inner, clip, 0.0, Arc::new(QueryLedger::new()))?;
        let data = Batch::new(data)?;
        Ok(Evaluator {
            oracle,
            data,
            mc_draws: DEFAULT_MC_DRAWS,
            seed: 0,
            enumeration_limit: ENUMERATION_LIMIT,
        })
    }

    /// Number of prompts drawn when neither the closed form nor enumeration
    /// is available.
    pub fn with_mc_draws(mut self, draws: usize, seed: u64) -> Self {
        self.mc_draws = draws.max(1);
        self.seed = seed;
        self
    }

    /// Largest prompt space evaluated exactly; above it Monte Carlo is used.
    /// Set to 0 for oracles where every query is costly.
    pub fn with_enumeration_limit(mut self, limit: f64) -> Self {
        self.enumeration_limit = limit.min(ENUMERATION_LIMIT);
        self
    }

    pub fn ledger(&self) -> &Arc<QueryLedger> {
        self.oracle.ledger()
    }

    pub fn data(&self) -> &Batch {
        &self.data
    }

    pub fn probabilities(dist: &PromptDistribution) -> Result<ProbMatrix> {
        let (n, vocab) = dist.shape();
        forward(dist, &GumbelNoise::zeros(n, vocab))
    }

    pub fn expected_loss(&self, dist: &PromptDistribution) -> Result<f64> {
        self.expected_loss_on(dist, &self.data)
    }

    pub fn expected_loss_on(&self, dist: &PromptDistribution, batch: &Batch) -> Result<f64> {
        let p = Self::probabilities(dist)?;
        if let Some(costs) = self.oracle.inner().separable_costs(batch) {
            return Ok(costs.expected_loss(&p));
        }
        let (n, vocab) = dist.shape();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        if (vocab as f64).powi(n as i32) <= self.enumeration_limit {
            let mut total = 0.0;
            let mut failure: Option<OracleError> = None;
            for_each_prompt(n, vocab, |prompt| {
                if failure.is_some() {
                    return;
                }
                let weight = p.sequence_prob(prompt);
                if weight == 0.0 {
                    return;
                }
                match self.oracle.evaluate(EVAL_CLIENT, prompt, batch, &mut rng) {
                    Ok(l) => total += weight * l.value(),
                    Err(e) => failure = Some(e),
                }
            })?;
            return match failure {
                Some(e) => Err(e.into()),
                None => Ok(total),
            };
        }
        let mut total = 0.0;
        for _ in 0..self.mc_draws {
            let prompt = sample_prompt(&p, &mut rng);
            total += self.oracle.evaluate(EVAL_CLIENT, &prompt, batch, &mut rng)?.value();
        }
        Ok(total / self.mc_draws as f64)
    }

    /// Exact gradient of the expected loss on `examples`, available only
    /// for oracles with a separable closed form.
    pub fn exact_gradient(&self, dist: &PromptDistribution, examples: &[Example]) -> Result<Option<Array2<f64>>> {
        let batch = Batch::new(examples.to_vec())?;
        let Some(costs) = self.oracle.inner().separable_costs(&batch) else {
            return Ok(None);
        };
        let p = Self::probabilities(dist)?;
        Ok(Some(costs.expected_loss_grad(&p, dist)))
    }

    /// Fraction of evaluation examples whose highest-scoring class under the
    /// mode prompt is the true label. `None` if the oracle is not a
    /// classifier.
    pub fn accuracy(&self, dist: &PromptDistribution) -> Result<Option<f64>> {
        let prompt = dist.mode();
        let examples = self.data.examples();
        let mut correct = 0usize;
        for e in examples {
            let Some(scores) = self.oracle.inner().class_log_probs(&prompt, e) else {
                return Ok(None);
            };
            self.oracle.ledger().record(EVAL_CLIENT);
            let scores = scores?;
            let best = crate::gumbel::argmax(ndarray::ArrayView1::from(scores.as_slice()));
            if best == e.label {
                correct += 1;
            }
        }
        Ok(Some(correct as f64 / examples.len() as f64))
    }
}

