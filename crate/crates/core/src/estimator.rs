//! Variance-reduced policy-gradient training of a prompt distribution.
//!
//! A local step draws one Gumbel noise matrix, samples `I` prompts from the
//! resulting probabilities, spends `I` oracle queries on the current
//! mini-batch, and moves alpha against the mean-baselined score-function
//! estimate before projecting back onto the floor.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gumbel::{
    forward, log_prob_grad_into, sample_gumbel, sample_prompt, GumbelNoise, ProbMatrix,
    PromptDistribution, PromptSequence,
};
use crate::oracle::{Batch, ClientId, Example, MeteredOracle};

/// Largest number of prompt sequences the exact routines will enumerate.
pub const ENUMERATION_LIMIT: f64 = 1e6;

fn default_epochs() -> usize {
    1
}
fn default_prompt_samples() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_prompt_samples")]
    pub prompt_samples: usize,
    pub learning_rate: f64,
}

impl LocalTrainConfig {
    pub fn new(epochs: usize, batch_size: usize, prompt_samples: usize, learning_rate: f64) -> Result<Self> {
        let cfg = LocalTrainConfig {
            epochs,
            batch_size,
            prompt_samples,
            learning_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.prompt_samples < 2 {
            return Err(Error::config("prompt_samples must be at least 2"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be a finite non-negative number"));
        }
        Ok(())
    }

    /// Queries one call to [`local_train`] spends on a shard of `shard_size`.
    pub fn queries_per_client(&self, shard_size: usize) -> u64 {
        (self.epochs * shard_size.div_ceil(self.batch_size) * self.prompt_samples) as u64
    }
}

/// Prompts sampled for one estimate and their (clipped) losses.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBundle {
    prompts: Vec<PromptSequence>,
    losses: Vec<f64>,
}

impl SampleBundle {
    pub fn new(prompts: Vec<PromptSequence>, losses: Vec<f64>) -> Result<Self> {
        if prompts.len() != losses.len() {
            return Err(Error::dim(format!(
                "{} prompts but {} losses",
                prompts.len(),
                losses.len()
            )));
        }
        Ok(SampleBundle { prompts, losses })
    }

    pub fn prompts(&self) -> &[PromptSequence] {
        &self.prompts
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate(pub Array2<f64>);

impl GradientEstimate {
    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}

/// `(1/(I-1)) Σ_r (ℓ_r - ℓ_avg) ∇ log P(Φ_r)` over the bundle.
pub fn mbsvrp_estimate(
    bundle: &SampleBundle,
    p: &ProbMatrix,
    dist: &PromptDistribution,
) -> Result<GradientEstimate> {
    let samples = bundle.len();
    if samples < 2 {
        return Err(Error::config(format!(
            "variance-reduced estimate needs at least 2 samples, got {samples}"
        )));
    }
    if p.shape() != dist.shape() {
        return Err(Error::dim("probability and parameter shapes differ"));
    }
    // shifting by the first loss keeps equal losses exactly equal to the mean
    let base = bundle.losses[0];
    let mean = base + bundle.losses.iter().map(|l| l - base).sum::<f64>() / samples as f64;
    let scale = 1.0 / (samples - 1) as f64;
    let mut grad = Array2::zeros(dist.shape());
    for (prompt, &loss) in bundle.prompts.iter().zip(&bundle.losses) {
        if prompt.len() != dist.prompt_len() || prompt.indices().iter().any(|&j| j >= dist.vocab_size()) {
            return Err(Error::dim("sampled prompt does not fit the distribution"));
        }
        let w = (loss - mean) * scale;
        if w != 0.0 {
            log_prob_grad_into(p, dist, prompt, w, &mut grad);
        }
    }
    Ok(GradientEstimate(grad))
}

fn enumeration_size(n: usize, vocab: usize) -> f64 {
    (vocab as f64).powi(n as i32)
}

/// Calls `f` on every prompt of length `n` over `vocab` tokens, in
/// lexicographic order with the last position varying fastest.
pub fn for_each_prompt(n: usize, vocab: usize, mut f: impl FnMut(&PromptSequence)) -> Result<()> {
    let size = enumeration_size(n, vocab);
    if size > ENUMERATION_LIMIT {
        return Err(Error::Capacity {
            size,
            limit: ENUMERATION_LIMIT,
        });
    }
    let mut idx = vec![0usize; n];
    loop {
        let prompt = PromptSequence::new(idx.clone(), vocab)?;
        f(&prompt);
        let mut pos = n;
        loop {
            if pos == 0 {
                return Ok(());
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < vocab {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// Exact `∇_α E_{Φ~p}[loss(Φ)]` with the noise held fixed, summed term by
/// term as `Σ_Φ loss(Φ) P(Φ) ∇ log P(Φ)`.
pub fn exact_policy_gradient(
    dist: &PromptDistribution,
    noise: &GumbelNoise,
    loss_fn: impl Fn(&PromptSequence) -> f64,
) -> Result<GradientEstimate> {
    let p = forward(dist, noise)?;
    let (n, vocab) = dist.shape();
    let mut grad = Array2::zeros((n, vocab));
    for_each_prompt(n, vocab, |prompt| {
        let weight = loss_fn(prompt) * p.sequence_prob(prompt);
        if weight != 0.0 {
            log_prob_grad_into(&p, dist, prompt, weight, &mut grad);
        }
    })?;
    Ok(GradientEstimate(grad))
}

/// Exact `E_{Φ~p}[loss(Φ)]` by enumeration, noise held fixed.
pub fn exact_expected_loss(
    dist: &PromptDistribution,
    noise: &GumbelNoise,
    loss_fn: impl Fn(&PromptSequence) -> f64,
) -> Result<f64> {
    let p = forward(dist, noise)?;
    let (n, vocab) = dist.shape();
    let mut total = 0.0;
    for_each_prompt(n, vocab, |prompt| total += loss_fn(prompt) * p.sequence_prob(prompt))?;
    Ok(total)
}

/// One update: fresh noise, `I` sampled prompts, `I` queries, one step.
pub fn local_step<R: Rng + ?Sized>(
    dist: &PromptDistribution,
    oracle: &MeteredOracle,
    client: ClientId,
    batch: &Batch,
    cfg: &LocalTrainConfig,
    rng: &mut R,
) -> Result<PromptDistribution> {
    cfg.validate()?;
    let (n, vocab) = dist.shape();
    let noise = sample_gumbel(n, vocab, rng);
    let p = forward(dist, &noise)?;
    let mut prompts = Vec::with_capacity(cfg.prompt_samples);
    let mut losses = Vec::with_capacity(cfg.prompt_samples);
    for _ in 0..cfg.prompt_samples {
        let prompt = sample_prompt(&p, rng);
        losses.push(oracle.evaluate(client, &prompt, batch, rng)?.value());
        prompts.push(prompt);
    }
    let grad = mbsvrp_estimate(&SampleBundle { prompts, losses }, &p, dist)?;
    let mut next = dist.clone();
    next.alpha_mut().scaled_add(-cfg.learning_rate, grad.values());
    Ok(crate::gumbel::project_alpha(next))
}

/// `E` epochs over the shard in mini-batches of `B`; the trailing partial
/// batch is kept. The shard is reshuffled at the start of every epoch.
pub fn local_train<R: Rng + ?Sized>(
    dist: &PromptDistribution,
    oracle: &MeteredOracle,
    client: ClientId,
    data: &[Example],
    cfg: &LocalTrainConfig,
    rng: &mut R,
) -> Result<PromptDistribution> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config(format!("client {client} has an empty dataset")));
    }
    let mut current = dist.clone();
    let mut order: Vec<Example> = data.to_vec();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::new(chunk.to_vec()).map_err(Error::Oracle)?;
            current = local_step(&current, oracle, client, &batch, cfg, rng)?;
        }
    }
    Ok(current)
}
