//! Gumbel-Softmax categorical distributions over discrete prompt tokens.
//!
//! A [`PromptDistribution`] holds one strictly positive parameter row per
//! prompt position. Perturbing the log-parameters with Gumbel noise and
//! applying a temperature softmax yields a [`ProbMatrix`]; prompts are then
//! drawn position by position from its rows.

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learnable prompt parameters with temperature and positivity floor.
///
/// Every entry of `alpha` stays at or above `nu`; constructors and
/// [`project_alpha`] enforce this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptDistribution {
    alpha: Array2<f64>,
    tau: f64,
    nu: f64,
}

impl PromptDistribution {
    /// Builds a distribution from explicit parameters, clamping entries
    /// below the floor.
    pub fn new(alpha: Array2<f64>, tau: f64, nu: f64) -> Result<Self> {
        let (n, vocab) = alpha.dim();
        if n < 1 {
            return Err(Error::config("prompt length must be at least 1"));
        }
        if vocab < 2 {
            return Err(Error::config("vocabulary size must be at least 2"));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::config(format!("temperature must be positive, got {tau}")));
        }
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::config(format!("alpha floor must be positive, got {nu}")));
        }
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::config("alpha contains non-finite entries"));
        }
        Ok(project_alpha(PromptDistribution { alpha, tau, nu }))
    }

    /// Uniform start: every entry is `1/N`, lifted to `nu` if the floor is higher.
    pub fn uniform(n: usize, vocab: usize, tau: f64, nu: f64) -> Result<Self> {
        let init = 1.0 / vocab.max(1) as f64;
        Self::new(Array2::from_elem((n, vocab), init), tau, nu)
    }

    pub fn alpha(&self) -> &Array2<f64> {
        &self.alpha
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// Number of prompt positions.
    pub fn prompt_len(&self) -> usize {
        self.alpha.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.alpha.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.alpha.dim()
    }

    /// Replaces the parameter matrix and re-projects onto the floor.
    pub fn with_alpha(&self, alpha: Array2<f64>) -> Result<Self> {
        if alpha.dim() != self.alpha.dim() {
            return Err(Error::dim(format!(
                "alpha shape {:?} does not match {:?}",
                alpha.dim(),
                self.alpha.dim()
            )));
        }
        Ok(project_alpha(PromptDistribution {
            alpha,
            tau: self.tau,
            nu: self.nu,
        }))
    }

    /// Raw parameter write without projection; callers must re-project.
    pub(crate) fn alpha_mut(&mut self) -> &mut Array2<f64> {
        &mut self.alpha
    }

    /// Most likely prompt under zero noise (row-wise argmax of alpha).
    pub fn mode(&self) -> PromptSequence {
        let indices = self
            .alpha
            .axis_iter(Axis(0))
            .map(|row| argmax(row))
            .collect();
        PromptSequence { indices }
    }
}

/// Matrix of i.i.d. standard Gumbel draws.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelNoise {
    g: Array2<f64>,
}

impl GumbelNoise {
    pub fn zeros(n: usize, vocab: usize) -> Self {
        GumbelNoise {
            g: Array2::zeros((n, vocab)),
        }
    }

    pub fn from_matrix(g: Array2<f64>) -> Result<Self> {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("gumbel noise must be finite"));
        }
        Ok(GumbelNoise { g })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.g
    }

    pub fn shape(&self) -> (usize, usize) {
        self.g.dim()
    }
}

/// Standard Gumbel quantile `-ln(-ln u)` for `u` in the open unit interval.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Uniform draw from the open interval (0, 1).
pub(crate) fn open_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

pub fn sample_gumbel<R: Rng + ?Sized>(n: usize, vocab: usize, rng: &mut R) -> GumbelNoise {
    let g = Array2::from_shape_simple_fn((n, vocab), || gumbel_from_uniform(open_uniform(rng)));
    GumbelNoise { g }
}

/// Row-stochastic matrix; row `i` is the categorical distribution of position `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    p: Array2<f64>,
}

impl ProbMatrix {
    /// Wraps an externally supplied matrix. Rows must be non-negative and sum
    /// to one within `1e-9`.
    pub fn from_rows(p: Array2<f64>) -> Result<Self> {
        for (i, row) in p.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::config(format!("row {i} has negative or non-finite entries")));
            }
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!("row {i} sums to {s}, expected 1")));
            }
        }
        Ok(ProbMatrix { p })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.p
    }

    pub fn shape(&self) -> (usize, usize) {
        self.p.dim()
    }

    pub fn prob(&self, position: usize, token: usize) -> f64 {
        self.p[[position, token]]
    }

    /// Probability of a whole prompt under independent positions.
    pub fn sequence_prob(&self, prompt: &PromptSequence) -> f64 {
        prompt
            .indices
            .iter()
            .enumerate()
            .map(|(i, &j)| self.p[[i, j]])
            .product()
    }
}

/// Gumbel-Softmax forward map: `p_ij ∝ exp((ln α_ij + g_ij) / τ)`, with
/// per-row max subtraction.
pub fn forward(dist: &PromptDistribution, noise: &GumbelNoise) -> Result<ProbMatrix> {
    if dist.shape() != noise.shape() {
        return Err(Error::dim(format!(
            "noise shape {:?} does not match distribution shape {:?}",
            noise.shape(),
            dist.shape()
        )));
    }
    let inv_tau = 1.0 / dist.tau;
    let mut p = Array2::zeros(dist.shape());
    for ((mut out, a), g) in p
        .axis_iter_mut(Axis(0))
        .zip(dist.alpha.axis_iter(Axis(0)))
        .zip(noise.g.axis_iter(Axis(0)))
    {
        let logits: Vec<f64> = a
            .iter()
            .zip(g.iter())
            .map(|(a, g)| (a.ln() + g) * inv_tau)
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, l) in out.iter_mut().zip(&logits) {
            *o = (l - max).exp();
            total += *o;
        }
        out.mapv_inplace(|v| v / total);
    }
    Ok(ProbMatrix { p })
}

/// A prompt: one vocabulary index per position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSequence {
    indices: Vec<usize>,
}

impl PromptSequence {
    pub fn new(indices: Vec<usize>, vocab: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::config("prompt must have at least one position"));
        }
        if let Some(bad) = indices.iter().find(|&&j| j >= vocab) {
            return Err(Error::dim(format!("token index {bad} outside vocabulary of size {vocab}")));
        }
        Ok(PromptSequence { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Number of positions where the two prompts differ.
    pub fn hamming(&self, other: &PromptSequence) -> Result<usize> {
        if self.len() != other.len() {
            return Err(Error::dim(format!(
                "prompt lengths differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(self
            .indices
            .iter()
            .zip(&other.indices)
            .filter(|(a, b)| a != b)
            .count())
    }
}

/// Inverse-CDF draw per row. The scan picks the first column whose
/// cumulative mass is strictly greater than the uniform draw; rounding
/// residue falls to the last column.
pub fn sample_prompt<R: Rng + ?Sized>(p: &ProbMatrix, rng: &mut R) -> PromptSequence {
    let indices = p
        .p
        .axis_iter(Axis(0))
        .map(|row| {
            let u: f64 = rng.random();
            inverse_cdf(row, u)
        })
        .collect();
    PromptSequence { indices }
}

fn inverse_cdf(row: ArrayView1<f64>, u: f64) -> usize {
    let mut cdf = 0.0;
    for (j, &pj) in row.iter().enumerate() {
        cdf += pj;
        if u < cdf {
            return j;
        }
    }
    row.len() - 1
}

/// Gradient of `ln p[i][j_i]` with respect to every `α[i][·]`, noise held
/// fixed. Row `i` is `(1 - p_ij)/(τ α_ij)` at the selected column and
/// `-p_ij/(τ α_ij)` elsewhere.
pub fn log_prob_grad(
    p: &ProbMatrix,
    dist: &PromptDistribution,
    prompt: &PromptSequence,
) -> Array2<f64> {
    let mut grad = Array2::zeros(p.shape());
    log_prob_grad_into(p, dist, prompt, 1.0, &mut grad);
    grad
}

/// Accumulates `scale * log_prob_grad(..)` into `out`.
pub(crate) fn log_prob_grad_into(
    p: &ProbMatrix,
    dist: &PromptDistribution,
    prompt: &PromptSequence,
    scale: f64,
    out: &mut Array2<f64>,
) {
    let tau = dist.tau;
    for (i, &sel) in prompt.indices.iter().enumerate() {
        for j in 0..p.p.ncols() {
            let pij = p.p[[i, j]];
            let a = dist.alpha[[i, j]];
            let g = if j == sel { (1.0 - pij) / (tau * a) } else { -pij / (tau * a) };
            out[[i, j]] += scale * g;
        }
    }
}

/// Clamps every parameter to at least the floor `nu`.
pub fn project_alpha(mut dist: PromptDistribution) -> PromptDistribution {
    let nu = dist.nu;
    dist.alpha.mapv_inplace(|a| if a < nu || a.is_nan() { nu } else { a });
    dist
}

pub(crate) fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}
