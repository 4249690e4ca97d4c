//! Closed-form smoothness, variance, convergence and query-cost quantities.
//!
//! Symbols: `G` loss bound, `N` vocabulary size, `n` prompt length, `τ`
//! temperature, `ν` alpha floor, `E` local epochs, `σ_ψ²` data-gradient
//! variance, `λ` gradient-diversity bound, `ε` target accuracy, `c` queries
//! per iteration per client, `B` batch size, `I` prompt samples, `η` step
//! size, `K*` activated clients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub loss_bound: f64,
    pub vocab_size: f64,
    pub prompt_len: f64,
    pub tau: f64,
    pub nu: f64,
    pub epochs: f64,
    pub sigma_psi_sq: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub queries_per_iteration: f64,
    pub batch_size: f64,
    pub prompt_samples: f64,
    pub learning_rate: f64,
    pub k_star: f64,
    /// Measured policy-gradient variance; replaces `8G²N/(τ²ν²)` when set.
    #[serde(default)]
    pub sigma_alpha_sq_override: Option<f64>,
}

impl Default for TheoryParams {
    fn default() -> Self {
        TheoryParams {
            loss_bound: 1.0,
            vocab_size: 1.0,
            prompt_len: 1.0,
            tau: 1.0,
            nu: 1.0,
            epochs: 1.0,
            sigma_psi_sq: 1.0,
            lambda: 1.0,
            epsilon: 1.0,
            queries_per_iteration: 1.0,
            batch_size: 1.0,
            prompt_samples: 1.0,
            learning_rate: 1e-3,
            k_star: 1.0,
            sigma_alpha_sq_override: None,
        }
    }
}

impl TheoryParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("loss_bound", self.loss_bound),
            ("vocab_size", self.vocab_size),
            ("prompt_len", self.prompt_len),
            ("tau", self.tau),
            ("nu", self.nu),
            ("epochs", self.epochs),
            ("sigma_psi_sq", self.sigma_psi_sq),
            ("lambda", self.lambda),
            ("epsilon", self.epsilon),
            ("queries_per_iteration", self.queries_per_iteration),
            ("batch_size", self.batch_size),
            ("prompt_samples", self.prompt_samples),
            ("learning_rate", self.learning_rate),
            ("k_star", self.k_star),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be strictly positive, got {v}")));
            }
        }
        if let Some(s) = self.sigma_alpha_sq_override {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::config(format!("sigma_alpha_sq_override must be non-negative, got {s}")));
            }
        }
        Ok(())
    }

    /// The policy-gradient variance used in the bounds.
    pub fn effective_sigma_alpha_sq(&self) -> f64 {
        self.sigma_alpha_sq_override
            .unwrap_or_else(|| sigma_alpha_sq(self))
    }
}

/// `L = nGN(τ+1)/(τ²ν²)`.
pub fn smoothness_l(p: &TheoryParams) -> f64 {
    p.prompt_len * p.loss_bound * p.vocab_size * (p.tau + 1.0) / (p.tau * p.tau * p.nu * p.nu)
}

/// `σ_α² = 8G²N/(τ²ν²)`.
pub fn sigma_alpha_sq(p: &TheoryParams) -> f64 {
    8.0 * p.loss_bound * p.loss_bound * p.vocab_size / (p.tau * p.tau * p.nu * p.nu)
}

/// Which form of the averaged squared-gradient bound to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundForm {
    /// Published form, with `Lη ≤ 1` used to drop the step-size factors.
    #[default]
    Simplified,
    /// The same bound before that simplification, keeping `Lη` and `L²η²`.
    Tight,
    /// Single-client training: `4G/(Tη) + 2ηnLσ_ψ²/B + 2ηnLσ_α²/I²`.
    SingleClient,
}

/// Upper bound on `(1/T) Σ_t ‖∇F(α_t)‖²` after `iterations` steps.
///
/// Requires `η < min{1/(Lλ), 1/L}` (`η ≤ 1/L` for the single-client form).
pub fn convergence_bound(p: &TheoryParams, iterations: f64) -> Result<f64> {
    convergence_bound_with(p, iterations, BoundForm::Simplified)
}

pub fn convergence_bound_with(p: &TheoryParams, iterations: f64, form: BoundForm) -> Result<f64> {
    p.validate()?;
    if !(iterations > 0.0) {
        return Err(Error::config("iteration count must be positive"));
    }
    let l = smoothness_l(p);
    let eta = p.learning_rate;
    match form {
        BoundForm::SingleClient => {
            if eta > 1.0 / l {
                return Err(Error::BoundInapplicable(format!(
                    "learning rate {eta} exceeds 1/L = {}",
                    1.0 / l
                )));
            }
        }
        _ => {
            let limit = (1.0 / (l * p.lambda)).min(1.0 / l);
            if eta >= limit {
                return Err(Error::BoundInapplicable(format!(
                    "learning rate {eta} is not below min(1/(L lambda), 1/L) = {limit}"
                )));
            }
        }
    }

    let n = p.prompt_len;
    let e = p.epochs;
    let s_psi = p.sigma_psi_sq;
    let s_alpha = p.effective_sigma_alpha_sq();
    let participation = 1.0 + 1.0 / p.k_star;
    let first = 4.0 * p.loss_bound / (eta * iterations);
    let i_sq = p.prompt_samples * p.prompt_samples;

    let value = match form {
        BoundForm::Simplified => {
            first
                + (2.0 * (e + 1.0) * n * s_psi * participation + 2.0 * n * s_psi) / p.batch_size
                + (2.0 * (e + 1.0) * n * s_alpha * participation + 2.0 * n * s_alpha) / i_sq
        }
        BoundForm::Tight => {
            let l2e2 = l * l * eta * eta;
            let le = l * eta;
            first
                + (2.0 * (e + 1.0) * l2e2 * n * s_psi * participation + 2.0 * n * le * s_psi)
                    / p.batch_size
                + (2.0 * (e + 1.0) * l2e2 * n * s_alpha * participation + 2.0 * n * le * s_alpha) / i_sq
        }
        BoundForm::SingleClient => {
            first + 2.0 * eta * n * l * s_psi / p.batch_size + 2.0 * eta * n * l * s_alpha / i_sq
        }
    };
    Ok(value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryCostBreakdown {
    pub c1: f64,
    pub c2: f64,
    /// Continuous minimizer `c2 / c1` of the query cost.
    pub k_opt: f64,
    /// `c (c1 √K* + c2/√K*)²`.
    pub queries: f64,
}

impl QueryCostBreakdown {
    pub fn queries_ceil(&self) -> u64 {
        self.queries.ceil() as u64
    }
}

/// Query cost to an ε-solution as a function of the activated-client count.
pub fn query_cost(p: &TheoryParams, k_star: f64) -> QueryCostBreakdown {
    let eps_sq = p.epsilon * p.epsilon;
    let n = p.prompt_len;
    let e = p.epochs;
    let s_psi = p.sigma_psi_sq;
    let s_alpha = p.effective_sigma_alpha_sq();
    let c1 = (4.0 * p.loss_bound + 2.0 * (e + 2.0) * n * s_psi + 2.0 * (e + 2.0) * n * s_alpha) / eps_sq;
    let c2 = (2.0 * (e + 1.0) * n * s_psi + 2.0 * (e + 1.0) * n * s_alpha) / eps_sq;
    // expanded square, free of rounding from the square roots
    let squared = c1 * c1 * k_star + 2.0 * c1 * c2 + c2 * c2 / k_star;
    QueryCostBreakdown {
        c1,
        c2,
        k_opt: c2 / c1,
        queries: p.queries_per_iteration * squared,
    }
}

/// Minimum iteration count `T_ε` at the params' `K*`.
pub fn min_iterations(p: &TheoryParams) -> f64 {
    let eps_sq = p.epsilon * p.epsilon;
    let n = p.prompt_len;
    let e = p.epochs;
    let s_psi = p.sigma_psi_sq;
    let s_alpha = p.effective_sigma_alpha_sq();
    let participation = 1.0 + 1.0 / p.k_star;
    let bracket = 4.0 * p.loss_bound / eps_sq
        + (2.0 * (e + 1.0) * n * s_psi * participation + 2.0 * n * s_psi) / eps_sq
        + (2.0 * (e + 1.0) * n * s_alpha * participation + 2.0 * n * s_alpha) / eps_sq;
    bracket * bracket
}

pub fn min_iterations_ceil(p: &TheoryParams) -> u64 {
    min_iterations(p).ceil() as u64
}
