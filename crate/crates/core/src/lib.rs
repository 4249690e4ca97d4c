//! Federated black-box discrete prompt learning with Gumbel-Softmax
//! relaxation, variance-reduced policy gradients and query accounting.

// `!(x > 0.0)` deliberately rejects NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimator;
pub mod federation;
pub mod gumbel;
pub mod oracle;
pub mod theory;

pub use error::{Error, Result};
pub use estimator::{local_step, local_train, mbsvrp_estimate, GradientEstimate, LocalTrainConfig, SampleBundle};
pub use gumbel::{forward, sample_gumbel, sample_prompt, GumbelNoise, ProbMatrix, PromptDistribution, PromptSequence};
pub use oracle::{LossOracle, MeteredOracle, OracleError, OracleSpec, QueryLedger};
