//! Probabilistic forecasting of irregularly sampled multivariate time series
//! with a mixture of separable normalizing flows.
//!
//! The model predicts a joint distribution over an arbitrary set of
//! (time, channel) queries conditioned on an arbitrary set of
//! (time, channel, value) observations. Each mixture component transforms a
//! low-rank multivariate Gaussian through per-variable monotone rational
//! splines, so marginalizing any subset of the query is exact row selection
//! rather than integration. `audit` checks that property numerically against
//! adaptive quadrature.
//!
//! Layout:
//! - [`gradcore`]: dense f64 tensors, a define-by-run reverse-mode tape,
//!   Adam, and the checkpoint format.
//! - [`series`]: instances, JSONL storage, toy generators, splits, batching.
//! - [`encoder`]: positional embedding, token building, attention encoder.
//! - [`lowrank`]: identity-plus-low-rank Gaussian base distributions.
//! - [`lrs`]: monotone linear rational splines and their separable transform.
//! - [`model`]: the mixture model itself (density, marginals, sampling, loss).
//! - [`variants`]: ablation flags (no flows, identity covariance, ...).
//! - [`train`]: negative joint log-likelihood training loop and grid search.
//! - [`metrics`]: Wasserstein distance, marginal-inconsistency, NLLs, CRPS.
//! - [`audit`]: quadrature-based marginalization-consistency checks.
//! - [`quadrature`]: adaptive Simpson integration in one and two dimensions.

pub mod audit;
pub mod encoder;
pub mod error;
pub mod gradcore;
pub mod lowrank;
pub mod lrs;
pub mod metrics;
pub mod model;
pub mod quadrature;
pub mod series;
pub mod train;
pub mod variants;

pub use error::{Error, Result};
