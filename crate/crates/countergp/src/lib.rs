//! Counterfactual multitask Gaussian processes and deep kernels.
//!
//! This crate implements exact GP regression with coregionalized kernels over
//! discrete actions and multiple outcomes, optionally composed with a small
//! feedforward feature extractor (a deep kernel), trained jointly by gradient
//! ascent on the log marginal likelihood. On top of the regression machinery
//! it provides causal estimands (individual effects, treatment-effect
//! contrasts, off-policy evaluation and learning, credible-band coverage,
//! policy risk) and seeded simulation environments with closed-form ground
//! truth so every estimator can be scored against an oracle.
//!
//! See the `book/` directory for a guided tour; the code snippets there are
//! compiled as doc-tests.

pub mod bench;
pub mod causal;
pub mod coregion;
pub mod data;
pub mod kernel;
pub mod linalg;
pub mod mlp;
pub mod model;
pub mod rng;
pub mod sim;

pub use coregion::TaskIndex;
pub use data::{Dataset, DatasetMeta};
pub use linalg::{cholesky, CholFactor, LinalgError, Matrix, SymMatrix};
pub use model::{fit, FitConfig, ModelVariant, PosteriorPrediction, TrainedModel};
