//! Two-way deconfounder for off-policy evaluation under unmeasured confounding.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`env`]: seeded simulators (linear, dynamic process, tumor growth), their
//!   behavior and target policies, and ground-truth policy values.
//! - [`linfe`]: linear fixed-effects deconfounders under the unconstrained,
//!   one-way and two-way confounding assumptions.
//! - [`ntn`]: the neural-tensor-network latent confounder model with exact
//!   gradients and checkpoint I/O.
//! - [`train`]: minibatch Adam training, validation split, grid search.
//! - [`ope`]: model-based Monte Carlo policy-value estimation and metrics.
//! - [`ablate`]: ablation variants and one-way baselines.
//! - [`experiment`]: experiment specs, recipes and run manifests.

pub mod ablate;
pub mod env;
pub mod error;
pub mod experiment;
pub mod linfe;
pub mod ntn;
pub mod ope;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
