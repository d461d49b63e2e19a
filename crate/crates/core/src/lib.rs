//! Adaptive Bayesian characterization of a decohering qubit coupled to an
//! unknown mode.
//!
//! * [`physics`] — swap-spectroscopy outcome probabilities and batch sampling.
//! * [`inference`] — sequential Monte Carlo posterior over `(g, omega_r)`.
//! * [`policies`] — manual, random and click-counter machine policies.
//! * [`store`] — the CSV table of named machine policies.
//! * [`harness`] — episodes, ensembles and normalized error curves.
//! * [`pso`] — particle swarm training of new policies.
//! * [`presets`] — named ensemble studies (`fig2` … `fig5d`).
//!
//! Frequencies are in units of the mean prior coupling `mu_g0`, times in
//! units of its inverse.

// Validation is written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod inference;
pub mod par;
pub mod physics;
pub mod policies;
pub mod presets;
pub mod pso;
pub mod store;

pub use error::{Error, Result};
pub use harness::{run_ensemble, run_episode, EnsembleConfig, ErrorCurve, EpisodeTrace};
pub use inference::{ParticleCloud, PosteriorStats, PriorSpec, SmcConfig};
pub use par::Execution;
pub use physics::{HypothesisPoint, MeasurementSetting, TrueSystem};
pub use policies::{MachinePolicyParams, Policy, ShapedTimeDensity};
pub use store::{resolve_policy, PolicyStore};
