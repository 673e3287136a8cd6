//! Tabular multivariate distributional reinforcement learning in the
//! geometry of the energy-distance MMD.
//!
//! * [`kernels`]: semimetric `‖·‖^α`, induced kernel, MMD.
//! * [`measures`]: finite signed measures, return-distribution functions,
//!   support maps.
//! * [`mdp`]: tabular policy-conditioned MDPs and their transition stream.
//! * [`projections`]: MMD projections onto simplex and signed categorical
//!   representations.
//! * [`dp`]: exact, projected categorical and randomized particle dynamic
//!   programming.
//! * [`td`]: signed categorical TD and particle (EWP) TD.
//! * [`eval`]: distances, Monte-Carlo ground truth, zero-shot scalar
//!   evaluation, mesh bounds.
//! * [`cli`]: experiment configuration and the commands behind the `mvdrl`
//!   binary.

pub mod cli;
pub mod dp;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod mdp;
pub mod measures;
pub mod projections;
pub mod td;

pub use error::{Error, Result};
pub use kernels::{KernelSpec, Semimetric};
pub use mdp::{RngStream, TabularMdp, Transition};
pub use measures::{AtomSet, DiscreteMeasure, ReturnDistFn, SupportMap};
