//! Simulation and statistical verification toolkit for regime-switching jump
//! diffusions.
//!
//! A regime-switching jump diffusion is a pair `(X, Λ)` where `Λ` is a finite
//! Markov-type regime index and, within each regime `k`, the continuous
//! component `X` follows a Lévy-type dynamic: drift, diffusion, and a
//! state-dependent jump kernel compensated below a cutoff radius. Regimes are
//! coupled through a state-dependent rate matrix `Q(x)`.
//!
//! The crate builds sample paths of the pair two independent ways and turns
//! the identities that connect them into statistical checks:
//!
//! * [`paths::simulate_pieced`] concatenates single-regime segments at the
//!   switch epochs of a uniform reference chain; together with
//!   [`paths::likelihood_ratio`] it targets the true law by importance
//!   reweighting.
//! * [`paths::simulate_direct`] samples the true law directly by thinning a
//!   dominating switch clock.
//! * [`paths::simulate_killed`] runs a single regime killed at its exit rate,
//!   the building block for resolvent series.
//! * [`coupling`] runs synchronous and reflection couplings of two copies in
//!   one regime and evaluates the analytic contraction and coupling-time
//!   bounds they satisfy.
//! * [`semigroup`] estimates resolvents and transition probabilities both by
//!   plain Monte Carlo and by series expansion over killed resolvents.
//! * [`verify`] packages every identity (martingale residuals, unit-mean
//!   reweighting, exponential first-switch law, compensator identities,
//!   measure-change equivalence, coupling bounds) as a reproducible
//!   pass/fail check with Monte Carlo error bars.
//!
//! Everything is deterministic given a master seed: each path owns a counter
//! derived RNG stream, so ensemble results do not depend on worker count.

// Comparisons written as `!(x > 0.0)` deliberately reject NaN; several
// operation signatures mirror multi-parameter mathematical interfaces.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::too_many_arguments)]
#![allow(clippy::type_complexity)]

pub mod coupling;
pub mod error;
pub mod model;
pub mod paths;
pub mod report;
pub mod rng;
pub mod semigroup;
pub mod stats;
pub mod verify;
pub mod zoo;

pub use error::{Error, Result};
pub use model::{LevyKernelSpec, ModelSpec, Rho, TestFunction};
pub use paths::RegimePath;
pub use stats::MCEstimate;

/// State vector of the continuous component.
pub type State = nalgebra::DVector<f64>;
/// Dense matrix used for diffusion factors and switching-rate matrices.
pub type Matrix = nalgebra::DMatrix<f64>;
/// Regime index, `0..n_regimes`.
pub type Regime = usize;
