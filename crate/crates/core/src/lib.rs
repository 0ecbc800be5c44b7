//! Simultaneous registration (time warping) and two-factor analysis of
//! discretely observed curves.
//!
//! Registered curves are modelled as
//! `X_i(h_i) ~ N(z0_i 1 + z1_i f1 + k z2_i f2, (g1 + g2)^-1 Sigma)` with
//! `k = g2 / (g1 + g2)`, warps `h_i` built from unconstrained base functions
//! `w_i`, and smoothness priors on the factors. Two inference engines share
//! one model definition:
//!
//! * [`avb`]: adapted variational Bayes (point-maximised base functions,
//!   mean-field updates for everything else, monotone criterion).
//! * [`mcmc`]: Metropolis-within-Gibbs with exact conjugate draws.
//!
//! [`simgen`] produces the two simulated benchmarks and [`analysis`] the
//! alignment metrics used to score a fit.

pub mod analysis;
pub mod avb;
pub mod error;
pub mod grid;
pub mod interp;
pub mod io;
mod linalg;
pub mod mcmc;
pub mod model;
pub mod optim;
pub mod simgen;
pub mod stats;
pub mod warp;

pub use error::{Error, Result};
pub use grid::{sigma_f, PenaltySet, TimeGrid};
pub use interp::Interpolation;
pub use model::{Dataset, LatentState, ModelConfig, ModelContext};
pub use warp::{BaseFunction, Warp};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
