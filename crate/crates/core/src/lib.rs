//! Simulation and parameter estimation for ergodic jump-diffusions with
//! finite-activity jumps, observed at high frequency.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] describes the SDE `dX = a dt + b dW + ∫ c N(dt, dz)` and ships
//!   three reference models.
//! * [`generator`] applies the infinitesimal generator and produces
//!   conditional-moment expansions; [`quadrature`] integrates against the
//!   Lévy measure.
//! * [`simulate`] produces discretely observed sample paths.
//! * [`estfun`] holds approximate martingale estimating functions and
//!   [`solve`] finds their roots and sandwich variances.
//! * [`inference`] evaluates the population quantities (ergodic averages,
//!   Fisher information, efficiency and rate conditions).
//! * [`mc`] replicates simulate→estimate pipelines; [`cli`] ties it together.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod estfun;
pub mod generator;
pub mod inference;
pub mod io;
pub mod mc;
pub mod model;
pub mod parallel;
pub mod quadrature;
pub mod rng;
pub mod simulate;
pub mod solve;
pub mod stats;

pub use error::{Error, Result};
pub use model::{JumpDiffusionModel, ParameterVector};
