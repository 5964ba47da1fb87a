//! Leader–follower interacting particle systems on the unit torus, their
//! mean-field (nonlinear Fokker–Planck) limit, and Monte Carlo Newton
//! methods for the leader's optimal piecewise-constant control.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chaos;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod estimators;
pub mod meanfield;
pub mod optimize;
pub mod params;
pub mod rng;
pub mod system;
pub mod torus;
pub mod transport;

pub use error::{Error, Result};
