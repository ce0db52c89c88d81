//! Random walks in i.i.d. uniformly elliptic random environments on Z^d:
//! exact quenched dynamic programs, Monte Carlo walkers, regeneration
//! statistics, estimators for annealed-to-quenched comparisons and couplings.

pub mod dp;
pub mod coupling;
pub mod env;
pub mod error;
pub mod estimators;
pub mod lattice;
pub mod rng;
pub mod regen;
pub mod stats;
pub mod walk;

pub use error::{Error, Result};
