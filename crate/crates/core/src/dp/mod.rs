//! Exact dynamic programs over the lattice.

pub mod dist;
pub mod exit;
pub mod forward;
pub mod prefactor;

pub use dist::{DistDoc, SparseLatticeDist, SCHEMA_VERSION};
pub use exit::{exit_law, ExitLaw};
pub use forward::{env_convolve, evolve_forward, quenched_distribution};
pub use prefactor::{
    adjoint_evolve, cesaro_prefactor, normalization_constant, prefactor_field, PrefactorDoc, PrefactorField,
};

/// Knobs shared by every sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpConfig {
    /// Entries below this are dropped and accounted as pruned mass.
    pub prune: f64,
    /// Largest dense grid a sweep may allocate.
    pub max_sites: usize,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            prune: 0.0,
            max_sites: 50_000_000,
        }
    }
}
