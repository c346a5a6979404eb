//! Multiplicative dynamic mode decomposition.
//!
//! Data-driven approximation of unitary Koopman operators that preserves the
//! operator's multiplicative structure exactly. On an indicator dictionary
//! over a Voronoi tessellation of the sampled states, the admissible
//! approximations are the 0/1 matrices with at most one unit entry per row;
//! the weighted least-squares fit over that set decouples row by row and is
//! solved in closed form. The resulting operator is an index map on cells
//! whose nonzero spectrum consists of exact roots of unity, read off the
//! cycles of its functional graph.
//!
//! The crate also ships the classic baselines (EDMD on the same dictionary,
//! exact DMD on raw states), residual diagnostics, spectral moment checks,
//! POD compression for high-dimensional fields, and data generators for the
//! benchmark systems (nonlinear pendulum, Lorenz attractor, circle and torus
//! rotations).
//!
//! Start with the `examples/` directory: each example is a runnable
//! walkthrough of one capability. The `multdmd` binary drives the same
//! pipeline from JSON configuration files.

pub mod config;
pub mod dictionary;
pub mod dynsys;
pub mod error;
pub mod estimators;
pub mod io;
pub mod pipeline;
pub mod pod;
pub mod spectral;
pub(crate) mod util;

pub use config::{ResolvedConfig, RunConfig};
pub use dictionary::{fit_kmeans, Dictionary};
pub use dynsys::{add_noise, simulate, SnapshotSet, SystemConfig, SystemKind};
pub use error::{Error, Result};
pub use estimators::{
    accumulate, fit_edmd_indicator, fit_exact_dmd, fit_multdmd, objective, Accumulation,
    KoopmanApprox, TransitionWeights,
};
pub use pod::{fit_pod, koopman_modes, project, reconstruct, PodBasis};
pub use spectral::{
    autocorrelation, cycle_spectrum, dense_eig, model_moments, residual, ResidualDenominator,
    SpectralResult,
};
