//! Joint spectral estimation for irregularly sampled, misaligned records.
//!
//! The pipeline: build wideband dictionaries over a band grid
//! ([`dictionary`]), solve the convex joint program ([`solver`]), zoom into
//! surviving bands and finish with a gridless refinement ([`glosa`]).
//! [`bounds`] computes misspecified Cramer-Rao style lower bounds,
//! [`simulator`] generates synthetic paleoclimate-like data, and [`harness`]
//! runs Monte Carlo experiments against the [`baselines`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod bounds;
pub mod dictionary;
pub mod error;
pub mod glosa;
pub mod harness;
pub mod io;
pub mod signal;
pub mod simulator;
pub mod solver;

pub use dictionary::{build_narrowband, build_wideband, refine_grid, BandGrid, NarrowbandMatrix, WidebandDictionary};
pub use error::{Error, Result};
pub use glosa::{amplitude_readout, gridless_refine, run_glosa, GlobalEstimate, ZoomConfig};
pub use signal::{
    evaluate_signal, noise_var_for_mean_snr, noise_var_for_snr, snr_db, wrap_phase, MissamplingField, Record,
    RecordSet, SinusoidModel,
};
pub use solver::{band_power, objective, solve_joint, JointSolution, PenaltyConfig, SolverSettings};
