//! Causal-effect estimation for Mendelian randomization when some
//! instruments have direct (pleiotropic) effects on the outcome.
//!
//! The crate provides the two-stage least-squares baseline, penalized
//! posterior modes under a Gaussian and a spike/slab prior on the direct
//! effects, Monte Carlo EM fits of both hierarchical models (with a Gibbs
//! E-step), a summary-statistics adapter, error-bound diagnostics, and a
//! simulation harness.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod estimators;
pub mod gibbs;
pub mod linalg;
pub mod mcem;
pub mod model;
pub mod moments;
pub mod rng;
pub mod simulator;

pub use error::{Error, ErrorClass, Result};
pub use estimators::{
    diagnostics, first_stage, ridge_mode_mixture, ridge_mode_single, tsls, BoundInputs, BoundTerms,
    DiagnosticsReport, FirstStageFit, PriorShape, RidgeMode,
};
pub use gibbs::{gibbs_step_mixture, gibbs_step_single, ChainState, PosteriorSample};
pub use mcem::{fit_mr_eb, fit_single_gaussian, fit_summary, EstimateResult, PriorKind, TraceRow};
pub use model::{
    center_columns, load_individual, load_summary, IndividualDataset, McemSettings, PriorConfig,
    SummaryDataset,
};
pub use moments::{Moments, NoiseScale};
pub use rng::SeededGenerator;
pub use simulator::{
    load_truth, run_grid, sample_mixture_prior, simulate, EstimatorKind, GridRow, InstrumentTruth,
    SimulationScenario, SimulationTruth,
};
