// SPDX-License-Identifier: MIT OR Apache-2.0

//! # xlprobe-core
//!
//! Layer-wise linear difficulty probes over transformer residual-stream
//! activations, evaluated within and across languages.
//!
//! The crate is organised bottom-up:
//!
//! - [`datamodel`]: the activation dataset container and its on-disk format
//!   (`manifest.json` plus raw little-endian `f32` matrices).
//! - [`numerics`]: closed-form ridge regression, tie-aware Spearman rank
//!   correlation and the Wilcoxon signed-rank test.
//! - [`engine`]: probe training over the (language, layer, lambda) grid, the
//!   performance cube and every derived transfer statistic.
//! - [`synthgen`]: a planted-direction generator producing synthetic datasets
//!   with known cross-lingual structure.
//! - [`report`]: JSON/CSV emission of cubes and reports, and the one-row
//!   summary table.
//!
//! All numerics run in `f64`. Nothing in the engine is random, so a run is
//! reproducible bit-for-bit given the same dataset and lambda grid,
//! independent of the number of worker threads.

pub mod datamodel;
pub mod engine;
pub mod numerics;
pub mod report;
pub mod synthgen;

pub use datamodel::{ActivationDataset, DataError, Manifest, ProblemRecord, Split};
pub use engine::{
    evaluate_cube, run_pipeline, summarize, train_probe_grid, EngineError, PerfCube, ProbeGrid,
    ProbeModel, SelectionSplit, TransferReport,
};
pub use numerics::{
    average_ranks, fit_ridge, spearman_rho, wilcoxon_signed_rank, NumericsError, RidgeProbe,
};
pub use synthgen::{generate, SynthConfig, SynthError};

/// Lambda grid used when none is supplied.
pub const DEFAULT_LAMBDA_GRID: [f64; 3] = [10.0, 100.0, 1000.0];
