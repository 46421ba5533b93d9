//! Covariate shift estimation and unsupervised adaptive ensemble learning for
//! non-stationary motor-imagery EEG streams.
//!
//! The crate is organised along the processing pipeline:
//!
//! - [`ingest`]: trial data model, the on-disk trial CSV format, session
//!   splitting and a seeded synthetic non-stationary stream generator.
//! - [`dsp`]: Butterworth band-pass design, zero-phase filtering, the filter
//!   bank and cue-aligned windowing.
//! - [`features`]: CSP spatial filters, log-variance features, filter-bank
//!   concatenation and PCA.
//! - [`cse`]: the two-stage covariate shift estimator (EWMA warning stage,
//!   Hotelling T² validation stage).
//! - [`learners`]: LDA, KNN posterior, probabilistic weighted KNN and the
//!   voting ensemble.
//! - [`uael`]: the stream orchestrator for active, passive and single
//!   classifier adaptation.
//! - [`eval`]: experiment configuration, metrics, the Wilcoxon signed-rank
//!   test and report emission.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cse;
pub mod dsp;
pub mod eval;
pub mod features;
pub mod ingest;
pub mod learners;
mod linalg;
pub mod uael;

pub use ingest::{Class, Trial, TrialSet};
