//! Desk-scale class-incremental learning laboratory.
//!
//! A self-contained CIL stack built on a small dense-matrix core with
//! hand-derived gradients: an MLP classifier with an expandable head,
//! synthetic benchmarks with controllable inter-class similarity, exemplar
//! replay with herding selection, forgetting prediction from the frozen
//! previous-task model, class-aware representation disentanglement, and the
//! measurement pipeline (per-class accuracy, normalized forgetting,
//! similarity/forgetting correlation).
//!
//! The numeric core ([`num`]) is generic over the scalar type; the training
//! pipeline runs on the `f64` aliases below.

pub mod checkpoint;
pub mod clad;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod num;
pub mod replay;
pub mod train;

pub use error::{Error, Result};

/// Dense `f64` matrix, the type used throughout the training pipeline.
pub type Mat = num::Matrix<f64>;
/// Single-precision matrix, for callers that trade precision for memory.
pub type Mat32 = num::Matrix<f32>;
