//! Explainable speech-aspect cross-attention models for Parkinson's disease
//! screening.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`rng`], [`tape`]: a small dense-tensor core with
//!   reverse-mode differentiation and a fixed, seeded random generator.
//! - [`encoder`]: per-aspect feature encoders producing interpretable tokens.
//! - [`attention`]: the four cross-attention variants (M1-M4) used in the
//!   ablation ladder, including the deliberately preserved softmax-axis flaw
//!   of the base variant.
//! - [`model`], [`optim`]: the assembled classifier and its Adam trainer.
//! - [`dataset`], [`ssl_io`], [`folds`], [`metrics`], [`stats`],
//!   [`protocol`]: data handling and the two evaluation protocols with
//!   speaker-independent nested cross-validation, five-seed aggregation and
//!   Wilcoxon comparisons.
//! - [`synth`]: a synthetic-data generator with a planted, known-ground-truth
//!   aspect signal.
//! - [`explain`]: explanation-score export (CSV/JSON/SVG).
//!
//! Independent jobs of an evaluation grid run in parallel through [`exec`]
//! when the `parallel` feature (default) is enabled; outputs are identical
//! to sequential execution.

// Indexed loops over matrix extents are the house style here.
#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod explain;
pub mod folds;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod protocol;
pub mod rng;
pub mod ssl_io;
pub mod stats;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tape::{NodeId, ParamSet, Tape};
pub use tensor::Tensor;
