//! Prompt-based multimodal test-time adaptation on synthetic two-modality
//! streams.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below fix the
//! scalar to `f64`, which is what the command-line tool and the tests use.

pub mod adapt;
pub mod error;
pub mod grad;
pub mod io;
pub mod losses;
pub mod model;
pub mod scalar;
pub mod stats;
pub mod synthdata;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = grad::Tensor<f64>;
pub type Tape = grad::Tape<f64>;
pub type ModelBundle = model::ModelBundle<f64>;
pub type SourceStatsBank = stats::SourceStatsBank<f64>;
pub type Batch = adapt::Batch<f64>;
pub type LabeledSet = synthdata::LabeledSet<f64>;
pub type Stream = synthdata::Stream<f64>;
pub type SourceModel = synthdata::SourceModel<f64>;
pub type DiscReport = losses::DiscReport<f64>;
pub type LossBreakdown = losses::LossBreakdown<f64>;
