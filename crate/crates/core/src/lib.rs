//! Filter pruning by geometric median, additive powers-of-two quantization,
//! and the training pipelines that combine them.
//!
//! Everything runs on a small single-threaded tensor engine with hand-written
//! backward passes, so runs with the same seed are bitwise reproducible.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod pipelines;
pub mod prune;
pub mod quant;
pub mod report;
pub mod shift;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use data::{Dataset, Histogram, Split, SyntheticSpec};
pub use error::{Error, Result};
pub use metrics::{ArchDescriptor, CompressionPolicy, CompressionReport, LayerSpec};
pub use nn::{ModelKind, Network};
pub use pipelines::{EpochRecord, Phase, Pipeline, TrainConfig};
pub use prune::PruneMask;
pub use quant::{LevelSet, QuantConfig};
pub use report::RunReport;
pub use shift::{FixedPoint, ShiftReport};
pub use tensor::{Scalar, Tensor};
