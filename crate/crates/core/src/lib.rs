//! Continual deepfake-detection toolkit on a synthetic stream.

pub mod ablation;
pub mod audit;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod protocol;
pub mod report;
pub mod sur;
pub mod taskgen;
pub mod trainer;

pub use backbone::{Adam, Backbone, BackboneConfig, FrozenBackbone};
pub use config::{ReportFormat, RunConfig};
pub use error::{Error, Result};
pub use heads::{HeadBank, HeadInit, InferenceAveraging, TaskHead};
pub use losses::{LossConfig, LossValues};
pub use numerics::{Matrix, RngStream};
pub use protocol::run_protocol;
pub use report::ProtocolReport;
pub use sur::{ReplaySet, ReplayStrategy};
pub use taskgen::{Class, DomainLabel, GridShape, ProtocolMode, ProtocolSpec, Sample, TaskDataset};
pub use trainer::{AblationFlags, IncrementState, ProtocolRunner, TrainConfig};
