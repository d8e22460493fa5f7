//! Ambient-diffusion-guided recovery of partially corrupted trajectory
//! datasets.
//!
//! The crate trains a detector with the ambient diffusion objective on the
//! corrupted data, flags steps whose predicted-noise energy is large, trains
//! a second diffusion model on the remaining clean steps with a column-masked
//! loss, and rewrites the flagged steps by reverse diffusion.

pub mod error;
pub mod schedule;
pub mod nnet;
pub mod data;
pub mod corrupt;
pub mod training;
pub mod ambient;
pub mod detect;
pub mod denoise;
pub mod theory;
pub mod checkpoint;
pub mod pipeline;

pub use error::{Error, LoadError, Result};
pub use schedule::{AmbientCoefficients, BridgeCoefficients, ScheduleConfig, VarianceSchedule};
pub use nnet::{init_predictor, Mode, NetworkShape, PredictorConfig, PredictorParams};
pub use data::{
    ChannelLayout, CorruptionMask, SliceWindow, StepIndex, SyntheticKind, SyntheticSpec,
    TrajectoryDataset,
};
pub use corrupt::{CorruptionFamily, CorruptionSpec};
pub use training::{LossPoint, TrainLog};
pub use ambient::AmbientTrainConfig;
pub use detect::{DetectionMetrics, DetectionReport, RescaleMode, Split};
pub use denoise::{DenoiserTrainConfig, RecoveryConfig, RecoveryMode};
pub use theory::GapQuery;
pub use checkpoint::{CheckpointMeta, ModelKind};
pub use pipeline::{RunConfig, RunReport};
