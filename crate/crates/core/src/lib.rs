//! Keypoint refinement, sequence standardization and framewise segmentation
//! models (transformer encoder, LSTM, hybrids) for reach-to-grasp videos.

pub mod dataset;
pub mod error;
pub mod ingest;
pub mod models;
pub mod nn;
pub mod refine;
pub mod synth;
pub mod trainer;

pub use dataset::{FoldPlan, LabelScheme, Segment, Sequence, IGNORE_INDEX, SEQUENCE_LEN};
pub use error::{Error, Result};
pub use ingest::{RawSequence, View};
pub use models::{count_params, Model, ModelConfig, ModelKind};
pub use refine::{MissingFractions, RefineConfig, Refinement};
pub use synth::SynthConfig;
pub use trainer::{EpochRecord, FoldReport, TrainConfig, TrainOutcome};
