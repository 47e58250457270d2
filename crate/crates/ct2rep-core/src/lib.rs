//! Report generation for 3D chest CT volumes.
//!
//! The pipeline: raw volumes are converted to Hounsfield units, resampled,
//! cropped/padded and normalized ([`volume`]); a volumetric transformer
//! extracts CT tokens while preserving the spatial grid ([`model::vision`]);
//! a transformer encoder and a relational-memory decoder with conditional
//! layer normalization generate findings text ([`model`]); an extended model
//! fuses a prior visit's volume and report through cross-attention
//! ([`model::fusion`]). Text metrics and a rule-based abnormality labeler
//! ([`metrics`]) score the output, and [`synth`] produces seeded synthetic
//! datasets so the whole loop runs at desk scale.

pub mod checkpoint;
pub mod config;
pub mod longitudinal;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod runner;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod volume;

pub use checkpoint::{Checkpoint, CheckpointError, ModelKind};
pub use config::{ConfigError, RunConfig};
pub use metrics::{CeReport, LabelVector, LabelerRules, MetricReport};
pub use model::generate::DecodeMode;
pub use runner::{
    evaluate_reports, load_base_samples, load_pair_samples, load_reports, preprocess, run_eval,
    run_generate, run_train, EvalReport, ReportRow, RunnerError, TrainOptions, TrainReport,
    Trainer,
};
pub use synth::{synth_dataset, SynthConfig};
pub use text::{TokenSequence, Vocabulary};
pub use volume::{Volume3D, VolumeMeta};
