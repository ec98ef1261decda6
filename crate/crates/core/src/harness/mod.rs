//! Data plumbing around the tracker: synthetic sequences, configuration,
//! weights files, training and evaluation reports.

pub mod config;
pub mod gradsuite;
pub mod report;
pub mod store;
pub mod synth;
pub mod train;

pub use config::{DataConfig, OptimizerKind, RunConfig, Schedule};
pub use report::{evaluate, summarize, track_sequence, EvalReport, FrameRow, TrackSummary};
pub use store::{load_params, save_params};
pub use synth::{gen_synthetic, EventSpan, EventTag, Motion, SequenceSpec, SyntheticSequence};
pub use train::{train_stage1, train_stage2, TrainOutcome};
