//! Temporal action segmentation with an auxiliary boundary channel and a
//! segment-shape loss: data model, losses, a small reverse-mode autodiff,
//! a multi-stage temporal convolutional backbone, metrics, synthetic data
//! and a deterministic trainer.

pub mod autodiff;
pub mod data;
pub mod gradcheck;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod sequence;
pub mod trainer;

pub use data::{
    generate, load_dataset, write_dataset, Corpus, DataError, FeatureFormat, SynthConfig, Video,
};
pub use gradcheck::{finite_difference_check, FdReport, GradCheck, GradCheckError};
pub use losses::{total_loss, Assignment, LossBreakdown, LossConfig, LossError};
pub use matrix::Matrix;
pub use metrics::{evaluate_corpus, EditAggregation, EvalReport, MetricsError};
pub use model::{forward, predict, BackboneConfig, ModelError, Parameters};
pub use sequence::{
    boundary_targets, extract_segments, region_partition, segment_iou, BoundaryTarget,
    LabelSequence, ProbabilityMap, RegionMask, Segment, SequenceError,
};
pub use trainer::{
    ablate, parse_arms, train, AblationTable, Arm, OptimizerConfig, RunLog, TrainConfig, TrainError,
};
