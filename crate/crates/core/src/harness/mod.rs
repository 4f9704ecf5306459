//! Synthetic scenes, KITTI label ingestion, training, evaluation and
//! key-point metrics.

pub mod config;
pub mod kitti;
pub mod metrics;
pub mod optim;
pub mod scene;
pub mod stats;
pub mod train;

pub use config::{derive_seed, LrSchedule, MatchingObjective, OptimizerConfig, OptimizerKind, RunConfig};
pub use kitti::{load_labels, parse_kitti_labels, KittiLabelRecord};
pub use metrics::{eval_keypoint_precision, KeypointTally};
pub use scene::{generate_scene, render_scene, ObjectSpec, SceneConfig, SyntheticScene};
pub use stats::{label_stats, LabelStats};
pub use train::{ablate_lambda, best_lambda, evaluate, mean_metric, train, AblationRow, EvalReport, MetricsReport, TrainOutcome};
