//! Synthetic data, training loops, evaluation, benchmarking and ablations.

pub mod dataset;
pub mod metrics;
pub mod train;

pub use dataset::{gen_dataset, SegSample, Split, SyntheticConfig};
pub use metrics::{ConfusionMatrix, Metrics};
pub use train::{evaluate, train_student, train_teacher, LogRow, StudentRun, TeacherRef, TeacherRun, TrainConfig};
pub mod ablation;
pub mod bench;

pub use ablation::{format_ablation, run_ablation, AblationRow, AblationSpec};
pub use bench::{benchmark_forward, LatencyStats};
