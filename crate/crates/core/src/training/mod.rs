//! Optimisation, scheduling, metrics and the cross-validated experiment
//! harness.

pub mod cv;
pub mod experiment;
pub mod metrics;
pub mod optim;
pub mod schedule;

pub use metrics::{compute_accuracy, compute_auc};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use schedule::{lr_at, LrState, SchedulerConfig};
pub use cv::{run_cv, train_one_fold, ClassifierHyper, FoldResources, MetricsReport};
pub use experiment::{run_experiment_matrix, run_matrix_outcomes, ExperimentSpec, MatrixReport, Preset};
