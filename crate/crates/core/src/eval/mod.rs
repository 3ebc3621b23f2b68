//! Ranking metrics, run artifacts and comparison tables.

pub mod artifact;
pub mod metrics;
pub mod report;

pub use artifact::{ArtifactError, RunArtifact, RunMeta, RunRecord};
pub use metrics::{code_accuracy_at_k, mean_precision_at_k, novel_filter, scored_view, visit_precision_at_k};
pub use report::{
    compare_ablations, evaluate_run, AtK, Cell, ComparisonRow, ComparisonTable, KGrid, MetricKey, MetricsReport,
    TaskMetrics,
};

use crate::evidence::Task;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("target set is empty")]
    EmptyTarget,
    #[error("no eligible records for the {0} task")]
    NoEligible(Task),
    #[error("reports use different k grids")]
    MismatchedGrid,
    #[error("nothing to compare")]
    NoReports,
}
