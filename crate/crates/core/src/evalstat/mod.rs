//! Classification and regression metrics, fold confidence intervals and
//! two-sample tests.

mod metrics;
mod tests;

pub use metrics::{
    argmax, auroc, auroc_ovr, classification_metrics, confusion_matrix, grouped_confusion, midranks,
    regression_metrics, ClassificationMetrics, RegressionMetrics,
};
pub use tests::{
    compare_models, fold_ci, mann_whitney, shapiro_wilk, stars, t_test, MannWhitney, MetricReport, TestName,
    TestResult,
};
