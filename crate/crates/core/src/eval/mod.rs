//! Evaluation: ROC/AUC, detector timing and report emission.

mod report;
mod roc;
mod timing;

pub use report::{
    cdf_points, emit_report, evaluate, population_of, read_scores_csv, switching_rates, write_plot_series, write_scores_csv,
    EvalEntry, EvalReport, PlotSeries, ReportFormat, TimingEntry, BENIGN_POPULATION, REPORT_SCHEMA_VERSION,
};
pub use roc::{auc, auc_mann_whitney, roc, tpr_at_fpr, RocCurve, RocPoint};
pub use timing::{time_detector, TimingStats};
