//! FLOPs and parameter profiler, and the clinical metric suite.

mod auc;
mod metrics;
mod profile;

pub use auc::{
    auc_pair_count, compare_auc_mcneil_hanley, hanley_se, inverse_norm_cdf, mcneil_hanley_r,
    mcneil_hanley_table, roc_auc, spearman, AucComparison, RocCurve, TABLE_AUCS, TABLE_RS,
};
pub use metrics::{
    confusion_matrix, one_vs_rest_metrics, pearson_r, predicted_risk, r_squared, ClassRates,
    Confusion, MetricsReport, OneVsRest,
};
pub use profile::{profile, CostReport, LayerCost, ELEMENTWISE_FLOPS};
