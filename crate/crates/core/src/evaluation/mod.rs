//! Metrics and post-hoc analyses of trained models.

pub mod activation;
pub mod insight;
pub mod intervention;
pub mod metrics;

pub use activation::{
    activation_rates, analyze_activations, mean_rehearsal_probe, ActivationRates, ActivationReport,
    ActivationRow,
};
pub use insight::{insight_summary, temporal_mean, InsightRow, InsightSummary};
pub use intervention::{
    kernel_intervention, rehearsal_intervention, InterventionEntry, InterventionKind,
    InterventionResult,
};
pub use metrics::{ego_seed, evaluate, evaluate_prefixes, min_ade, min_fde, MetricReport};
