//! Streaming coincidence counting and metric estimation.

mod counts;
mod estimate;

pub use counts::{accumulate, accumulate_results, Correlator, CountTable};
pub use estimate::{
    estimate_metrics, estimate_metrics_with, ErrorMethod, Estimate, MetricsWithErrors, DEFAULT_BOOTSTRAP_REPLICATES,
    LOW_COUNT,
};
