//! Macro/weighted precision, recall and F1, robustness deltas, token-length
//! distributions and confidence intervals.

mod distribution;
mod prf;
mod robustness;

use thiserror::Error;

pub use distribution::{compute_kl, DistributionStats, KL_EPSILON};
pub use prf::{
    compute_prf, compute_prf_with, ClassCounts, ClassMetrics, ConfusionStats, MacroScope,
    MetricsReport,
};
pub use robustness::{
    compute_delta_r, delta_r, format_percent, Metric, MetricDeltas, RobustnessReport,
};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("gold has {gold} labels but predictions have {pred}")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("nothing to score")]
    Empty,
    #[error("gold label '{0}' is not in the class set")]
    UnknownGold(String),
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("histogram mass must be finite and non-negative")]
    InvalidMass,
    #[error("a confidence interval needs at least 2 values, got {0}")]
    TooFewValues(usize),
}

/// Mean and 95% half-width `1.96 · s / √n` with the sample standard deviation.
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64), MetricsError> {
    let n = values.len();
    if n < 2 {
        return Err(MetricsError::TooFewValues(n));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, 1.96 * var.sqrt() / (n as f64).sqrt()))
}
