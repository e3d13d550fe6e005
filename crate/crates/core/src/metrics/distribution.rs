use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Mass given to an empty bin of `q` before renormalizing.
pub const KL_EPSILON: f64 = 1e-9;

/// Normalized histogram over integer bins, e.g. description token counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub bins: BTreeMap<usize, f64>,
    /// KL divergence of this distribution from the clean one, in nats.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_vs_clean: Option<f64>,
}

impl DistributionStats {
    pub fn from_counts<I: IntoIterator<Item = usize>>(values: I) -> Result<Self, MetricsError> {
        let mut raw: BTreeMap<usize, f64> = BTreeMap::new();
        for v in values {
            *raw.entry(v).or_default() += 1.0;
        }
        Self::from_weights(raw)
    }

    /// Histogram of whitespace token counts.
    pub fn from_texts<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Result<Self, MetricsError> {
        Self::from_counts(texts.into_iter().map(|t| t.split_whitespace().count()))
    }

    /// Bins `0..masses.len()`.
    pub fn from_masses(masses: &[f64]) -> Result<Self, MetricsError> {
        Self::from_weights(masses.iter().copied().enumerate())
    }

    pub fn from_weights<I: IntoIterator<Item = (usize, f64)>>(
        weights: I,
    ) -> Result<Self, MetricsError> {
        let mut bins: BTreeMap<usize, f64> = BTreeMap::new();
        for (b, w) in weights {
            if !w.is_finite() || w < 0.0 {
                return Err(MetricsError::InvalidMass);
            }
            if w > 0.0 {
                *bins.entry(b).or_default() += w;
            }
        }
        let total: f64 = bins.values().sum();
        if bins.is_empty() || total <= 0.0 {
            return Err(MetricsError::EmptyHistogram);
        }
        for v in bins.values_mut() {
            *v /= total;
        }
        Ok(Self {
            bins,
            kl_vs_clean: None,
        })
    }

    pub fn mass(&self, bin: usize) -> f64 {
        self.bins.get(&bin).copied().unwrap_or(0.0)
    }
}

/// KL(p‖q) in nats over the union of both bin sets. Empty bins of `q` get
/// [`KL_EPSILON`] mass and `q` is renormalized; identical inputs give 0.
pub fn compute_kl(p: &DistributionStats, q: &DistributionStats) -> Result<f64, MetricsError> {
    if p.bins.is_empty() || q.bins.is_empty() {
        return Err(MetricsError::EmptyHistogram);
    }
    if p.bins == q.bins {
        return Ok(0.0);
    }
    let domain: Vec<usize> = p
        .bins
        .keys()
        .chain(q.bins.keys())
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let smoothed: Vec<f64> = domain
        .iter()
        .map(|b| match q.mass(*b) {
            m if m > 0.0 => m,
            _ => KL_EPSILON,
        })
        .collect();
    let z: f64 = smoothed.iter().sum();
    let kl: f64 = domain
        .iter()
        .zip(&smoothed)
        .map(|(b, qm)| {
            let pm = p.mass(*b);
            if pm > 0.0 {
                pm * (pm / (qm / z)).ln()
            } else {
                0.0
            }
        })
        .sum();
    Ok(kl.max(0.0))
}
