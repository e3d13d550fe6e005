use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Which classes the macro average runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MacroScope {
    /// Classes with nonzero gold support.
    #[default]
    Gold,
    /// Every class in the supplied class set.
    AllClasses,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub support: usize,
}

/// Per-class confusion counts. Predictions outside the class set (such as
/// INVALID) are wrong for every class and add no false positives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionStats {
    pub classes: BTreeMap<String, ClassCounts>,
    pub total: usize,
}

impl ConfusionStats {
    pub fn new<G: AsRef<str>, P: AsRef<str>>(
        gold: &[G],
        pred: &[P],
        classes: &[String],
    ) -> Result<Self, MetricsError> {
        if gold.len() != pred.len() {
            return Err(MetricsError::LengthMismatch {
                gold: gold.len(),
                pred: pred.len(),
            });
        }
        if gold.is_empty() {
            return Err(MetricsError::Empty);
        }
        let mut map: BTreeMap<String, ClassCounts> = classes
            .iter()
            .map(|c| (c.clone(), ClassCounts::default()))
            .collect();
        for (g, p) in gold.iter().zip(pred) {
            let (g, p) = (g.as_ref(), p.as_ref());
            let gc = map
                .get_mut(g)
                .ok_or_else(|| MetricsError::UnknownGold(g.to_string()))?;
            gc.support += 1;
            if g == p {
                gc.tp += 1;
                continue;
            }
            gc.fn_ += 1;
            if let Some(pc) = map.get_mut(p) {
                pc.fp += 1;
            }
        }
        Ok(Self {
            classes: map,
            total: gold.len(),
        })
    }

    pub fn correct(&self) -> usize {
        self.classes.values().map(|c| c.tp).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    #[serde(flatten)]
    pub counts: ClassCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Precision or recall had a zero denominator and was set to 0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub undefined: bool,
}

impl ClassMetrics {
    fn from_counts(label: &str, c: ClassCounts) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            label: label.to_string(),
            counts: c,
            precision,
            recall,
            f1,
            undefined: c.tp + c.fp == 0 || c.tp + c.fn_ == 0,
        }
    }
}

/// The six headline metrics for one cell, all in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ma_p: f64,
    pub ma_r: f64,
    pub ma_f1: f64,
    pub we_p: f64,
    pub we_r: f64,
    pub we_f1: f64,
    pub n: usize,
    #[serde(default)]
    pub macro_scope: MacroScope,
    /// Classes with gold support or at least one prediction, in label order.
    #[serde(default)]
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    /// A report holding only headline numbers, e.g. transcribed from a table.
    pub fn from_values(values: [f64; 6], n: usize) -> Self {
        let [ma_p, ma_r, ma_f1, we_p, we_r, we_f1] = values;
        Self {
            ma_p,
            ma_r,
            ma_f1,
            we_p,
            we_r,
            we_f1,
            n,
            macro_scope: MacroScope::Gold,
            per_class: Vec::new(),
        }
    }

    pub fn values(&self) -> [f64; 6] {
        [
            self.ma_p, self.ma_r, self.ma_f1, self.we_p, self.we_r, self.we_f1,
        ]
    }

    pub fn accuracy(&self) -> f64 {
        self.we_r
    }
}

/// Macro over classes present in gold; see [`compute_prf_with`].
pub fn compute_prf<G: AsRef<str>, P: AsRef<str>>(
    gold: &[G],
    pred: &[P],
    classes: &[String],
) -> Result<MetricsReport, MetricsError> {
    compute_prf_with(gold, pred, classes, MacroScope::Gold)
}

pub fn compute_prf_with<G: AsRef<str>, P: AsRef<str>>(
    gold: &[G],
    pred: &[P],
    classes: &[String],
    scope: MacroScope,
) -> Result<MetricsReport, MetricsError> {
    let stats = ConfusionStats::new(gold, pred, classes)?;
    let per: Vec<ClassMetrics> = stats
        .classes
        .iter()
        .map(|(l, c)| ClassMetrics::from_counts(l, *c))
        .collect();

    let macro_set: Vec<&ClassMetrics> = match scope {
        MacroScope::Gold => per.iter().filter(|m| m.counts.support > 0).collect(),
        MacroScope::AllClasses => {
            let wanted: BTreeSet<&str> = classes.iter().map(String::as_str).collect();
            per.iter()
                .filter(|m| wanted.contains(m.label.as_str()))
                .collect()
        }
    };
    let k = macro_set.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| macro_set.iter().map(|m| f(m)).sum::<f64>() / k;

    let n = stats.total as f64;
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        per.iter()
            .map(|m| m.counts.support as f64 * f(m))
            .sum::<f64>()
            / n
    };

    Ok(MetricsReport {
        ma_p: mean(|m| m.precision),
        ma_r: mean(|m| m.recall),
        ma_f1: mean(|m| m.f1),
        we_p: weighted(|m| m.precision),
        we_r: stats.correct() as f64 / n,
        we_f1: weighted(|m| m.f1),
        n: stats.total,
        macro_scope: scope,
        per_class: per
            .into_iter()
            .filter(|m| m.counts.support > 0 || m.counts.fp > 0)
            .collect(),
    })
}
