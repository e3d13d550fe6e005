use std::fmt;

use serde::{Deserialize, Serialize};

use super::MetricsReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    MaP,
    MaR,
    MaF1,
    WeP,
    WeR,
    WeF1,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::MaP,
        Metric::MaR,
        Metric::MaF1,
        Metric::WeP,
        Metric::WeR,
        Metric::WeF1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::MaP => "ma-P",
            Metric::MaR => "ma-R",
            Metric::MaF1 => "ma-F1",
            Metric::WeP => "we-P",
            Metric::WeR => "we-R",
            Metric::WeF1 => "we-F1",
        }
    }

    pub fn of(self, r: &MetricsReport) -> f64 {
        r.values()[self as usize]
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `|clean − perturbed| / clean`, undefined when `clean` is not positive.
pub fn delta_r(clean: f64, perturbed: f64) -> Option<f64> {
    (clean > 0.0 && clean.is_finite() && perturbed.is_finite())
        .then(|| (clean - perturbed).abs() / clean)
}

/// Relative drop per metric; `None` where the clean value is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDeltas {
    pub ma_p: Option<f64>,
    pub ma_r: Option<f64>,
    pub ma_f1: Option<f64>,
    pub we_p: Option<f64>,
    pub we_r: Option<f64>,
    pub we_f1: Option<f64>,
}

impl MetricDeltas {
    pub fn values(&self) -> [Option<f64>; 6] {
        [
            self.ma_p, self.ma_r, self.ma_f1, self.we_p, self.we_r, self.we_f1,
        ]
    }

    pub fn get(&self, m: Metric) -> Option<f64> {
        self.values()[m as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub clean: MetricsReport,
    pub perturbed: MetricsReport,
    pub delta_r: MetricDeltas,
}

impl RobustnessReport {
    /// One line per metric: `ma-F1  88.3  41.7  52.8%`.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<6} {:>7} {:>9} {:>8}\n",
            "metric", "clean", "attacked", "delta_r"
        );
        for m in Metric::ALL {
            out.push_str(&format!(
                "{:<6} {:>7} {:>9} {:>8}\n",
                m.name(),
                format_percent(Some(m.of(&self.clean))),
                format_percent(Some(m.of(&self.perturbed))),
                match self.delta_r.get(m) {
                    Some(d) => format!("{}%", format_percent(Some(d))),
                    None => "n/a".to_string(),
                }
            ));
        }
        out
    }
}

pub fn compute_delta_r(clean: &MetricsReport, perturbed: &MetricsReport) -> RobustnessReport {
    let d = |m: Metric| delta_r(m.of(clean), m.of(perturbed));
    RobustnessReport {
        clean: clean.clone(),
        perturbed: perturbed.clone(),
        delta_r: MetricDeltas {
            ma_p: d(Metric::MaP),
            ma_r: d(Metric::MaR),
            ma_f1: d(Metric::MaF1),
            we_p: d(Metric::WeP),
            we_r: d(Metric::WeR),
            we_f1: d(Metric::WeF1),
        },
    }
}

/// A fraction as a percentage with one decimal, or `n/a`.
pub fn format_percent(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.1}", v * 100.0),
        None => "n/a".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(ma_f1: f64, we_f1: f64) -> MetricsReport {
        MetricsReport::from_values([0.5, 0.5, ma_f1, 0.5, 0.5, we_f1], 10)
    }

    #[test]
    fn published_cells() {
        let r = compute_delta_r(&report(0.883, 0.986), &report(0.417, 0.962));
        assert_eq!(format_percent(r.delta_r.ma_f1), "52.8");
        assert_eq!(format_percent(r.delta_r.we_f1), "2.4");
        assert_eq!(r.delta_r.ma_p, Some(0.0));
    }

    #[test]
    fn identical_reports_give_zero() {
        let a = report(0.7, 0.9);
        assert_eq!(compute_delta_r(&a, &a).delta_r.values(), [Some(0.0); 6]);
    }

    #[test]
    fn zero_clean_is_undefined() {
        let r = compute_delta_r(&report(0.0, 0.9), &report(0.1, 0.9));
        assert_eq!(r.delta_r.ma_f1, None);
        assert!(r.to_text().contains("n/a"));
    }

    #[test]
    fn improvement_is_absolute() {
        assert!((delta_r(0.5, 0.6).unwrap() - 0.2).abs() < 1e-12);
    }
}
