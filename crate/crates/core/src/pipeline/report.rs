use serde::{Deserialize, Serialize};

use super::config::CellConfig;
use crate::classify::Approach;
use crate::metrics::{compute_delta_r, format_percent, Metric, MetricDeltas, MetricsReport};
use crate::perturb::AttackKind;

/// Scores for one configured cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: CellConfig,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub approach: Approach,
    pub attack: String,
    pub values: [f64; 6],
    pub n: usize,
}

/// The robustness row of a model block: which attacked cell it compares
/// against which clean cell, and the relative drop per metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub approach: Approach,
    pub attack: String,
    pub delta_r: MetricDeltas,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBlock {
    pub model: String,
    pub rows: Vec<ReportRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<DeltaRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Table-shaped summary of a run: one block per model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub blocks: Vec<ModelBlock>,
}

fn attack_rank(c: &CellConfig) -> (usize, bool) {
    let i = AttackKind::ALL
        .iter()
        .position(|a| *a == c.attack)
        .unwrap_or(0);
    (i, c.reason_note)
}

fn approach_rank(a: Approach) -> usize {
    Approach::ALL.iter().position(|x| *x == a).unwrap_or(0)
}

/// Pick the cell a block's robustness row is computed for: the attacked
/// cell with the highest ma-F1 among combined attacks (any attack if no
/// combined cell exists) whose approach also has a clean run.
fn delta_for(cells: &[&CellResult]) -> Option<DeltaRow> {
    let clean_of = |a: Approach| {
        cells
            .iter()
            .filter(|c| c.cell.approach == a && c.cell.attack == AttackKind::Clean)
            .min_by_key(|c| c.cell.reason_note)
    };
    let attacked: Vec<&&CellResult> = cells
        .iter()
        .filter(|c| c.cell.attack != AttackKind::Clean && clean_of(c.cell.approach).is_some())
        .collect();
    let pool: Vec<&&CellResult> = if attacked
        .iter()
        .any(|c| c.cell.attack == AttackKind::Combined)
    {
        attacked
            .into_iter()
            .filter(|c| c.cell.attack == AttackKind::Combined)
            .collect()
    } else {
        attacked
    };
    // Earlier rows win ties.
    let best = pool.into_iter().reduce(|best, c| {
        if c.metrics.ma_f1 > best.metrics.ma_f1 {
            c
        } else {
            best
        }
    })?;
    let clean = clean_of(best.cell.approach)?;
    Some(DeltaRow {
        approach: best.cell.approach,
        attack: best.cell.attack_label(),
        delta_r: compute_delta_r(&clean.metrics, &best.metrics).delta_r,
    })
}

/// Build the report. Blocks follow first appearance of each model in
/// `results`; rows within a block follow approach, then attack order.
pub fn emit_report(seed: u64, results: &[CellResult]) -> Report {
    let mut models: Vec<&str> = Vec::new();
    for r in results {
        if !models.contains(&r.cell.backend.as_str()) {
            models.push(&r.cell.backend);
        }
    }
    let blocks = models
        .into_iter()
        .map(|m| {
            let mut cells: Vec<&CellResult> =
                results.iter().filter(|r| r.cell.backend == m).collect();
            cells.sort_by_key(|c| (approach_rank(c.cell.approach), attack_rank(&c.cell)));
            let rows = cells
                .iter()
                .map(|c| ReportRow {
                    approach: c.cell.approach,
                    attack: c.cell.attack_label(),
                    values: c.metrics.values(),
                    n: c.metrics.n,
                })
                .collect();
            let delta = delta_for(&cells);
            let note = match (
                &delta,
                cells.iter().any(|c| c.cell.attack != AttackKind::Clean),
            ) {
                (None, true) => {
                    Some("delta_r row omitted: no clean baseline for any attacked cell".to_string())
                }
                _ => None,
            };
            ModelBlock {
                model: m.to_string(),
                rows,
                delta,
                note,
            }
        })
        .collect();
    Report { seed, blocks }
}

fn approach_label(a: Approach) -> &'static str {
    match a {
        Approach::Flat => "Flat",
        Approach::Hierarchical => "Hierarchical",
        Approach::FewShot => "Few-shot",
    }
}

impl Report {
    /// Human table, percentages with one decimal.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# seed {}; values in %; delta_r = |M(clean) - M(attacked)| / M(clean); KL in nats\n",
            self.seed
        );
        out.push_str(&format!(
            "{:<16} {:<14} {:<18}",
            "Model", "Approach", "Attack"
        ));
        for m in Metric::ALL {
            out.push_str(&format!(" {:>6}", m.name()));
        }
        out.push('\n');
        for b in &self.blocks {
            for r in &b.rows {
                out.push_str(&format!(
                    "{:<16} {:<14} {:<18}",
                    b.model,
                    approach_label(r.approach),
                    r.attack
                ));
                for v in r.values {
                    out.push_str(&format!(" {:>6}", format_percent(Some(v))));
                }
                out.push('\n');
            }
            if let Some(d) = &b.delta {
                out.push_str(&format!(
                    "{:<16} {:<14} {:<18}",
                    b.model,
                    "delta_r (%)",
                    format!("{}/{}", approach_label(d.approach), d.attack)
                ));
                for v in d.delta_r.values() {
                    out.push_str(&format!(" {:>6}", format_percent(v)));
                }
                out.push('\n');
            }
            if let Some(n) = &b.note {
                out.push_str(&format!("# {}: {n}\n", b.model));
            }
        }
        out
    }

    /// Same rows as [`to_text`](Self::to_text) as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# seed {}\nmodel,approach,attack,row", self.seed);
        for m in Metric::ALL {
            out.push(',');
            out.push_str(m.name());
        }
        out.push('\n');
        let esc = |s: &str| {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        };
        for b in &self.blocks {
            for r in &b.rows {
                out.push_str(&format!(
                    "{},{},{},metric",
                    esc(&b.model),
                    approach_label(r.approach),
                    esc(&r.attack)
                ));
                for v in r.values {
                    out.push(',');
                    out.push_str(&format_percent(Some(v)));
                }
                out.push('\n');
            }
            if let Some(d) = &b.delta {
                out.push_str(&format!(
                    "{},{},{},delta_r",
                    esc(&b.model),
                    approach_label(d.approach),
                    esc(&d.attack)
                ));
                for v in d.delta_r.values() {
                    out.push(',');
                    out.push_str(&format_percent(v));
                }
                out.push('\n');
            }
        }
        out
    }
}
