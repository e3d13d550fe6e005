//! Acceptance harness. Prints one line per criterion and exits nonzero if
//! any criterion fails. Runs with `harness = false`.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use catrobust::classify::{
    gold_answer, render_classification_prompt, FewShotExample, MockBackend, PromptSpec,
};
use catrobust::corpus::Taxonomy;
use catrobust::metrics::{
    compute_delta_r, compute_kl, compute_prf, format_percent, DistributionStats, Metric,
    MetricsReport,
};
use catrobust::perturb::{
    abbreviate, amputate_with, combine_with, read_perturbed, render_perturbation_prompt,
    AbbreviationLexicon, ImportanceScorer, PerturbationConfig, PromptKind, TokenSequence,
};
use catrobust::pipeline::{load_report, run_pipeline_with, Overrides, RunConfig, RunManifest};
use catrobust::retrieval::{EmbeddingIndex, EmbeddingVector, IndexEntry};
use catrobust::INVALID_LABEL;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------------------
// 1. Robustness deltas from the published result table

/// One printed model block: clean values, the compared attacked values and
/// the printed delta row, in ma-P, ma-R, ma-F1, we-P, we-R, we-F1 order.
struct PublishedBlock {
    name: &'static str,
    clean: [f64; 6],
    attacked: [f64; 6],
    delta: [f64; 6],
}

const PUBLISHED: &[PublishedBlock] = &[
    // DeBERTaV3 base, Flat Clean vs Flat Combined
    PublishedBlock {
        name: "DeBERTaV3/Icecat",
        clean: [88.5, 89.2, 88.3, 97.9, 98.1, 97.8],
        attacked: [46.0, 45.9, 41.7, 76.2, 66.7, 67.6],
        delta: [48.0, 48.5, 52.8, 22.2, 32.0, 30.9],
    },
    PublishedBlock {
        name: "DeBERTaV3/WDC-222",
        clean: [38.9, 38.6, 35.1, 81.5, 70.7, 72.9],
        attacked: [26.0, 22.0, 19.7, 70.5, 39.9, 46.0],
        delta: [33.2, 43.0, 43.9, 13.5, 43.6, 36.9],
    },
    // LLMs: Few-shot Clean vs Few-shot Combined-Reason
    PublishedBlock {
        name: "Llama-2/Icecat",
        clean: [89.6, 89.2, 88.3, 97.1, 96.1, 95.9],
        attacked: [78.3, 78.4, 76.3, 94.2, 92.6, 92.6],
        delta: [12.6, 12.1, 13.6, 3.0, 3.6, 3.4],
    },
    PublishedBlock {
        name: "Llama-2/WDC-222",
        clean: [73.1, 71.5, 69.4, 89.8, 86.6, 85.6],
        attacked: [63.7, 62.9, 59.1, 83.0, 74.7, 72.1],
        delta: [12.9, 12.0, 14.8, 7.6, 13.7, 15.8],
    },
    PublishedBlock {
        name: "GPT3.5/Icecat",
        clean: [87.6, 88.3, 87.0, 97.7, 96.7, 97.0],
        attacked: [81.3, 82.4, 80.2, 95.4, 93.9, 94.2],
        delta: [7.2, 6.7, 7.8, 2.4, 2.9, 2.9],
    },
    PublishedBlock {
        name: "GPT3.5/WDC-222",
        clean: [77.0, 76.9, 75.1, 94.1, 92.3, 92.5],
        attacked: [72.9, 72.4, 70.4, 89.8, 87.3, 87.0],
        delta: [5.3, 5.9, 6.3, 4.6, 5.4, 5.9],
    },
    PublishedBlock {
        name: "GPT4/Icecat",
        clean: [93.5, 93.0, 92.8, 99.0, 98.5, 98.6],
        attacked: [86.2, 86.3, 85.2, 96.9, 96.0, 96.2],
        delta: [7.8, 7.2, 8.2, 2.1, 2.5, 2.4],
    },
    PublishedBlock {
        name: "GPT4/WDC-222",
        clean: [80.0, 77.1, 76.9, 95.9, 94.0, 94.4],
        attacked: [78.7, 76.9, 75.9, 93.9, 92.1, 92.2],
        delta: [1.6, 0.3, 1.3, 2.1, 2.0, 2.3],
    },
];

fn criterion_1() -> Outcome {
    let mut cells = 0;
    let mut worst: f64 = 0.0;
    for b in PUBLISHED {
        let to_report = |v: [f64; 6]| MetricsReport::from_values(v.map(|x| x / 100.0), 1000);
        let r = compute_delta_r(&to_report(b.clean), &to_report(b.attacked));
        for (m, printed) in Metric::ALL.iter().zip(b.delta) {
            let got = r
                .delta_r
                .get(*m)
                .ok_or(format!("{} {}: undefined", b.name, m.name()))?;
            let pct = got * 100.0;
            let diff = (pct - printed).abs();
            worst = worst.max(diff);
            ensure!(
                diff <= 0.1 + 1e-9,
                "{} {}: computed {:.3}, printed {printed}",
                b.name,
                m.name(),
                pct
            );
            cells += 1;
        }
    }
    // The two worked examples, through the same formatting the report uses.
    let icecat = &PUBLISHED[0];
    let r = compute_delta_r(
        &MetricsReport::from_values(icecat.clean.map(|x| x / 100.0), 1),
        &MetricsReport::from_values(icecat.attacked.map(|x| x / 100.0), 1),
    );
    ensure!(
        format_percent(r.delta_r.ma_f1) == "52.8",
        "88.3 vs 41.7 formats as {}",
        format_percent(r.delta_r.ma_f1)
    );
    let gpt4 = &PUBLISHED[6];
    let r = compute_delta_r(
        &MetricsReport::from_values(gpt4.clean.map(|x| x / 100.0), 1),
        &MetricsReport::from_values(gpt4.attacked.map(|x| x / 100.0), 1),
    );
    ensure!(
        format_percent(r.delta_r.we_f1) == "2.4",
        "98.6 vs 96.2 formats as {}",
        format_percent(r.delta_r.we_f1)
    );
    ensure!(cells == 48, "expected 48 cells, checked {cells}");
    Ok(format!("{cells} cells within 0.1 pp (worst {worst:.3})"))
}

// ---------------------------------------------------------------------------
// 2. Metrics against a brute-force confusion matrix

/// Six metrics from an explicit confusion matrix. Rows are gold classes,
/// columns are predictions; the extra last column collects predictions
/// outside the class set. Zero denominators give zero.
fn oracle_metrics(gold: &[String], pred: &[String], classes: &[String]) -> [f64; 6] {
    let k = classes.len();
    let idx = |s: &str| classes.iter().position(|c| c == s);
    let mut cm = vec![vec![0usize; k + 1]; k];
    for (g, p) in gold.iter().zip(pred) {
        let gi = idx(g).unwrap();
        cm[gi][idx(p).unwrap_or(k)] += 1;
    }
    let n = gold.len() as f64;
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let (mut mp, mut mr, mut mf, mut wp, mut wf) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut present = 0.0;
    let mut correct = 0usize;
    for c in 0..k {
        let tp = cm[c][c] as f64;
        correct += cm[c][c];
        let support: usize = cm[c].iter().sum();
        let predicted: usize = (0..k).map(|r| cm[r][c]).sum();
        let p = div(tp, predicted as f64);
        let r = div(tp, support as f64);
        let f = div(2.0 * p * r, p + r);
        if support > 0 {
            present += 1.0;
            mp += p;
            mr += r;
            mf += f;
        }
        wp += support as f64 * p;
        wf += support as f64 * f;
    }
    [
        mp / present,
        mr / present,
        mf / present,
        wp / n,
        correct as f64 / n,
        wf / n,
    ]
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let k = rng.random_range(1..=10);
        let classes: Vec<String> = (0..k).map(|i| format!("C{i}")).collect();
        let n = rng.random_range(1..=200);
        let invalid_rate: f64 = rng.random_range(0.0..0.3);
        let accuracy: f64 = rng.random_range(0.0..1.0);
        let gold: Vec<String> = (0..n)
            .map(|_| classes[rng.random_range(0..k)].clone())
            .collect();
        let pred: Vec<String> = gold
            .iter()
            .map(|g| {
                if rng.random_bool(invalid_rate) {
                    INVALID_LABEL.to_string()
                } else if rng.random_bool(accuracy) {
                    g.clone()
                } else {
                    classes[rng.random_range(0..k)].clone()
                }
            })
            .collect();
        let got = compute_prf(&gold, &pred, &classes).map_err(|e| format!("case {case}: {e}"))?;
        let want = oracle_metrics(&gold, &pred, &classes);
        for (m, (g, w)) in Metric::ALL.iter().zip(got.values().iter().zip(want)) {
            let d = (g - w).abs();
            worst = worst.max(d);
            ensure!(d <= 1e-9, "case {case} {}: {g} vs oracle {w}", m.name());
        }
        let acc = gold.iter().zip(&pred).filter(|(g, p)| g == p).count() as f64 / n as f64;
        ensure!(
            got.we_r == acc && got.accuracy() == acc,
            "case {case}: we_R {} != accuracy {acc}",
            got.we_r
        );
    }
    Ok(format!("1000 cases, max deviation {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 3. Perturbation invariants

const VOCAB: &[&str] = &[
    "Samsung", "lenovo", "ALC820", "phone", "case", "Cover", "the", "and", "for", "with", "16GB",
    "usb-c", "Mobile", "brown", "BLACK", "white", "wireless", "printer", "notebook", "screen",
    "cable,", "battery.", "a4", "x", "pro", "Keyboard", "monitor", "ink", "toner", "laser",
];

fn random_tokens(rng: &mut ChaCha8Rng) -> Vec<String> {
    let n = rng.random_range(1..=24);
    (0..n)
        .map(|_| {
            if rng.random_bool(0.8) {
                VOCAB[rng.random_range(0..VOCAB.len())].to_string()
            } else {
                format!("w{}", rng.random_range(0..500))
            }
        })
        .collect()
}

fn is_subsequence_at(out: &[String], input: &[String], kept: &[usize]) -> bool {
    kept.len() == out.len()
        && kept.windows(2).all(|w| w[0] < w[1])
        && kept
            .iter()
            .zip(out)
            .all(|(&i, t)| input.get(i).is_some_and(|x| x == t))
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let lex = AbbreviationLexicon::seed();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let corpus: Vec<String> = (0..300)
        .map(|_| random_tokens(&mut rng).join(" "))
        .collect();
    let fitted = ImportanceScorer::fit(corpus.iter().map(String::as_str));
    let plain = ImportanceScorer::new();

    for case in 0..10_000 {
        let raw = random_tokens(&mut rng);
        let x = TokenSequence::from_tokens(raw.iter());
        let cfg = PerturbationConfig {
            seed: rng.random(),
            lowercase_output: rng.random_bool(0.7),
            ..PerturbationConfig::default()
        };
        let scorer = if case % 2 == 0 { &fitted } else { &plain };
        let base: Vec<String> = if cfg.lowercase_output {
            raw.iter().map(|t| t.to_lowercase()).collect()
        } else {
            raw.clone()
        };
        let n = raw.len();

        let amp = amputate_with(&x, &cfg, scorer).map_err(|e| e.to_string())?;
        ensure!(
            is_subsequence_at(amp.tokens.tokens(), &base, &amp.kept_indices),
            "case {case}: amputation not an order-preserving subsequence of {raw:?}"
        );
        ensure!(
            amp.tokens.len() == n.min(5),
            "case {case}: amputation kept {} of {n}",
            amp.tokens.len()
        );
        if n <= 5 {
            ensure!(
                amp.tokens.tokens() == base.as_slice(),
                "case {case}: short input changed: {raw:?} -> {:?}",
                amp.tokens.tokens()
            );
        }

        let abb = abbreviate(&x, &lex, &cfg).map_err(|e| e.to_string())?;
        ensure!(
            abb.tokens.len() == n,
            "case {case}: abbreviation changed length"
        );
        let changed: Vec<usize> = (0..n)
            .filter(|&i| abb.tokens.tokens()[i] != base[i])
            .collect();
        let budget = n.div_ceil(5);
        ensure!(
            changed.len() <= budget && abb.abbreviated_indices.len() <= budget,
            "case {case}: {} tokens abbreviated, budget {budget}",
            changed.len()
        );
        for &i in &changed {
            ensure!(
                abb.abbreviated_indices.contains(&i)
                    && lex.abbreviate_token(&base[i]).as_deref()
                        == Some(abb.tokens.tokens()[i].as_str()),
                "case {case}: token {i} changed without a lexicon entry"
            );
        }

        let comb = combine_with(&x, &lex, &cfg, scorer).map_err(|e| e.to_string())?;
        let manual = abbreviate(&amp.tokens, &lex, &cfg).map_err(|e| e.to_string())?;
        ensure!(
            comb.tokens == manual.tokens && comb.kept_indices == amp.kept_indices,
            "case {case}: combined differs from abbreviate(amputate)"
        );

        let again = combine_with(&x, &lex, &cfg, scorer).map_err(|e| e.to_string())?;
        let abb_again = abbreviate(&x, &lex, &cfg).map_err(|e| e.to_string())?;
        ensure!(
            again.text().as_bytes() == comb.text().as_bytes()
                && abb_again.text().as_bytes() == abb.text().as_bytes(),
            "case {case}: same seed gave different output"
        );
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1}s (limit 30s)");
    Ok(format!("10000 sequences in {secs:.2}s"))
}

// ---------------------------------------------------------------------------
// 4. The worked example table

fn criterion_4() -> Outcome {
    let x = TokenSequence::from_text("Samsung ALC820 mobile phone case Cover Brown");
    let lex = AbbreviationLexicon::seed();
    ensure!(
        lex.get("mobile") == Some("mob.") && lex.get("brown") == Some("brwn"),
        "shipped lexicon lacks mobile/brown entries"
    );
    let cfg = PerturbationConfig::default();
    let scorer = ImportanceScorer::new();
    let rows = [
        (
            "Abbreviated",
            abbreviate(&x, &lex, &cfg)
                .map_err(|e| e.to_string())?
                .text(),
            "samsung alc820 mob. phone case cover brwn",
        ),
        (
            "Amputated",
            amputate_with(&x, &cfg, &scorer)
                .map_err(|e| e.to_string())?
                .text(),
            "samsung alc820 mobile phone case",
        ),
        (
            "Combined",
            combine_with(&x, &lex, &cfg, &scorer)
                .map_err(|e| e.to_string())?
                .text(),
            "samsung alc820 mob. phone case",
        ),
    ];
    for (name, got, want) in rows {
        ensure!(got == want, "{name}: got '{got}', want '{want}'");
    }
    Ok("Abbreviated, Amputated, Combined rows match".into())
}

// ---------------------------------------------------------------------------
// 5. Retrieval against a linear scan

fn brute_force_top_k(entries: &[IndexEntry], q: &[f32], k: usize) -> Vec<(String, f64)> {
    let norm = |v: &[f32]| v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    let qn = norm(q);
    let mut all: Vec<(String, f64)> = entries
        .iter()
        .map(|e| {
            let v = e.vector.values();
            let en = norm(v);
            let sim = if qn == 0.0 || en == 0.0 {
                0.0
            } else {
                let dot: f64 = v
                    .iter()
                    .zip(q)
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum();
                (dot / (qn * en)).clamp(-1.0, 1.0)
            };
            (e.id.clone(), sim)
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ties = 0usize;
    for case in 0..1000 {
        let dim = rng.random_range(1..=64);
        let size = rng.random_range(1..=500);
        // Small integer components make exact ties common.
        let span = if case % 3 == 0 { 1 } else { 5 };
        let random_vec = |rng: &mut ChaCha8Rng| -> Vec<f32> {
            (0..dim)
                .map(|_| rng.random_range(-span..=span) as f32)
                .collect()
        };
        let mut ids: Vec<usize> = (0..size).collect();
        ids.shuffle(&mut rng);
        let mut entries = Vec::with_capacity(size);
        for (i, id) in ids.into_iter().enumerate() {
            let v = if i > 0 && rng.random_bool(0.2) {
                let src: &IndexEntry = &entries[rng.random_range(0..i)];
                src.vector.values().to_vec()
            } else {
                random_vec(&mut rng)
            };
            entries.push(IndexEntry {
                id: format!("r{id:04}"),
                label: "L".into(),
                text: String::new(),
                vector: EmbeddingVector::new(v).map_err(|e| e.to_string())?,
            });
        }
        let index = EmbeddingIndex::new(dim, "test", entries.clone()).map_err(|e| e.to_string())?;
        let q = random_vec(&mut rng);
        let k = rng.random_range(0..=size + 3);
        let got = index
            .top_k_similar(&EmbeddingVector::new(q.clone()).unwrap(), k)
            .map_err(|e| e.to_string())?;
        let want = brute_force_top_k(&entries, &q, k);
        ensure!(
            got.len() == want.len(),
            "case {case}: {} results, want {}",
            got.len(),
            want.len()
        );
        for (g, (id, sim)) in got.iter().zip(&want) {
            ensure!(
                g.id == *id && (g.similarity - sim).abs() <= 1e-12,
                "case {case}: got {} ({}), want {id} ({sim})",
                g.id,
                g.similarity
            );
        }
        ties += want.windows(2).filter(|w| w[0].1 == w[1].1).count();
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(ties > 0, "no ties exercised");
    ensure!(secs < 10.0, "took {secs:.1}s (limit 10s)");
    Ok(format!("1000 indexes, {ties} tied neighbours, {secs:.2}s"))
}

// ---------------------------------------------------------------------------
// 6. KL divergence

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..2000 {
        let bins = rng.random_range(1..=12);
        let masses = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut v: Vec<f64> = (0..bins)
                .map(|_| {
                    if rng.random_bool(0.25) {
                        0.0
                    } else {
                        rng.random_range(0.0..1.0)
                    }
                })
                .collect();
            v[rng.random_range(0..bins)] += 0.5;
            v
        };
        let p = DistributionStats::from_masses(&masses(&mut rng)).map_err(|e| e.to_string())?;
        let q = DistributionStats::from_masses(&masses(&mut rng)).map_err(|e| e.to_string())?;
        let kl = compute_kl(&p, &q).map_err(|e| e.to_string())?;
        ensure!(kl >= 0.0 && kl.is_finite(), "case {case}: KL = {kl}");
        let self_kl = compute_kl(&p, &p).map_err(|e| e.to_string())?;
        ensure!(self_kl == 0.0, "case {case}: KL(p,p) = {self_kl}");
    }
    let p = DistributionStats::from_masses(&[0.9, 0.1]).unwrap();
    let q = DistributionStats::from_masses(&[0.5, 0.5]).unwrap();
    let kl = compute_kl(&p, &q).map_err(|e| e.to_string())?;
    let hand = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
    ensure!(
        (kl - 0.3681).abs() <= 1e-4 && (kl - hand).abs() <= 1e-12,
        "KL([0.9,0.1] || [0.5,0.5]) = {kl}"
    );
    let same = DistributionStats::from_masses(&[0.5, 0.5]).unwrap();
    ensure!(
        compute_kl(&same, &same).unwrap() == 0.0,
        "uniform self KL nonzero"
    );
    Ok(format!(
        "2000 random pairs non-negative, hand value {kl:.4}"
    ))
}

// ---------------------------------------------------------------------------
// 7. End-to-end determinism on the synthetic corpus

fn run_in(dir: &Path, toml: &str, overrides: &Overrides) -> Result<RunManifest, String> {
    common::write_corpus(dir);
    let path = dir.join("run.toml");
    std::fs::write(&path, toml).map_err(|e| e.to_string())?;
    let cfg = RunConfig::load(&path).map_err(|e| e.to_string())?;
    run_pipeline_with(&cfg, overrides).map_err(|e| e.to_string())
}

const ECHO_CELLS: &[(&str, &str, &str, bool)] = &[
    ("echo", "flat", "clean", false),
    ("echo", "flat", "abbreviated", false),
    ("echo", "flat", "amputated", false),
    ("echo", "flat", "combined", false),
    ("echo", "hierarchical", "clean", false),
    ("echo", "hierarchical", "combined", false),
    ("echo", "few-shot", "clean", false),
    ("echo", "few-shot", "combined", true),
];

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let toml = common::config_toml("out", ECHO_CELLS, "[backends.echo]\nkind = \"gold-echo\"\n");

    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ma = run_in(a.path(), &toml, &Overrides::default())?;
    let mb = run_in(b.path(), &toml, &Overrides::default())?;

    let report = load_report(&a.path().join("out")).map_err(|e| e.to_string())?;
    for block in &report.blocks {
        for row in &block.rows {
            ensure!(
                row.values[4] == 1.0 && row.n == 100,
                "gold echo {:?}/{}: we_R {} over {}",
                row.approach,
                row.attack,
                row.values[4],
                row.n
            );
        }
        let d = block
            .delta
            .as_ref()
            .ok_or("gold echo report has no delta row")?;
        ensure!(
            d.delta_r.values().iter().all(|v| *v == Some(0.0)),
            "gold echo delta_r {:?}",
            d.delta_r
        );
    }

    let (fa, fb) = (
        common::files_under(&a.path().join("out")),
        common::files_under(&b.path().join("out")),
    );
    ensure!(fa == fb, "runs produced different file sets");
    for f in fa.iter().filter(|f| f.as_str() != "manifest.json") {
        let x = std::fs::read(a.path().join("out").join(f)).unwrap();
        let y = std::fs::read(b.path().join("out").join(f)).unwrap();
        ensure!(x == y, "{f} differs between runs");
    }
    let shas = |m: &RunManifest| -> Vec<(String, String)> {
        m.artifacts
            .iter()
            .map(|r| (r.path.clone(), r.sha256.clone()))
            .collect()
    };
    ensure!(shas(&ma) == shas(&mb), "manifest artifact lists differ");
    let compared = fa.len() - 1;

    // Wrong answer whenever the text carries an abbreviation.
    let markers = common::abbreviation_markers();
    let test = common::records("p", 100);
    let m2 = markers.clone();
    let mock = Arc::new(MockBackend::from_fn("marker", &test, move |req, path| {
        if common::has_marker(req.product, &m2) {
            common::UNUSED_LEAF.to_string()
        } else {
            gold_answer(req, path)
        }
    }));
    let cells = [
        ("marker", "flat", "clean", false),
        ("marker", "flat", "combined", false),
    ];
    let c = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_in(
        c.path(),
        &common::config_toml("out", &cells, ""),
        &Overrides::default().classifier("marker", mock),
    )?;
    let out = c.path().join("out");

    let taxonomy = Taxonomy::load(&c.path().join("taxonomy.json")).map_err(|e| e.to_string())?;
    let file =
        std::fs::File::open(out.join("perturbed/combined.jsonl")).map_err(|e| e.to_string())?;
    let attacked =
        read_perturbed(std::io::BufReader::new(file), &taxonomy).map_err(|e| e.to_string())?;
    let n = attacked.len();
    let planted = attacked
        .iter()
        .filter(|r| {
            r.description
                .split_whitespace()
                .any(|t| markers.contains(&t.to_lowercase()))
        })
        .count();
    ensure!(n == 100, "attacked split has {n} records");
    ensure!(planted > 0, "no abbreviation markers planted");

    let report = load_report(&out).map_err(|e| e.to_string())?;
    let block = &report.blocks[0];
    ensure!(
        block.rows[0].values[4] == 1.0,
        "marker mock clean we_R {}",
        block.rows[0].values[4]
    );
    let d = block
        .delta
        .as_ref()
        .ok_or("marker report has no delta row")?;
    let got = d.delta_r.we_r.ok_or("delta_r we_R undefined")?;
    let want = planted as f64 / n as f64;
    ensure!(
        got > 0.0 && (got - want).abs() <= 1e-12,
        "delta_r(we_R) = {got}, planted {planted}/{n} = {want}"
    );

    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1}s (limit 30s)");
    Ok(format!(
        "gold echo exact over {} cells, {compared} artifacts byte-identical; marker delta_r(we_R) = {planted}/{n}; {secs:.2}s",
        ECHO_CELLS.len()
    ))
}

// ---------------------------------------------------------------------------
// 8. Prompt rendering against checked-in golden files

fn golden(name: &str) -> Result<String, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))
}

fn criterion_8() -> Outcome {
    let industry = "Telecom & Navigation";
    let desc = "Samsung ALC820 mobile phone case Cover Brown";
    let classes: Vec<String> = [
        "Warranty & Support Extensions",
        "Notebooks",
        "PCs/Workstations",
        "Tablets",
    ]
    .map(String::from)
    .to_vec();
    let examples = vec![
        FewShotExample {
            description: "lenovo ideapad 5 15 inch".into(),
            label: "Notebooks".into(),
        },
        FewShotExample {
            description: "apple ipad air 64gb".into(),
            label: "Tablets".into(),
        },
    ];
    let cases: Vec<(&str, String)> = vec![
        (
            "abbreviation_prompt.txt",
            render_perturbation_prompt(PromptKind::Abbreviation, industry, desc),
        ),
        (
            "amputation_prompt.txt",
            render_perturbation_prompt(PromptKind::Amputation, industry, desc),
        ),
        (
            "classify_flat.txt",
            render_classification_prompt(
                &PromptSpec::new(classes.clone()),
                "lenovo thinkpad x1 carbon 14 inch",
            ),
        ),
        (
            "classify_fewshot_reason.txt",
            render_classification_prompt(
                &PromptSpec::new(classes.clone())
                    .with_few_shot(examples)
                    .with_reason_note(true),
                "lenovo thinkpad x1",
            ),
        ),
        (
            "classify_completion.txt",
            render_classification_prompt(
                &PromptSpec::new(classes).with_completion_suffix(true),
                "dell optiplex 7010 tower",
            ),
        ),
    ];
    for (file, rendered) in &cases {
        let want = golden(file)?;
        if want != *rendered {
            let line = want
                .lines()
                .zip(rendered.lines())
                .position(|(a, b)| a != b)
                .map_or_else(|| "length".to_string(), |i| format!("line {}", i + 1));
            return Err(format!("{file}: first difference at {line}"));
        }
    }
    Ok(format!("{} golden prompts byte-identical", cases.len()))
}

fn main() {
    type Criterion = (u8, &'static str, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        (1, "delta_r reproduces published table", criterion_1),
        (2, "metrics match confusion-matrix oracle", criterion_2),
        (3, "perturbation invariants", criterion_3),
        (4, "worked attack example", criterion_4),
        (5, "top-k matches linear scan", criterion_5),
        (6, "KL properties", criterion_6),
        (7, "end-to-end determinism", criterion_7),
        (8, "prompt golden files", criterion_8),
    ];
    let mut failed = BTreeSet::new();
    let mut timings = BTreeMap::new();
    for (n, name, f) in criteria {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        timings.insert(n, t.elapsed());
        match outcome {
            Ok(detail) => println!("criterion {n} PASS {name}: {detail}"),
            Err(detail) => {
                println!("criterion {n} FAIL {name}: {detail}");
                failed.insert(n);
            }
        }
    }
    let total: f64 = timings.values().map(|d| d.as_secs_f64()).sum();
    println!(
        "acceptance: {} passed, {} failed ({total:.2}s)",
        8 - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
