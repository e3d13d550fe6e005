//! Run configuration, the end-to-end pipeline and report emission.

mod config;
mod report;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{
    read_predictions, write_predictions, Approach, ChatBackend, ClassificationInput, Classifier,
    ClassifierBackend, ClassifyOptions, MockBackend, PredictionFileBackend, PredictionRecord,
};
use crate::corpus::{
    load_dataset, read_dataset, stratified_sample, write_dataset, DatasetSplit, ProductRecord,
    SplitRole, Taxonomy,
};
use crate::llm::{ChatClient, HttpChatClient, LlmError};
use crate::metrics::{
    compute_delta_r, compute_kl, compute_prf_with, DistributionStats, MetricsReport,
    RobustnessReport,
};
use crate::perturb::{
    llm_perturb_many, perturb_split, read_perturbed, write_perturbed, AbbreviationLexicon,
    AttackKind, PerturbError, PerturbationMode, PerturbedRecord,
};
use crate::retrieval::{
    mean_pairwise_similarity, EmbeddingBackend, EmbeddingIndex, HashedBagBackend,
    HttpEmbeddingBackend,
};
use crate::util::{header_line, sha256_hex, ArtifactHeader};

pub use config::{
    BackendConfig, CellConfig, ClassifySettings, EmbeddingSettings, MetricsSettings,
    PerturbationSettings, RunConfig,
};
pub use report::{emit_report, CellResult, DeltaRow, ModelBlock, Report, ReportRow};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage '{stage}' failed: {message}")]
    Stage { stage: String, message: String },
    #[error("backend exhausted its retries in stage '{stage}': {message}")]
    Exhausted { stage: String, message: String },
}

impl PipelineError {
    /// Process exit code: 1 validation, 2 stage failure, 3 backend exhaustion.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Stage { .. } => 2,
            PipelineError::Exhausted { .. } => 3,
        }
    }

    fn stage(stage: &str, e: impl std::fmt::Display) -> Self {
        PipelineError::Stage {
            stage: stage.to_string(),
            message: e.to_string(),
        }
    }
}

/// Backends supplied in code; they take precedence over config entries
/// with the same name.
#[derive(Default, Clone)]
pub struct Overrides {
    pub classifiers: BTreeMap<String, Arc<dyn ClassifierBackend>>,
    pub chat: BTreeMap<String, Arc<dyn ChatClient>>,
    pub embedding: Option<Arc<dyn EmbeddingBackend>>,
}

impl Overrides {
    pub fn classifier(
        mut self,
        name: impl Into<String>,
        backend: Arc<dyn ClassifierBackend>,
    ) -> Self {
        self.classifiers.insert(name.into(), backend);
        self
    }

    pub fn chat(mut self, name: impl Into<String>, client: Arc<dyn ChatClient>) -> Self {
        self.chat.insert(name.into(), client);
        self
    }

    fn names(&self) -> BTreeSet<String> {
        self.classifiers
            .keys()
            .chain(self.chat.keys())
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub stage: String,
    pub cache_key: String,
    /// Reused from an earlier run instead of recomputed.
    pub cached: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSummary {
    pub id: String,
    pub n: usize,
    pub invalid: usize,
    pub fallback: usize,
    pub backend_failures: usize,
    pub exhausted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub millis: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config: RunConfig,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub artifacts: Vec<ArtifactRecord>,
    pub cells: Vec<CellSummary>,
    /// Attacked records flagged degraded, per attack.
    pub degraded: BTreeMap<String, usize>,
    pub timing: Vec<StageTiming>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Option<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn exhausted(&self) -> usize {
        self.cells.iter().map(|c| c.exhausted).sum()
    }

    pub fn artifact(&self, path: &str) -> Option<&ArtifactRecord> {
        self.artifacts.iter().find(|a| a.path == path)
    }
}

/// JSON artifact wrapper carrying the run header.
#[derive(Serialize, Deserialize)]
struct Wrapped<T> {
    header: ArtifactHeader,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize, Deserialize)]
struct MetricsFile {
    cell: CellConfig,
    report: MetricsReport,
}

#[derive(Serialize, Deserialize)]
struct RobustnessFile {
    cell: CellConfig,
    baseline: CellConfig,
    robustness: RobustnessReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackDiagnostics {
    pub attack: AttackKind,
    /// KL(attacked ‖ clean) over token-count histograms, in nats.
    pub kl_vs_clean: f64,
    pub mean_similarity: f64,
    pub clean_histogram: DistributionStats,
    pub attacked_histogram: DistributionStats,
}

fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("artifact serializes");
    v.push(b'\n');
    v
}

fn jsonl_with_header(header: &ArtifactHeader, body: Vec<u8>) -> Vec<u8> {
    let mut out = header_line(header).into_bytes();
    out.push(b'\n');
    out.extend(body);
    out
}

fn key_of(parts: &[&str]) -> String {
    sha256_hex(parts.join("\u{1f}").as_bytes())
}

struct Run<'a> {
    config: &'a RunConfig,
    dir: PathBuf,
    previous: HashMap<String, ArtifactRecord>,
    artifacts: Vec<ArtifactRecord>,
    timing: Vec<StageTiming>,
}

impl Run<'_> {
    fn header(&self, kind: &str, note: Option<String>) -> ArtifactHeader {
        ArtifactHeader {
            kind: kind.to_string(),
            seed: self.config.seed,
            note,
        }
    }

    /// Return the artifact's bytes, reusing the file from an earlier run when
    /// its cache key and checksum still match.
    fn artifact(
        &mut self,
        rel: &str,
        stage: &str,
        key: String,
        produce: impl FnOnce() -> Result<Vec<u8>, PipelineError>,
    ) -> Result<Vec<u8>, PipelineError> {
        let path = self.dir.join(rel);
        if let Some(prev) = self.previous.get(rel) {
            if prev.cache_key == key {
                if let Ok(bytes) = std::fs::read(&path) {
                    if sha256_hex(&bytes) == prev.sha256 {
                        tracing::info!(artifact = rel, "cached");
                        self.artifacts.push(ArtifactRecord {
                            cached: true,
                            ..prev.clone()
                        });
                        return Ok(bytes);
                    }
                }
            }
        }
        let bytes = produce()?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| PipelineError::stage(stage, e))?;
        }
        std::fs::write(&path, &bytes)
            .map_err(|e| PipelineError::stage(stage, format!("{}: {e}", path.display())))?;
        tracing::info!(artifact = rel, "written");
        self.artifacts.push(ArtifactRecord {
            path: rel.to_string(),
            sha256: sha256_hex(&bytes),
            stage: stage.to_string(),
            cache_key: key,
            cached: false,
        });
        Ok(bytes)
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let t = Instant::now();
        let out = f(self);
        self.timing.push(StageTiming {
            stage: stage.to_string(),
            millis: t.elapsed().as_millis(),
        });
        out
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Config(format!("{}: {e}", path.display()))
}

pub fn build_embedder(
    cfg: &RunConfig,
    o: &Overrides,
) -> Result<Arc<dyn EmbeddingBackend>, PipelineError> {
    if let Some(e) = &o.embedding {
        return Ok(e.clone());
    }
    Ok(match &cfg.embedding {
        EmbeddingSettings::Hashed { dimension } => Arc::new(HashedBagBackend::new(*dimension)),
        EmbeddingSettings::Http(c) => Arc::new(
            HttpEmbeddingBackend::new(c.clone())
                .map_err(|e| PipelineError::Config(e.to_string()))?,
        ),
    })
}

pub fn chat_client(
    cfg: &RunConfig,
    o: &Overrides,
    name: &str,
) -> Result<Arc<dyn ChatClient>, PipelineError> {
    if let Some(c) = o.chat.get(name) {
        return Ok(c.clone());
    }
    match cfg.backends.get(name) {
        Some(BackendConfig::Chat { chat, .. }) => Ok(Arc::new(
            HttpChatClient::new(chat.clone())
                .map_err(|e| PipelineError::Config(format!("backend '{name}': {e}")))?,
        )),
        _ => Err(PipelineError::Config(format!(
            "'{name}' is not a chat backend"
        ))),
    }
}

/// Instantiate the named classifier backend for one attack. `records` are
/// the gold records a gold-echo backend answers from.
pub fn classifier_backend(
    cfg: &RunConfig,
    overrides: &Overrides,
    name: &str,
    attack: AttackKind,
    records: &[ProductRecord],
) -> Result<Arc<dyn ClassifierBackend>, PipelineError> {
    if let Some(b) = overrides.classifiers.get(name) {
        return Ok(b.clone());
    }
    match cfg.backends.get(name) {
        Some(BackendConfig::Chat { .. }) => {
            let client = chat_client(cfg, overrides, name)?;
            Ok(Arc::new(ChatBackend::new(
                name,
                Box::new(SharedChat(client)),
            )))
        }
        Some(BackendConfig::PredictionFile { path }) => Ok(Arc::new(
            PredictionFileBackend::load(name, path, Some(attack))
                .map_err(|e| PipelineError::stage("classify", e))?,
        )),
        Some(BackendConfig::GoldEcho) => Ok(Arc::new(MockBackend::gold_echo(records))),
        None => Err(PipelineError::Config(format!("undefined backend '{name}'"))),
    }
}

/// Text a backend's configuration contributes to cache keys. Holds no secrets.
fn backend_fingerprint(cfg: &RunConfig, o: &Overrides, name: &str) -> String {
    if let Some(b) = o.classifiers.get(name) {
        return format!("injected:{}", b.name());
    }
    if o.chat.contains_key(name) {
        return format!("injected-chat:{name}");
    }
    match cfg.backends.get(name) {
        Some(BackendConfig::PredictionFile { path }) => {
            format!(
                "prediction-file:{}",
                std::fs::read(path)
                    .map(|b| sha256_hex(&b))
                    .unwrap_or_default()
            )
        }
        Some(b) => serde_json::to_string(b).unwrap_or_default(),
        None => String::new(),
    }
}

/// Check the config and load its inputs without running anything; returns
/// the artifact paths a run would produce.
pub fn plan(config: &RunConfig, overrides: &Overrides) -> Result<Vec<String>, PipelineError> {
    config.validate(&overrides.names())?;
    let taxonomy = Taxonomy::load(&config.taxonomy).map_err(|e| io_err(&config.taxonomy, e))?;
    load_dataset(&config.test, &taxonomy, SplitRole::Test).map_err(|e| io_err(&config.test, e))?;
    if let Some(t) = &config.train {
        load_dataset(t, &taxonomy, SplitRole::Train).map_err(|e| io_err(t, e))?;
    }
    if config
        .cells
        .iter()
        .any(|c| c.approach == Approach::Hierarchical)
        && taxonomy.depth() < 2
    {
        return Err(PipelineError::Config(
            "hierarchical cells need at least two taxonomy levels below the root".into(),
        ));
    }
    let mut out = Vec::new();
    if config.sample_size.is_some() {
        out.push("test_sample.jsonl".to_string());
    }
    for a in config.attacks() {
        out.push(format!("perturbed/{a}.jsonl"));
    }
    if !config.attacks().is_empty() {
        out.push("diagnostics.json".into());
    }
    if config.cells.iter().any(|c| c.approach == Approach::FewShot) {
        out.push("index_train.jsonl".into());
    }
    for c in &config.cells {
        out.push(format!("predictions/{}.jsonl", c.id()));
        out.push(format!("metrics/{}.json", c.id()));
    }
    out.extend(["report.txt", "report.csv", "report.json"].map(String::from));
    Ok(out)
}

pub fn run_pipeline(config: &RunConfig) -> Result<RunManifest, PipelineError> {
    run_pipeline_with(config, &Overrides::default())
}

/// Run every stage, writing artifacts and `manifest.json` under
/// `config.output_dir`. On a stage failure the manifest lists what was
/// produced so far and has status `failed`.
pub fn run_pipeline_with(
    config: &RunConfig,
    overrides: &Overrides,
) -> Result<RunManifest, PipelineError> {
    plan(config, overrides)?;
    std::fs::create_dir_all(&config.output_dir).map_err(|e| io_err(&config.output_dir, e))?;
    let previous_manifest = RunManifest::load(&config.output_dir);
    let previous: HashMap<String, ArtifactRecord> = previous_manifest
        .as_ref()
        .map(|m| {
            m.artifacts
                .iter()
                .map(|a| (a.path.clone(), a.clone()))
                .collect()
        })
        .unwrap_or_default();
    let previous_cells: HashMap<String, CellSummary> = previous_manifest
        .map(|m| m.cells.into_iter().map(|c| (c.id.clone(), c)).collect())
        .unwrap_or_default();

    let mut run = Run {
        config,
        dir: config.output_dir.clone(),
        previous,
        artifacts: Vec::new(),
        timing: Vec::new(),
    };
    let mut cells = Vec::new();
    let mut degraded = BTreeMap::new();
    let result = execute(
        &mut run,
        overrides,
        &previous_cells,
        &mut cells,
        &mut degraded,
    );

    // Drop files an earlier run produced that this run did not.
    let kept: BTreeSet<&str> = run.artifacts.iter().map(|a| a.path.as_str()).collect();
    if result.is_ok() {
        for stale in run.previous.keys().filter(|p| !kept.contains(p.as_str())) {
            let _ = std::fs::remove_file(run.dir.join(stale));
        }
    }
    let manifest = RunManifest {
        seed: config.seed,
        config: config.clone(),
        status: if result.is_ok() { "complete" } else { "failed" }.to_string(),
        error: result.as_ref().err().map(ToString::to_string),
        artifacts: run.artifacts,
        cells,
        degraded,
        timing: run.timing,
    };
    let bytes = to_json_bytes(&manifest);
    std::fs::write(run.dir.join(MANIFEST_FILE), bytes)
        .map_err(|e| PipelineError::stage("manifest", e))?;
    result.map(|_| manifest)
}

fn execute(
    run: &mut Run<'_>,
    overrides: &Overrides,
    previous_cells: &HashMap<String, CellSummary>,
    cells_out: &mut Vec<CellSummary>,
    degraded_out: &mut BTreeMap<String, usize>,
) -> Result<(), PipelineError> {
    let cfg = run.config;
    let taxonomy = Taxonomy::load(&cfg.taxonomy).map_err(|e| io_err(&cfg.taxonomy, e))?;
    let test_bytes = std::fs::read(&cfg.test).map_err(|e| io_err(&cfg.test, e))?;
    let full_test = read_dataset(test_bytes.as_slice(), &taxonomy, SplitRole::Test, "test")
        .map_err(|e| io_err(&cfg.test, e))?;
    let taxonomy_key = sha256_hex(taxonomy.to_json().as_bytes());
    let seed = cfg.seed.to_string();

    // Sampling.
    let (test, test_key): (DatasetSplit, String) = match cfg.sample_size {
        None => (full_test, sha256_hex(&test_bytes)),
        Some(n) => {
            let key = key_of(&[
                "sample",
                &sha256_hex(&test_bytes),
                &taxonomy_key,
                &n.to_string(),
                &seed,
            ]);
            let header = run.header("dataset", Some(format!("stratified sample of {n}")));
            let bytes = run.time("sample", |r| {
                r.artifact("test_sample.jsonl", "sample", key, || {
                    let s = stratified_sample(&full_test, n, cfg.seed)
                        .map_err(|e| PipelineError::stage("sample", e))?;
                    let mut body = Vec::new();
                    write_dataset(&s, &mut body).map_err(|e| PipelineError::stage("sample", e))?;
                    Ok(jsonl_with_header(&header, body))
                })
            })?;
            let split = read_dataset(bytes.as_slice(), &taxonomy, SplitRole::Test, "test_sample")
                .map_err(|e| PipelineError::stage("sample", e))?;
            (split, sha256_hex(&bytes))
        }
    };

    // Perturbation.
    let lexicon = match &cfg.perturbation.lexicon {
        Some(p) => AbbreviationLexicon::load(p).map_err(|e| io_err(p, e))?,
        None => AbbreviationLexicon::seed(),
    }
    .with_rule_fallback(cfg.perturbation.rule_fallback);
    let op_cfg = cfg.perturbation.operator_config(cfg.seed);
    let perturb_key_base = key_of(&[
        &test_key,
        &serde_json::to_string(&op_cfg).unwrap_or_default(),
        &lexicon.to_tsv(),
        &lexicon.rule_fallback().to_string(),
        &match (&cfg.perturbation.mode, &cfg.perturbation.backend) {
            (PerturbationMode::Llm, Some(b)) => backend_fingerprint(cfg, overrides, b),
            _ => String::new(),
        },
    ]);
    let mut attacked: BTreeMap<AttackKind, (Vec<PerturbedRecord>, String)> = BTreeMap::new();
    let attacks = cfg.attacks();
    let perturb_client = match cfg.perturbation.mode {
        PerturbationMode::Llm => Some(chat_client(
            cfg,
            overrides,
            cfg.perturbation.backend.as_deref().unwrap_or_default(),
        )?),
        PerturbationMode::Deterministic => None,
    };
    for attack in attacks {
        let rel = format!("perturbed/{attack}.jsonl");
        let key = key_of(&["perturb", &perturb_key_base, attack.as_str()]);
        let header = run.header("perturbed", Some(attack.to_string()));
        let client = perturb_client.clone();
        let bytes = run.time(&format!("perturb:{attack}"), |r| {
            r.artifact(&rel, "perturb", key, || {
                let records = match &client {
                    None => perturb_split(&test, attack, &lexicon, &op_cfg)
                        .map_err(|e| PipelineError::stage("perturb", e))?,
                    Some(c) => llm_perturb_many(
                        &test.records,
                        attack,
                        c.as_ref(),
                        &lexicon,
                        &op_cfg,
                        cfg.parallelism,
                    )
                    .into_iter()
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| match e {
                        PerturbError::Llm(l @ LlmError::Exhausted { .. }) => {
                            PipelineError::Exhausted {
                                stage: "perturb".into(),
                                message: l.to_string(),
                            }
                        }
                        other => PipelineError::stage("perturb", other),
                    })?,
                };
                let mut body = Vec::new();
                write_perturbed(&records, &mut body)
                    .map_err(|e| PipelineError::stage("perturb", e))?;
                Ok(jsonl_with_header(&header, body))
            })
        })?;
        let records = read_perturbed(bytes.as_slice(), &taxonomy)
            .map_err(|e| PipelineError::stage("perturb", e))?;
        degraded_out.insert(
            attack.to_string(),
            records.iter().filter(|r| r.degraded).count(),
        );
        attacked.insert(attack, (records, sha256_hex(&bytes)));
    }

    let embedder = build_embedder(cfg, overrides)?;

    // Distribution and similarity diagnostics.
    if !attacked.is_empty() {
        let key = key_of(&[
            "diagnostics",
            &test_key,
            &embedder.fingerprint(),
            &attacked
                .values()
                .map(|(_, k)| k.as_str())
                .collect::<Vec<_>>()
                .join(","),
        ]);
        let header = run.header(
            "diagnostics",
            Some("KL in nats, KL(attacked || clean)".into()),
        );
        let emb = embedder.clone();
        let attacked_ref = &attacked;
        run.time("diagnostics", |r| {
            r.artifact("diagnostics.json", "diagnostics", key, || {
                let clean_hist = DistributionStats::from_texts(
                    test.records.iter().map(|r| r.description.as_str()),
                )
                .map_err(|e| PipelineError::stage("diagnostics", e))?;
                let mut diags = Vec::new();
                for (attack, (records, _)) in attacked_ref {
                    let mut hist = DistributionStats::from_counts(
                        records
                            .iter()
                            .map(|r| r.description.split_whitespace().count()),
                    )
                    .map_err(|e| PipelineError::stage("diagnostics", e))?;
                    let kl = compute_kl(&hist, &clean_hist)
                        .map_err(|e| PipelineError::stage("diagnostics", e))?;
                    hist.kl_vs_clean = Some(kl);
                    let sim = mean_pairwise_similarity(&test.records, records, emb.as_ref())
                        .map_err(|e| PipelineError::stage("diagnostics", e))?;
                    diags.push(AttackDiagnostics {
                        attack: *attack,
                        kl_vs_clean: kl,
                        mean_similarity: sim,
                        clean_histogram: clean_hist.clone(),
                        attacked_histogram: hist,
                    });
                }
                Ok(to_json_bytes(&Wrapped {
                    header,
                    body: serde_json::json!({ "attacks": diags }),
                }))
            })
        })?;
    }

    // Few-shot index.
    let index = if cfg.cells.iter().any(|c| c.approach == Approach::FewShot) {
        let train_path = cfg.train.as_ref().expect("validated");
        let train_bytes = std::fs::read(train_path).map_err(|e| io_err(train_path, e))?;
        let train = read_dataset(train_bytes.as_slice(), &taxonomy, SplitRole::Train, "train")
            .map_err(|e| io_err(train_path, e))?;
        let key = key_of(&["index", &sha256_hex(&train_bytes), &embedder.fingerprint()]);
        let emb = embedder.clone();
        let bytes = run.time("index", |r| {
            r.artifact("index_train.jsonl", "index", key, || {
                let idx = EmbeddingIndex::build(&train.records, emb.as_ref(), cfg.parallelism)
                    .map_err(|e| PipelineError::stage("index", e))?;
                let mut out = Vec::new();
                idx.write_with_seed(&mut out, Some(cfg.seed))
                    .map_err(|e| PipelineError::stage("index", e))?;
                Ok(out)
            })
        })?;
        Some((
            EmbeddingIndex::read(bytes.as_slice()).map_err(|e| PipelineError::stage("index", e))?,
            sha256_hex(&bytes),
        ))
    } else {
        None
    };

    // Classification and scoring.
    let gold: HashMap<&str, &str> = test
        .records
        .iter()
        .map(|r| (r.id.as_str(), r.leaf_label.as_str()))
        .collect();
    let mut results = Vec::new();
    let mut exhausted_cells = Vec::new();
    for cell in &cfg.cells {
        let id = cell.id();
        let (inputs, input_key): (Vec<ClassificationInput>, String) = match cell.attack {
            AttackKind::Clean => (
                test.records.iter().map(Into::into).collect(),
                test_key.clone(),
            ),
            a => {
                let (recs, k) = &attacked[&a];
                (recs.iter().map(Into::into).collect(), k.clone())
            }
        };
        let completion_suffix = matches!(
            cfg.backends.get(&cell.backend),
            Some(BackendConfig::Chat {
                completion_suffix: true,
                ..
            })
        ) && !overrides.classifiers.contains_key(&cell.backend);
        let options = ClassifyOptions {
            reason_note: cell.reason_note,
            completion_suffix,
            class_order: cfg.classify.class_order,
            few_shot_k: cfg.classify.few_shot_k,
        };
        let key = key_of(&[
            "classify",
            &input_key,
            &taxonomy_key,
            &backend_fingerprint(cfg, overrides, &cell.backend),
            &serde_json::to_string(&(cell, &options, cfg.classify.label_embeddings))
                .unwrap_or_default(),
            &embedder.fingerprint(),
            index
                .as_ref()
                .filter(|_| cell.approach == Approach::FewShot)
                .map_or("", |(_, k)| k.as_str()),
        ]);
        let header = run.header("predictions", Some(id.clone()));
        let mut summary = CellSummary {
            id: id.clone(),
            n: inputs.len(),
            ..CellSummary::default()
        };
        let mut produced = false;
        let rel = format!("predictions/{id}.jsonl");
        let bytes = {
            let summary = &mut summary;
            let produced = &mut produced;
            let taxonomy = &taxonomy;
            let test = &test;
            let index = &index;
            let embedder = &embedder;
            let inputs = &inputs;
            run.time(&format!("classify:{id}"), |r| {
                r.artifact(&rel, "classify", key, || {
                    *produced = true;
                    let backend = classifier_backend(
                        cfg,
                        overrides,
                        &cell.backend,
                        cell.attack,
                        &test.records,
                    )?;
                    let mut classifier =
                        Classifier::new(backend.as_ref(), taxonomy, options.clone());
                    if cfg.classify.label_embeddings {
                        classifier = classifier
                            .with_label_embeddings(embedder.as_ref())
                            .map_err(|e| PipelineError::stage("classify", e))?;
                    }
                    if let Some((idx, _)) = index {
                        classifier = classifier.with_few_shot(idx, embedder.as_ref());
                    }
                    let out = classifier
                        .classify_all(cell.approach, inputs, cfg.parallelism)
                        .map_err(|e| PipelineError::stage("classify", e))?;
                    summary.backend_failures = out.backend_failures;
                    summary.exhausted = out.exhausted;
                    let mut body = Vec::new();
                    write_predictions(&out.predictions, &mut body)
                        .map_err(|e| PipelineError::stage("classify", e))?;
                    Ok(jsonl_with_header(&header, body))
                })
            })?
        };
        let predictions: Vec<PredictionRecord> =
            read_predictions(bytes.as_slice()).map_err(|e| PipelineError::stage("classify", e))?;
        summary.invalid = predictions.iter().filter(|p| p.is_invalid()).count();
        summary.fallback = predictions.iter().filter(|p| p.fallback).count();
        if !produced {
            if let Some(prev) = previous_cells.get(&id) {
                summary.backend_failures = prev.backend_failures;
                summary.exhausted = prev.exhausted;
            } else {
                summary.backend_failures = predictions.iter().filter(|p| p.error.is_some()).count();
            }
        }
        if summary.exhausted > 0 {
            exhausted_cells.push(id.clone());
        }

        if predictions.len() != test.len() {
            return Err(PipelineError::stage(
                "metrics",
                format!(
                    "{id}: {} predictions for {} records",
                    predictions.len(),
                    test.len()
                ),
            ));
        }
        let mut gold_labels = Vec::with_capacity(predictions.len());
        for p in &predictions {
            gold_labels.push(*gold.get(p.source_id.as_str()).ok_or_else(|| {
                PipelineError::stage(
                    "metrics",
                    format!("{id}: prediction for unknown id '{}'", p.source_id),
                )
            })?);
        }
        let pred_labels: Vec<&str> = predictions
            .iter()
            .map(|p| p.normalized_label.as_str())
            .collect();
        let report = compute_prf_with(
            &gold_labels,
            &pred_labels,
            taxonomy.leaves(),
            cfg.metrics.macro_scope,
        )
        .map_err(|e| PipelineError::stage("metrics", e))?;
        let file = Wrapped {
            header: run.header("metrics", Some(id.clone())),
            body: MetricsFile {
                cell: cell.clone(),
                report: report.clone(),
            },
        };
        let metrics_bytes = to_json_bytes(&file);
        run.artifact(
            &format!("metrics/{id}.json"),
            "metrics",
            sha256_hex(&metrics_bytes),
            || Ok(metrics_bytes.clone()),
        )?;
        cells_out.push(summary);
        results.push(CellResult {
            cell: cell.clone(),
            metrics: report,
        });
    }

    // Robustness against each attacked cell's clean baseline.
    for r in results
        .iter()
        .filter(|r| r.cell.attack != AttackKind::Clean)
    {
        let baseline = results
            .iter()
            .filter(|c| {
                c.cell.backend == r.cell.backend
                    && c.cell.approach == r.cell.approach
                    && c.cell.attack == AttackKind::Clean
            })
            .min_by_key(|c| c.cell.reason_note);
        let Some(baseline) = baseline else { continue };
        let rob = compute_delta_r(&baseline.metrics, &r.metrics);
        let id = r.cell.id();
        let file = Wrapped {
            header: run.header("robustness", Some(id.clone())),
            body: RobustnessFile {
                cell: r.cell.clone(),
                baseline: baseline.cell.clone(),
                robustness: rob,
            },
        };
        let bytes = to_json_bytes(&file);
        run.artifact(
            &format!("robustness/{id}.json"),
            "robustness",
            sha256_hex(&bytes),
            || Ok(bytes.clone()),
        )?;
    }

    // Report.
    let report = emit_report(cfg.seed, &results);
    for (rel, bytes) in [
        ("report.txt", report.to_text().into_bytes()),
        ("report.csv", report.to_csv().into_bytes()),
        ("report.json", to_json_bytes(&report)),
    ] {
        run.artifact(rel, "report", sha256_hex(&bytes), || Ok(bytes.clone()))?;
    }

    if !exhausted_cells.is_empty() {
        return Err(PipelineError::Exhausted {
            stage: "classify".into(),
            message: format!(
                "cells with exhausted requests: {}",
                exhausted_cells.join(", ")
            ),
        });
    }
    Ok(())
}

/// Lets an `Arc`-shared chat client back a [`ChatBackend`].
struct SharedChat(Arc<dyn ChatClient>);

impl ChatClient for SharedChat {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        self.0.complete(prompt)
    }

    fn model(&self) -> &str {
        self.0.model()
    }
}

/// Rebuild the report from the metrics files of a finished run.
pub fn load_report(dir: &Path) -> Result<Report, PipelineError> {
    let manifest = RunManifest::load(dir).ok_or_else(|| {
        PipelineError::Config(format!("no readable {MANIFEST_FILE} in {}", dir.display()))
    })?;
    let mut results = Vec::new();
    for a in manifest.artifacts.iter().filter(|a| a.stage == "metrics") {
        let path = dir.join(&a.path);
        let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let f: Wrapped<MetricsFile> = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
        results.push(CellResult {
            cell: f.body.cell,
            metrics: f.body.report,
        });
    }
    Ok(emit_report(manifest.seed, &results))
}

/// Read a metrics artifact written by the pipeline or `metrics score`.
pub fn read_metrics_file(path: &Path) -> Result<MetricsReport, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| io_err(path, e))?;
    let report = v.get("report").cloned().unwrap_or(v);
    serde_json::from_value(report).map_err(|e| io_err(path, e))
}
