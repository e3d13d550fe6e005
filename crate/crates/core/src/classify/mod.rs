//! Flat, hierarchical and few-shot classification over pluggable backends.

mod backend;
mod normalize;
mod prompt;

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ProductRecord, Taxonomy};
use crate::perturb::{AttackKind, PerturbedRecord};
use crate::retrieval::{EmbeddingBackend, EmbeddingIndex, RetrievalError};
use crate::util::{ordered_parallel_map, parse_header_line};
use crate::INVALID_LABEL;

pub use backend::{
    gold_answer, BackendError, ChatBackend, ClassificationRequest, ClassifierBackend, MockBackend,
    PredictionFileBackend, Stage,
};
pub use normalize::{
    fold, normalize_label, LabelNormalizer, MatchStage, Normalized, EMBEDDING_MATCH_THRESHOLD,
};
pub use prompt::{
    render_classification_prompt, FewShotExample, PromptSpec, CLASS_LIST_HEADER, COMPLETION_SUFFIX,
    FEW_SHOT_HEADER, HEADER, MAX_FEW_SHOT, OUTPUT_INSTRUCTION, REASON_NOTE,
};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("invalid prompt: {0}")]
    Prompt(String),
    #[error("taxonomy needs at least two levels below the root for hierarchical classification")]
    ShallowTaxonomy,
    #[error("few-shot classification needs an index and an embedding backend")]
    MissingIndex,
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("prediction file line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Approach {
    #[serde(rename = "flat")]
    Flat,
    #[serde(rename = "hierarchical", alias = "hier")]
    Hierarchical,
    #[serde(rename = "few-shot", alias = "fewshot")]
    FewShot,
}

impl Approach {
    pub const ALL: [Approach; 3] = [Approach::Flat, Approach::Hierarchical, Approach::FewShot];

    pub fn as_str(self) -> &'static str {
        match self {
            Approach::Flat => "flat",
            Approach::Hierarchical => "hierarchical",
            Approach::FewShot => "few-shot",
        }
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Approach {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flat" => Ok(Approach::Flat),
            "hier" | "hierarchical" => Ok(Approach::Hierarchical),
            "fewshot" | "few-shot" => Ok(Approach::FewShot),
            other => Err(format!("unknown approach '{other}'")),
        }
    }
}

/// One classification outcome with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    #[serde(rename = "id")]
    pub source_id: String,
    pub approach: Approach,
    pub attack: AttackKind,
    pub reason_note: bool,
    pub raw_output: String,
    /// A taxonomy leaf or [`INVALID_LABEL`].
    pub normalized_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level2_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level2_raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub match_stage: Option<MatchStage>,
    /// Hierarchical stage 1 failed and stage 2 ran over all leaves.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl PredictionRecord {
    pub fn is_invalid(&self) -> bool {
        self.normalized_label == INVALID_LABEL
    }
}

/// The text a classifier sees for one record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassificationInput {
    pub id: String,
    pub description: String,
    pub attack: AttackKind,
}

impl From<&ProductRecord> for ClassificationInput {
    fn from(r: &ProductRecord) -> Self {
        Self {
            id: r.id.clone(),
            description: r.description.clone(),
            attack: AttackKind::Clean,
        }
    }
}

impl From<&PerturbedRecord> for ClassificationInput {
    fn from(r: &PerturbedRecord) -> Self {
        Self {
            id: r.source_id.clone(),
            description: r.description.clone(),
            attack: r.attack,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassOrder {
    /// Depth-first taxonomy order.
    #[default]
    Taxonomy,
    Alphabetical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyOptions {
    pub reason_note: bool,
    pub completion_suffix: bool,
    pub class_order: ClassOrder,
    pub few_shot_k: usize,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        Self {
            reason_note: false,
            completion_suffix: false,
            class_order: ClassOrder::Taxonomy,
            few_shot_k: MAX_FEW_SHOT,
        }
    }
}

/// Outcome of one labelled call: raw text, resolution and any backend error.
struct CallOutcome {
    raw: String,
    normalized: Normalized,
    error: Option<BackendError>,
}

/// Results of a batch, plus how many calls failed at the transport level.
#[derive(Debug)]
pub struct ClassificationRun {
    pub predictions: Vec<PredictionRecord>,
    pub backend_failures: usize,
    pub exhausted: usize,
}

/// Drives one backend over one taxonomy.
pub struct Classifier<'a> {
    backend: &'a dyn ClassifierBackend,
    taxonomy: &'a Taxonomy,
    options: ClassifyOptions,
    leaves: Vec<String>,
    leaf_normalizer: LabelNormalizer<'a>,
    level2_normalizer: LabelNormalizer<'a>,
    few_shot: Option<(&'a EmbeddingIndex, &'a dyn EmbeddingBackend)>,
}

fn ordered(labels: &[String], order: ClassOrder) -> Vec<String> {
    let mut v = labels.to_vec();
    if order == ClassOrder::Alphabetical {
        v.sort();
    }
    v
}

impl<'a> Classifier<'a> {
    pub fn new(
        backend: &'a dyn ClassifierBackend,
        taxonomy: &'a Taxonomy,
        options: ClassifyOptions,
    ) -> Self {
        let leaves = ordered(taxonomy.leaves(), options.class_order);
        Self {
            backend,
            taxonomy,
            leaf_normalizer: LabelNormalizer::new(&leaves),
            level2_normalizer: LabelNormalizer::new(taxonomy.second_level()),
            leaves,
            options,
            few_shot: None,
        }
    }

    /// Enable the embedding rung of label normalization.
    pub fn with_label_embeddings(
        mut self,
        backend: &'a dyn EmbeddingBackend,
    ) -> Result<Self, ClassifyError> {
        self.leaf_normalizer = LabelNormalizer::new(&self.leaves).with_embeddings(backend)?;
        self.level2_normalizer =
            LabelNormalizer::new(self.taxonomy.second_level()).with_embeddings(backend)?;
        Ok(self)
    }

    /// Index of clean training examples for few-shot prompting.
    pub fn with_few_shot(
        mut self,
        index: &'a EmbeddingIndex,
        embedder: &'a dyn EmbeddingBackend,
    ) -> Self {
        self.few_shot = Some((index, embedder));
        self
    }

    pub fn options(&self) -> &ClassifyOptions {
        &self.options
    }

    fn spec(&self, classes: Vec<String>) -> PromptSpec {
        PromptSpec::new(classes)
            .with_reason_note(self.options.reason_note)
            .with_completion_suffix(self.options.completion_suffix)
    }

    fn call(
        &self,
        input: &ClassificationInput,
        stage: Stage,
        spec: &PromptSpec,
        product: &str,
        normalizer: &LabelNormalizer<'_>,
    ) -> CallOutcome {
        let prompt = render_classification_prompt(spec, product);
        let examples = spec.few_shot.as_deref().unwrap_or(&[]);
        let request = ClassificationRequest {
            record_id: &input.id,
            attack: input.attack,
            stage,
            prompt: &prompt,
            product,
            candidates: &spec.class_list,
            examples,
        };
        match self.backend.classify(&request) {
            Ok(raw) => {
                let normalized = normalizer.normalize(&raw);
                CallOutcome {
                    raw,
                    normalized,
                    error: None,
                }
            }
            Err(e) => CallOutcome {
                raw: String::new(),
                normalized: Normalized {
                    label: None,
                    stage: MatchStage::Invalid,
                },
                error: Some(e),
            },
        }
    }

    fn record(
        &self,
        input: &ClassificationInput,
        approach: Approach,
        outcome: CallOutcome,
    ) -> (PredictionRecord, Option<BackendError>) {
        let rec = PredictionRecord {
            source_id: input.id.clone(),
            approach,
            attack: input.attack,
            reason_note: self.options.reason_note,
            raw_output: outcome.raw,
            normalized_label: outcome
                .normalized
                .label
                .unwrap_or_else(|| INVALID_LABEL.to_string()),
            level2_label: None,
            level2_raw: None,
            match_stage: Some(outcome.normalized.stage),
            fallback: false,
            error: outcome.error.as_ref().map(ToString::to_string),
        };
        (rec, outcome.error)
    }

    /// Leaf prediction among all leaves in one call.
    pub fn classify_flat(&self, input: &ClassificationInput) -> PredictionRecord {
        self.flat_inner(input).0
    }

    fn flat_inner(&self, input: &ClassificationInput) -> (PredictionRecord, Option<BackendError>) {
        let spec = self.spec(self.leaves.clone());
        let out = self.call(
            input,
            Stage::Flat,
            &spec,
            &input.description,
            &self.leaf_normalizer,
        );
        self.record(input, Approach::Flat, out)
    }

    /// Second-level category first, then a leaf within that branch with the
    /// product text rewritten as `"description, category"`.
    pub fn classify_hierarchical(
        &self,
        input: &ClassificationInput,
    ) -> Result<PredictionRecord, ClassifyError> {
        Ok(self.hierarchical_inner(input)?.0)
    }

    fn hierarchical_inner(
        &self,
        input: &ClassificationInput,
    ) -> Result<(PredictionRecord, Option<BackendError>), ClassifyError> {
        if self.taxonomy.depth() < 2 {
            return Err(ClassifyError::ShallowTaxonomy);
        }
        let level2_spec = self.spec(ordered(
            self.taxonomy.second_level(),
            self.options.class_order,
        ));
        let first = self.call(
            input,
            Stage::Level2,
            &level2_spec,
            &input.description,
            &self.level2_normalizer,
        );
        let first_error = first.error;
        let level2_raw = first.raw;

        let (out, level2, fallback) = match first.normalized.label {
            Some(level2) => {
                let branch = ordered(
                    self.taxonomy
                        .leaves_under(&level2)
                        .expect("normalized to a second-level name"),
                    self.options.class_order,
                );
                let normalizer = LabelNormalizer::new(&branch);
                let product = format!("{}, {}", input.description, level2);
                let spec = self.spec(branch);
                let out = self.call(input, Stage::Branch, &spec, &product, &normalizer);
                (out, level2, false)
            }
            None => {
                let spec = self.spec(self.leaves.clone());
                let out = self.call(
                    input,
                    Stage::Flat,
                    &spec,
                    &input.description,
                    &self.leaf_normalizer,
                );
                (out, INVALID_LABEL.to_string(), true)
            }
        };
        let (mut rec, second_error) = self.record(input, Approach::Hierarchical, out);
        rec.level2_label = Some(level2);
        rec.level2_raw = Some(level2_raw);
        rec.fallback = fallback;
        let error = match (first_error, second_error) {
            (Some(e), _) | (None, Some(e)) => Some(e),
            (None, None) => None,
        };
        if let (Some(e), None) = (&error, &rec.error) {
            rec.error = Some(format!("stage 1: {e}"));
        }
        Ok((rec, error))
    }

    /// Flat call with the `k` most similar clean training examples, most
    /// similar first. The record's own id is never used as an example.
    pub fn classify_fewshot(
        &self,
        input: &ClassificationInput,
    ) -> Result<PredictionRecord, ClassifyError> {
        Ok(self.fewshot_inner(input)?.0)
    }

    pub fn few_shot_examples(
        &self,
        input: &ClassificationInput,
    ) -> Result<Vec<FewShotExample>, ClassifyError> {
        let (index, embedder) = self.few_shot.ok_or(ClassifyError::MissingIndex)?;
        let neighbors = index.query(
            embedder,
            &input.description,
            self.options.few_shot_k,
            Some(&input.id),
        )?;
        Ok(neighbors
            .into_iter()
            .map(|n| {
                let e = index.get(&n.id).expect("neighbor comes from the index");
                FewShotExample {
                    description: e.text.clone(),
                    label: e.label.clone(),
                }
            })
            .collect())
    }

    fn fewshot_inner(
        &self,
        input: &ClassificationInput,
    ) -> Result<(PredictionRecord, Option<BackendError>), ClassifyError> {
        let examples = if input.description.trim().is_empty() {
            Vec::new()
        } else {
            self.few_shot_examples(input)?
        };
        let spec = self.spec(self.leaves.clone()).with_few_shot(examples);
        spec.validate()?;
        let out = self.call(
            input,
            Stage::Flat,
            &spec,
            &input.description,
            &self.leaf_normalizer,
        );
        Ok(self.record(input, Approach::FewShot, out))
    }

    pub fn classify(
        &self,
        approach: Approach,
        input: &ClassificationInput,
    ) -> Result<PredictionRecord, ClassifyError> {
        Ok(self.dispatch(approach, input)?.0)
    }

    fn dispatch(
        &self,
        approach: Approach,
        input: &ClassificationInput,
    ) -> Result<(PredictionRecord, Option<BackendError>), ClassifyError> {
        match approach {
            Approach::Flat => Ok(self.flat_inner(input)),
            Approach::Hierarchical => self.hierarchical_inner(input),
            Approach::FewShot => self.fewshot_inner(input),
        }
    }

    /// Classify a batch on up to `parallelism` threads; results keep input order.
    pub fn classify_all(
        &self,
        approach: Approach,
        inputs: &[ClassificationInput],
        parallelism: usize,
    ) -> Result<ClassificationRun, ClassifyError> {
        if approach == Approach::Hierarchical && self.taxonomy.depth() < 2 {
            return Err(ClassifyError::ShallowTaxonomy);
        }
        if approach == Approach::FewShot && self.few_shot.is_none() {
            return Err(ClassifyError::MissingIndex);
        }
        let results = ordered_parallel_map(inputs, parallelism, |_, input| {
            self.dispatch(approach, input)
        });
        let mut predictions = Vec::with_capacity(inputs.len());
        let mut backend_failures = 0;
        let mut exhausted = 0;
        for r in results {
            let (rec, err) = r?;
            if let Some(e) = err {
                backend_failures += 1;
                if e.is_exhaustion() {
                    exhausted += 1;
                }
            }
            predictions.push(rec);
        }
        Ok(ClassificationRun {
            predictions,
            backend_failures,
            exhausted,
        })
    }
}

pub fn write_predictions<W: Write>(
    records: &[PredictionRecord],
    mut out: W,
) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(reader: R) -> Result<Vec<PredictionRecord>, ClassifyError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ClassifyError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() || (i == 0 && parse_header_line(&line).is_some()) {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| ClassifyError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}
