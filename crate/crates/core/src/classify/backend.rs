use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::Deserialize;
use thiserror::Error;

use super::prompt::FewShotExample;
use crate::corpus::ProductRecord;
use crate::llm::{ChatClient, LlmError};
use crate::perturb::AttackKind;
use crate::util::parse_header_line;

/// Which decision a backend call is making.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Leaf among all taxonomy leaves.
    Flat,
    /// Second-level category (hierarchical stage 1).
    Level2,
    /// Leaf among the leaves of one second-level branch (hierarchical stage 2).
    Branch,
}

/// Everything a backend may look at for one call.
#[derive(Debug, Clone, Copy)]
pub struct ClassificationRequest<'a> {
    pub record_id: &'a str,
    pub attack: AttackKind,
    pub stage: Stage,
    pub prompt: &'a str,
    pub product: &'a str,
    pub candidates: &'a [String],
    pub examples: &'a [FewShotExample],
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("no prediction for record '{0}'")]
    MissingPrediction(String),
    #[error("{0}")]
    Other(String),
}

impl BackendError {
    /// The backend could not be reached even after retries.
    pub fn is_exhaustion(&self) -> bool {
        matches!(self, BackendError::Llm(LlmError::Exhausted { .. }))
    }
}

pub trait ClassifierBackend: Send + Sync {
    /// Name of the model block this backend reports under.
    fn name(&self) -> &str;

    fn classify(&self, request: &ClassificationRequest<'_>) -> Result<String, BackendError>;
}

/// Sends the rendered prompt to a chat model.
pub struct ChatBackend {
    name: String,
    client: Box<dyn ChatClient>,
}

impl ChatBackend {
    pub fn new(name: impl Into<String>, client: Box<dyn ChatClient>) -> Self {
        Self {
            name: name.into(),
            client,
        }
    }
}

impl ClassifierBackend for ChatBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn classify(&self, request: &ClassificationRequest<'_>) -> Result<String, BackendError> {
        Ok(self.client.complete(request.prompt)?)
    }
}

#[derive(Deserialize)]
struct PredictionLine {
    id: String,
    #[serde(default)]
    attack: Option<AttackKind>,
    #[serde(default)]
    raw_output: Option<String>,
    #[serde(default)]
    normalized_label: Option<String>,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    level2_label: Option<String>,
}

#[derive(Debug, Clone)]
struct StoredPrediction {
    leaf: String,
    level2: Option<String>,
}

/// Replays externally produced predictions, e.g. from a fine-tuned model.
///
/// Accepts prediction-file lines; the leaf answer is taken from
/// `raw_output`, then `normalized_label`, then `label`.
#[derive(Debug, Clone)]
pub struct PredictionFileBackend {
    name: String,
    by_id: HashMap<String, StoredPrediction>,
}

impl PredictionFileBackend {
    /// Keep lines whose `attack` matches `attack` (lines without one always match).
    pub fn read<R: BufRead>(
        name: impl Into<String>,
        reader: R,
        attack: Option<AttackKind>,
    ) -> Result<Self, BackendError> {
        let mut by_id = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| BackendError::Other(e.to_string()))?;
            if line.trim().is_empty() || (i == 0 && parse_header_line(&line).is_some()) {
                continue;
            }
            let p: PredictionLine = serde_json::from_str(&line)
                .map_err(|e| BackendError::Other(format!("prediction file line {}: {e}", i + 1)))?;
            if let (Some(want), Some(have)) = (attack, p.attack) {
                if want != have {
                    continue;
                }
            }
            let leaf = p
                .raw_output
                .or(p.normalized_label)
                .or(p.label)
                .ok_or_else(|| {
                    BackendError::Other(format!("prediction file line {}: no label", i + 1))
                })?;
            if by_id
                .insert(
                    p.id.clone(),
                    StoredPrediction {
                        leaf,
                        level2: p.level2_label,
                    },
                )
                .is_some()
            {
                return Err(BackendError::Other(format!(
                    "prediction file has more than one line for '{}'",
                    p.id
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            by_id,
        })
    }

    pub fn load(
        name: impl Into<String>,
        path: &Path,
        attack: Option<AttackKind>,
    ) -> Result<Self, BackendError> {
        let file = std::fs::File::open(path)
            .map_err(|e| BackendError::Other(format!("{}: {e}", path.display())))?;
        Self::read(name, std::io::BufReader::new(file), attack)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

impl ClassifierBackend for PredictionFileBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn classify(&self, request: &ClassificationRequest<'_>) -> Result<String, BackendError> {
        let p = self
            .by_id
            .get(request.record_id)
            .ok_or_else(|| BackendError::MissingPrediction(request.record_id.to_string()))?;
        match request.stage {
            Stage::Level2 => p.level2.clone().ok_or_else(|| {
                BackendError::MissingPrediction(format!("{} (level 2)", request.record_id))
            }),
            Stage::Flat | Stage::Branch => Ok(p.leaf.clone()),
        }
    }
}

type MockFn = dyn Fn(&ClassificationRequest<'_>, Option<&[String]>) -> String + Send + Sync;

/// Test backend. Knows each record's gold path and answers through a
/// closure; counts calls.
pub struct MockBackend {
    name: String,
    gold: HashMap<String, Vec<String>>,
    respond: Box<MockFn>,
    calls: AtomicUsize,
}

impl MockBackend {
    pub fn from_fn<'r, F>(
        name: impl Into<String>,
        records: impl IntoIterator<Item = &'r ProductRecord>,
        respond: F,
    ) -> Self
    where
        F: Fn(&ClassificationRequest<'_>, Option<&[String]>) -> String + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            gold: records
                .into_iter()
                .map(|r| (r.id.clone(), r.path.clone()))
                .collect(),
            respond: Box::new(respond),
            calls: AtomicUsize::new(0),
        }
    }

    /// Answers with the gold leaf, or the gold second-level category at
    /// hierarchical stage 1.
    pub fn gold_echo<'r>(records: impl IntoIterator<Item = &'r ProductRecord>) -> Self {
        Self::from_fn("gold-echo", records, gold_answer)
    }

    /// Always answers `label`.
    pub fn fixed<'r>(
        label: impl Into<String>,
        records: impl IntoIterator<Item = &'r ProductRecord>,
    ) -> Self {
        let label = label.into();
        Self::from_fn("fixed", records, move |_, _| label.clone())
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// What a perfect classifier would answer for `req`.
pub fn gold_answer(req: &ClassificationRequest<'_>, path: Option<&[String]>) -> String {
    match (req.stage, path) {
        (Stage::Level2, Some(p)) if p.len() > 1 => p[1].clone(),
        (_, Some(p)) => p.last().cloned().unwrap_or_default(),
        (_, None) => String::new(),
    }
}

impl ClassifierBackend for MockBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn classify(&self, request: &ClassificationRequest<'_>) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let path = self.gold.get(request.record_id).map(Vec::as_slice);
        Ok((self.respond)(request, path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req<'a>(id: &'a str, stage: Stage) -> ClassificationRequest<'a> {
        ClassificationRequest {
            record_id: id,
            attack: AttackKind::Clean,
            stage,
            prompt: "",
            product: "",
            candidates: &[],
            examples: &[],
        }
    }

    #[test]
    fn prediction_file_lookup() {
        let text = "{\"id\":\"a1\",\"raw_output\":\"Tablets\",\"level2_label\":\"Computers\"}\n{\"id\":\"a2\",\"label\":\"Notebooks\"}\n";
        let b = PredictionFileBackend::read("deberta", text.as_bytes(), None).unwrap();
        assert_eq!(b.classify(&req("a1", Stage::Flat)).unwrap(), "Tablets");
        assert_eq!(b.classify(&req("a1", Stage::Level2)).unwrap(), "Computers");
        assert_eq!(b.classify(&req("a2", Stage::Flat)).unwrap(), "Notebooks");
        assert!(matches!(
            b.classify(&req("zz", Stage::Flat)),
            Err(BackendError::MissingPrediction(_))
        ));
    }

    #[test]
    fn prediction_file_attack_filter() {
        let text = "{\"id\":\"a1\",\"attack\":\"clean\",\"raw_output\":\"Tablets\"}\n{\"id\":\"a1\",\"attack\":\"combined\",\"raw_output\":\"Notebooks\"}\n";
        let b =
            PredictionFileBackend::read("m", text.as_bytes(), Some(AttackKind::Combined)).unwrap();
        assert_eq!(b.classify(&req("a1", Stage::Flat)).unwrap(), "Notebooks");
        assert!(PredictionFileBackend::read("m", text.as_bytes(), None).is_err());
    }

    #[test]
    fn gold_echo_by_stage() {
        let r = ProductRecord {
            id: "a1".into(),
            description: "d".into(),
            leaf_label: "Mobile Phone Cases".into(),
            path: vec![
                "Root".into(),
                "Telecom & Navigation".into(),
                "Mobile Phone Cases".into(),
            ],
        };
        let m = MockBackend::gold_echo([&r]);
        assert_eq!(
            m.classify(&req("a1", Stage::Level2)).unwrap(),
            "Telecom & Navigation"
        );
        assert_eq!(
            m.classify(&req("a1", Stage::Flat)).unwrap(),
            "Mobile Phone Cases"
        );
        assert_eq!(m.calls(), 2);
    }
}
