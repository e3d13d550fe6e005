use serde::{Deserialize, Serialize};

use crate::retrieval::{cosine, EmbeddingBackend, EmbeddingVector};

/// Minimum cosine similarity for an embedding-based label match.
pub const EMBEDDING_MATCH_THRESHOLD: f64 = 0.85;

/// Which rung of the resolution ladder produced a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchStage {
    Exact,
    Folded,
    Substring,
    Embedding,
    Invalid,
}

impl MatchStage {
    pub fn rung(self) -> u8 {
        match self {
            MatchStage::Exact => 1,
            MatchStage::Folded => 2,
            MatchStage::Substring => 3,
            MatchStage::Embedding => 4,
            MatchStage::Invalid => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    /// `None` means INVALID.
    pub label: Option<String>,
    pub stage: MatchStage,
}

/// Case, whitespace and punctuation folding: lowercase, punctuation to
/// spaces, runs of whitespace collapsed.
pub fn fold(s: &str) -> String {
    let mapped: String = s
        .chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect::<String>()
        .to_lowercase();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Maps free-form model output onto a fixed label set.
pub struct LabelNormalizer<'a> {
    labels: Vec<String>,
    folded: Vec<String>,
    embeddings: Option<(&'a dyn EmbeddingBackend, Vec<EmbeddingVector>)>,
}

impl<'a> LabelNormalizer<'a> {
    pub fn new(labels: &[String]) -> Self {
        Self {
            folded: labels.iter().map(|l| fold(l)).collect(),
            labels: labels.to_vec(),
            embeddings: None,
        }
    }

    /// Enables the embedding rung. Label vectors are computed once here.
    pub fn with_embeddings(
        mut self,
        backend: &'a dyn EmbeddingBackend,
    ) -> Result<Self, crate::retrieval::RetrievalError> {
        let vectors = backend.embed(&self.labels)?;
        self.embeddings = Some((backend, vectors));
        Ok(self)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Resolution ladder: exact, folded, unique substring, nearest label by
    /// embedding above [`EMBEDDING_MATCH_THRESHOLD`], else INVALID.
    pub fn normalize(&self, raw: &str) -> Normalized {
        let hit = |i: usize, stage| Normalized {
            label: Some(self.labels[i].clone()),
            stage,
        };
        if let Some(i) = self.labels.iter().position(|l| l == raw) {
            return hit(i, MatchStage::Exact);
        }
        let f = fold(raw);
        if f.is_empty() {
            return Normalized {
                label: None,
                stage: MatchStage::Invalid,
            };
        }
        if let Some(i) = unique(self.folded.iter().enumerate().filter(|(_, l)| **l == f)) {
            return hit(i, MatchStage::Folded);
        }
        if let Some(i) = unique(
            self.folded
                .iter()
                .enumerate()
                .filter(|(_, l)| !l.is_empty() && (l.contains(&f) || f.contains(l.as_str()))),
        ) {
            return hit(i, MatchStage::Substring);
        }
        if let Some((backend, vectors)) = &self.embeddings {
            if let Ok(q) = backend.embed_one(raw.trim()) {
                let best = vectors
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (cosine(&q, v), i))
                    .max_by(|a, b| a.0.total_cmp(&b.0).then_with(|| b.1.cmp(&a.1)));
                if let Some((sim, i)) = best {
                    if sim >= EMBEDDING_MATCH_THRESHOLD {
                        return hit(i, MatchStage::Embedding);
                    }
                }
            }
        }
        Normalized {
            label: None,
            stage: MatchStage::Invalid,
        }
    }
}

fn unique<'x, I: Iterator<Item = (usize, &'x String)>>(mut it: I) -> Option<usize> {
    let (i, _) = it.next()?;
    it.next().is_none().then_some(i)
}

/// Convenience wrapper around [`LabelNormalizer`].
pub fn normalize_label(
    raw: &str,
    labels: &[String],
    embed: Option<&dyn EmbeddingBackend>,
) -> Normalized {
    let n = LabelNormalizer::new(labels);
    match embed {
        Some(b) => match n.with_embeddings(b) {
            Ok(n) => n.normalize(raw),
            Err(_) => LabelNormalizer::new(labels).normalize(raw),
        },
        None => n.normalize(raw),
    }
}
