//! Sentence embeddings, exact top-k neighbour search for few-shot example
//! selection, and clean-vs-attacked similarity statistics.

mod embed;

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ProductRecord;
use crate::perturb::PerturbedRecord;
use crate::util::ordered_parallel_map;

pub use embed::{
    cosine, EmbeddingBackend, EmbeddingVector, HashedBagBackend, HttpEmbeddingBackend,
    HttpEmbeddingConfig,
};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("index was built with '{index}' but the query backend is '{query}'")]
    Fingerprint { index: String, query: String },
    #[error("embedding backend failed: {0}")]
    Backend(String),
    #[error("duplicate id '{0}' in index")]
    DuplicateId(String),
    #[error("splits are not aligned: {0}")]
    Misaligned(String),
    #[error("malformed index file at line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub label: String,
    pub text: String,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexHeader {
    pub dimension: usize,
    pub count: usize,
    pub fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Exact-scan vector index over labelled training records.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dimension: usize,
    fingerprint: String,
    entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: String,
    pub similarity: f64,
}

/// Descending similarity, then ascending id.
fn rank(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

impl EmbeddingIndex {
    pub fn new(
        dimension: usize,
        fingerprint: impl Into<String>,
        entries: Vec<IndexEntry>,
    ) -> Result<Self, RetrievalError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if e.vector.dimension() != dimension {
                return Err(RetrievalError::Dimension {
                    expected: dimension,
                    found: e.vector.dimension(),
                });
            }
            if !seen.insert(e.id.as_str()) {
                return Err(RetrievalError::DuplicateId(e.id.clone()));
            }
        }
        Ok(Self {
            dimension,
            fingerprint: fingerprint.into(),
            entries,
        })
    }

    /// Embed `records` in batches on up to `parallelism` threads.
    pub fn build(
        records: &[ProductRecord],
        backend: &dyn EmbeddingBackend,
        parallelism: usize,
    ) -> Result<Self, RetrievalError> {
        let chunks: Vec<&[ProductRecord]> = records.chunks(64).collect();
        let embedded = ordered_parallel_map(&chunks, parallelism, |_, chunk| {
            let texts: Vec<String> = chunk.iter().map(|r| r.description.clone()).collect();
            backend.embed(&texts)
        });
        let mut entries = Vec::with_capacity(records.len());
        for (chunk, vectors) in chunks.iter().zip(embedded) {
            for (r, v) in chunk.iter().zip(vectors?) {
                entries.push(IndexEntry {
                    id: r.id.clone(),
                    label: r.leaf_label.clone(),
                    text: r.description.clone(),
                    vector: v,
                });
            }
        }
        let dimension = entries.first().map_or(0, |e| e.vector.dimension());
        Self::new(dimension, backend.fingerprint(), entries)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn top_k_similar(
        &self,
        query: &EmbeddingVector,
        k: usize,
    ) -> Result<Vec<Neighbor>, RetrievalError> {
        self.top_k_excluding(query, k, None)
    }

    /// The `min(k, n)` most similar entries, optionally skipping one id.
    pub fn top_k_excluding(
        &self,
        query: &EmbeddingVector,
        k: usize,
        exclude_id: Option<&str>,
    ) -> Result<Vec<Neighbor>, RetrievalError> {
        if self.entries.is_empty() {
            return Ok(Vec::new());
        }
        if query.dimension() != self.dimension {
            return Err(RetrievalError::Dimension {
                expected: self.dimension,
                found: query.dimension(),
            });
        }
        let mut scored: Vec<(f64, &str)> = self
            .entries
            .iter()
            .filter(|e| Some(e.id.as_str()) != exclude_id)
            .map(|e| (cosine(query, &e.vector), e.id.as_str()))
            .collect();
        let k = k.min(scored.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank);
            scored.truncate(k);
        }
        scored.sort_by(rank);
        Ok(scored
            .into_iter()
            .map(|(s, id)| Neighbor {
                id: id.to_string(),
                similarity: s,
            })
            .collect())
    }

    /// Embed `text` with `backend` and search, refusing a backend that did
    /// not build this index.
    pub fn query(
        &self,
        backend: &dyn EmbeddingBackend,
        text: &str,
        k: usize,
        exclude_id: Option<&str>,
    ) -> Result<Vec<Neighbor>, RetrievalError> {
        let fp = backend.fingerprint();
        if fp != self.fingerprint {
            return Err(RetrievalError::Fingerprint {
                index: self.fingerprint.clone(),
                query: fp,
            });
        }
        let q = backend.embed_one(text)?;
        self.top_k_excluding(&q, k, exclude_id)
    }

    /// Header line followed by one JSON entry per line.
    pub fn write<W: Write>(&self, out: W) -> Result<(), RetrievalError> {
        self.write_with_seed(out, None)
    }

    /// Like [`write`](Self::write), recording the run seed in the header.
    pub fn write_with_seed<W: Write>(
        &self,
        mut out: W,
        seed: Option<u64>,
    ) -> Result<(), RetrievalError> {
        let header = IndexHeader {
            dimension: self.dimension,
            count: self.entries.len(),
            fingerprint: self.fingerprint.clone(),
            seed,
        };
        serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self, RetrievalError> {
        let mut lines = reader.lines();
        let format_err = |line, message: String| RetrievalError::Format { line, message };
        let header_line = lines
            .next()
            .ok_or_else(|| format_err(1, "missing header".into()))??;
        let header: IndexHeader =
            serde_json::from_str(&header_line).map_err(|e| format_err(1, e.to_string()))?;
        let mut entries = Vec::with_capacity(header.count);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: IndexEntry =
                serde_json::from_str(&line).map_err(|e| format_err(i + 2, e.to_string()))?;
            entries.push(e);
        }
        if entries.len() != header.count {
            return Err(format_err(
                1,
                format!(
                    "header promises {} entries, file has {}",
                    header.count,
                    entries.len()
                ),
            ));
        }
        Self::new(header.dimension, header.fingerprint, entries)
    }
}

/// Mean cosine similarity between paired vectors.
pub fn mean_similarity(pairs: &[(EmbeddingVector, EmbeddingVector)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|(a, b)| cosine(a, b)).sum::<f64>() / pairs.len() as f64
}

/// Mean over records of cosine(embed(clean), embed(attacked)), matched by id.
/// An attacked record with an empty description scores 0.
pub fn mean_pairwise_similarity(
    clean: &[ProductRecord],
    attacked: &[PerturbedRecord],
    backend: &dyn EmbeddingBackend,
) -> Result<f64, RetrievalError> {
    if clean.len() != attacked.len() {
        return Err(RetrievalError::Misaligned(format!(
            "{} clean vs {} attacked records",
            clean.len(),
            attacked.len()
        )));
    }
    if clean.is_empty() {
        return Err(RetrievalError::Misaligned("no records".into()));
    }
    let by_id: HashMap<&str, &PerturbedRecord> =
        attacked.iter().map(|r| (r.source_id.as_str(), r)).collect();
    let mut clean_texts = Vec::new();
    let mut attacked_texts = Vec::new();
    let mut empty = 0usize;
    for c in clean {
        let a = by_id.get(c.id.as_str()).ok_or_else(|| {
            RetrievalError::Misaligned(format!("id '{}' missing from attacked split", c.id))
        })?;
        if a.description.trim().is_empty() {
            empty += 1;
            continue;
        }
        clean_texts.push(c.description.clone());
        attacked_texts.push(a.description.clone());
    }
    let total = if clean_texts.is_empty() {
        0.0
    } else {
        let cv = backend.embed(&clean_texts)?;
        let av = backend.embed(&attacked_texts)?;
        cv.iter().zip(&av).map(|(a, b)| cosine(a, b)).sum::<f64>()
    };
    Ok(total / (clean_texts.len() + empty) as f64)
}
