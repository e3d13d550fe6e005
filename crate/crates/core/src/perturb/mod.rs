//! Data attacks on product descriptions: amputation, abbreviation and their
//! combination, either with deterministic operators or through an LLM.

mod align;
mod lexicon;
mod llm;
mod operators;
mod tokens;

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{validate_record, CorpusError, DatasetSplit, ProductRecord, Taxonomy};
use crate::llm::LlmError;
use crate::util::parse_header_line;

pub use align::{align, token_relation, AlignedPair, MatchKind};
pub use lexicon::{strip_interior_vowels, strip_vowels_rule, AbbreviationLexicon};
pub use llm::{
    llm_perturb, llm_perturb_many, llm_transform, render_perturbation_prompt,
    validate_perturbation, PromptKind, Validation,
};
pub use operators::{
    abbreviate, amputate, amputate_with, apply_attack, clean, combine, combine_with, replay,
    ImportanceScorer, Perturbation, PerturbationConfig, PerturbationMode,
};
pub use tokens::TokenSequence;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("input description has no tokens")]
    EmptyInput,
    #[error("invalid perturbation config: {0}")]
    Config(String),
    #[error("invalid lexicon: {0}")]
    Lexicon(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Clean,
    Abbreviated,
    Amputated,
    Combined,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [
        AttackKind::Clean,
        AttackKind::Abbreviated,
        AttackKind::Amputated,
        AttackKind::Combined,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Clean => "clean",
            AttackKind::Abbreviated => "abbreviated",
            AttackKind::Amputated => "amputated",
            AttackKind::Combined => "combined",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttackKind::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown attack '{s}'"))
    }
}

/// A product record after an attack, with its token-level trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbedRecord {
    #[serde(rename = "id")]
    pub source_id: String,
    pub description: String,
    #[serde(rename = "label")]
    pub leaf_label: String,
    pub path: Vec<String>,
    pub attack: AttackKind,
    pub kept_indices: Vec<usize>,
    pub abbreviated_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<String>,
}

impl PerturbedRecord {
    pub fn from_parts(
        record: &ProductRecord,
        attack: AttackKind,
        description: String,
        kept_indices: Vec<usize>,
        abbreviated_indices: Vec<usize>,
    ) -> Self {
        Self {
            source_id: record.id.clone(),
            description,
            leaf_label: record.leaf_label.clone(),
            path: record.path.clone(),
            attack,
            kept_indices,
            abbreviated_indices,
            degraded: false,
            violations: Vec::new(),
        }
    }

    pub fn from_perturbation(record: &ProductRecord, p: Perturbation) -> Self {
        Self::from_parts(
            record,
            p.attack,
            p.tokens.text(),
            p.kept_indices,
            p.abbreviated_indices,
        )
    }

    pub(crate) fn degraded(
        record: &ProductRecord,
        attack: AttackKind,
        description: String,
        kept_indices: Vec<usize>,
        violations: Vec<String>,
    ) -> Self {
        let mut r = Self::from_parts(record, attack, description, kept_indices, Vec::new());
        r.degraded = true;
        r.violations = violations;
        r
    }

    /// The record with its attacked description, for scoring and classification.
    pub fn to_product(&self) -> ProductRecord {
        ProductRecord {
            id: self.source_id.clone(),
            description: self.description.clone(),
            leaf_label: self.leaf_label.clone(),
            path: self.path.clone(),
        }
    }

    fn check_traces(&self) -> Result<(), String> {
        if self.kept_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err("kept_indices must be strictly increasing".into());
        }
        if self.abbreviated_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err("abbreviated_indices must be strictly increasing".into());
        }
        let n = TokenSequence::from_text(&self.description).len();
        if self.abbreviated_indices.last().is_some_and(|&i| i >= n) {
            return Err("abbreviated index beyond the attacked description".into());
        }
        Ok(())
    }
}

/// Attack every record of `split` with the deterministic operators.
///
/// Amputation importance uses document frequencies over the split itself.
pub fn perturb_split(
    split: &DatasetSplit,
    attack: AttackKind,
    lex: &AbbreviationLexicon,
    cfg: &PerturbationConfig,
) -> Result<Vec<PerturbedRecord>, PerturbError> {
    cfg.validate()?;
    let scorer = ImportanceScorer::fit(split.records.iter().map(|r| r.description.as_str()));
    split
        .records
        .iter()
        .map(|r| {
            let x = TokenSequence::from_text(&r.description);
            let p = apply_attack(attack, &x, lex, cfg, &scorer)?;
            Ok(PerturbedRecord::from_perturbation(r, p))
        })
        .collect()
}

pub fn write_perturbed<W: Write>(records: &[PerturbedRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a perturbed-dataset JSONL file, validating labels against the taxonomy.
pub fn read_perturbed<R: BufRead>(
    reader: R,
    taxonomy: &Taxonomy,
) -> Result<Vec<PerturbedRecord>, CorpusError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() || (idx == 0 && parse_header_line(&line).is_some()) {
            continue;
        }
        let rec: PerturbedRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        rec.check_traces().map_err(|message| CorpusError::Parse {
            line: line_no,
            message,
        })?;
        // Attacked text may be empty for degraded LLM output; only labels are checked.
        validate_record(
            rec.source_id.clone(),
            "-".into(),
            rec.leaf_label.clone(),
            Some(rec.path.clone()),
            taxonomy,
        )?;
        if !seen.insert(rec.source_id.clone()) {
            return Err(CorpusError::DuplicateId(rec.source_id));
        }
        out.push(rec);
    }
    Ok(out)
}
