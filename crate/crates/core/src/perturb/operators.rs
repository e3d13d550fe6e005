use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::tokens::split_trailing_punct;
use super::{AbbreviationLexicon, AttackKind, PerturbError, TokenSequence};
use crate::util::substream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationMode {
    #[serde(alias = "det")]
    Deterministic,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationConfig {
    pub mode: PerturbationMode,
    pub max_keep_tokens: usize,
    pub max_abbrev_fraction: f64,
    pub seed: u64,
    pub lowercase_output: bool,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            mode: PerturbationMode::Deterministic,
            max_keep_tokens: 5,
            max_abbrev_fraction: 0.20,
            seed: 0,
            lowercase_output: true,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<(), PerturbError> {
        if self.max_keep_tokens < 1 {
            return Err(PerturbError::Config(
                "max_keep_tokens must be at least 1".into(),
            ));
        }
        if !(self.max_abbrev_fraction > 0.0 && self.max_abbrev_fraction <= 1.0) {
            return Err(PerturbError::Config(format!(
                "max_abbrev_fraction must be in (0, 1], got {}",
                self.max_abbrev_fraction
            )));
        }
        Ok(())
    }

    /// Largest number of tokens abbreviation may replace in an `n`-token input.
    pub fn abbrev_budget(&self, n: usize) -> usize {
        // The epsilon keeps 0.2 * 15 = 3.0000000000000004 from rounding up to 4.
        ((self.max_abbrev_fraction * n as f64) - 1e-9)
            .ceil()
            .max(0.0) as usize
    }
}

/// Result of one attack on a token sequence.
///
/// `kept_indices` index the input; `abbreviated_indices` index the
/// post-amputation sequence. Both are strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Perturbation {
    pub attack: AttackKind,
    pub tokens: TokenSequence,
    pub kept_indices: Vec<usize>,
    pub abbreviated_indices: Vec<usize>,
}

impl Perturbation {
    pub fn text(&self) -> String {
        self.tokens.text()
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "de", "for", "from", "in", "incl", "into",
    "is", "it", "its", "of", "on", "or", "per", "the", "this", "to", "und", "w/", "with",
    "without", "x", "-", "&", "+", "/", "|",
];

/// Ranks tokens for amputation by (not a stopword, rarity in a reference
/// corpus, earlier position), compared lexicographically.
#[derive(Debug, Clone, Default)]
pub struct ImportanceScorer {
    stopwords: HashSet<String>,
    doc_freq: HashMap<String, u32>,
    docs: u32,
}

impl ImportanceScorer {
    pub fn new() -> Self {
        Self {
            stopwords: STOPWORDS.iter().map(|s| s.to_string()).collect(),
            doc_freq: HashMap::new(),
            docs: 0,
        }
    }

    /// Scorer with document frequencies counted over `descriptions`.
    pub fn fit<'a>(descriptions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut scorer = Self::new();
        for d in descriptions {
            scorer.docs += 1;
            let uniq: HashSet<String> = d.split_whitespace().map(normalize_key).collect();
            for t in uniq {
                *scorer.doc_freq.entry(t).or_default() += 1;
            }
        }
        scorer
    }

    pub fn is_stopword(&self, token: &str) -> bool {
        self.stopwords.contains(&normalize_key(token))
    }

    /// Smoothed inverse document frequency; zero without a reference corpus.
    pub fn rarity(&self, token: &str) -> f64 {
        if self.docs == 0 {
            return 0.0;
        }
        let df = self
            .doc_freq
            .get(&normalize_key(token))
            .copied()
            .unwrap_or(0);
        ((f64::from(self.docs) + 1.0) / (f64::from(df) + 1.0)).ln()
    }

    /// Compare two positions: `Less` means `a` is more important.
    pub fn compare(&self, tokens: &[String], a: usize, b: usize) -> Ordering {
        let key = |i: usize| (!self.is_stopword(&tokens[i]), self.rarity(&tokens[i]));
        let (sa, ra) = key(a);
        let (sb, rb) = key(b);
        sb.cmp(&sa)
            .then_with(|| rb.total_cmp(&ra))
            .then_with(|| a.cmp(&b))
    }

    /// Indices of the `k` most important tokens, in original order.
    pub fn select(&self, tokens: &[String], k: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..tokens.len()).collect();
        order.sort_by(|&a, &b| self.compare(tokens, a, b));
        let mut keep: Vec<usize> = order.into_iter().take(k).collect();
        keep.sort_unstable();
        keep
    }
}

fn normalize_key(token: &str) -> String {
    let (core, _) = split_trailing_punct(token);
    if core.is_empty() { token } else { core }.to_lowercase()
}

fn prepare(x: &TokenSequence, cfg: &PerturbationConfig) -> Result<TokenSequence, PerturbError> {
    if x.is_empty() {
        return Err(PerturbError::EmptyInput);
    }
    cfg.validate()?;
    Ok(if cfg.lowercase_output {
        x.lowercased()
    } else {
        x.clone()
    })
}

/// The identity attack: full keep trace, no abbreviations.
pub fn clean(x: &TokenSequence, cfg: &PerturbationConfig) -> Result<Perturbation, PerturbError> {
    let tokens = prepare(x, cfg)?;
    Ok(Perturbation {
        attack: AttackKind::Clean,
        kept_indices: (0..tokens.len()).collect(),
        abbreviated_indices: Vec::new(),
        tokens,
    })
}

pub fn amputate(x: &TokenSequence, cfg: &PerturbationConfig) -> Result<Perturbation, PerturbError> {
    amputate_with(x, cfg, &ImportanceScorer::new())
}

/// Keep the `max_keep_tokens` most important tokens in their original order.
/// Inputs at or under the limit pass through unchanged.
pub fn amputate_with(
    x: &TokenSequence,
    cfg: &PerturbationConfig,
    scorer: &ImportanceScorer,
) -> Result<Perturbation, PerturbError> {
    let tokens = prepare(x, cfg)?;
    let kept = if tokens.len() <= cfg.max_keep_tokens {
        (0..tokens.len()).collect()
    } else {
        scorer.select(x.tokens(), cfg.max_keep_tokens)
    };
    let out = TokenSequence::from_tokens(kept.iter().map(|&i| &tokens.tokens()[i]));
    Ok(Perturbation {
        attack: AttackKind::Amputated,
        tokens: out,
        kept_indices: kept,
        abbreviated_indices: Vec::new(),
    })
}

/// Replace up to `ceil(max_abbrev_fraction * n)` lexicon-eligible tokens
/// with their abbreviations.
///
/// When more tokens are eligible than the budget allows, the replaced set is
/// drawn uniformly from the eligible positions using the `abbreviation`
/// substream of `cfg.seed`, keyed by the (case-normalized) input text.
pub fn abbreviate(
    x: &TokenSequence,
    lex: &AbbreviationLexicon,
    cfg: &PerturbationConfig,
) -> Result<Perturbation, PerturbError> {
    let tokens = prepare(x, cfg)?;
    let candidates: Vec<(usize, String)> = tokens
        .tokens()
        .iter()
        .enumerate()
        .filter_map(|(i, t)| lex.abbreviate_token(t).map(|a| (i, a)))
        .collect();
    let budget = cfg.abbrev_budget(tokens.len()).min(candidates.len());
    let mut rng = substream_rng(cfg.seed, "abbreviation", &tokens.text());
    let mut picks: Vec<usize> = index::sample(&mut rng, candidates.len(), budget).into_vec();
    picks.sort_unstable();

    let mut out = tokens.into_tokens();
    let mut replaced = Vec::with_capacity(picks.len());
    for p in picks {
        let (pos, abbr) = &candidates[p];
        out[*pos] = abbr.clone();
        replaced.push(*pos);
    }
    Ok(Perturbation {
        attack: AttackKind::Abbreviated,
        kept_indices: (0..out.len()).collect(),
        abbreviated_indices: replaced,
        tokens: TokenSequence::from_tokens(out),
    })
}

pub fn combine(
    x: &TokenSequence,
    lex: &AbbreviationLexicon,
    cfg: &PerturbationConfig,
) -> Result<Perturbation, PerturbError> {
    combine_with(x, lex, cfg, &ImportanceScorer::new())
}

/// Amputation followed by abbreviation of the survivors.
pub fn combine_with(
    x: &TokenSequence,
    lex: &AbbreviationLexicon,
    cfg: &PerturbationConfig,
    scorer: &ImportanceScorer,
) -> Result<Perturbation, PerturbError> {
    let amputated = amputate_with(x, cfg, scorer)?;
    let abbreviated = abbreviate(&amputated.tokens, lex, cfg)?;
    Ok(Perturbation {
        attack: AttackKind::Combined,
        tokens: abbreviated.tokens,
        kept_indices: amputated.kept_indices,
        abbreviated_indices: abbreviated.abbreviated_indices,
    })
}

/// Dispatch on attack kind.
pub fn apply_attack(
    attack: AttackKind,
    x: &TokenSequence,
    lex: &AbbreviationLexicon,
    cfg: &PerturbationConfig,
    scorer: &ImportanceScorer,
) -> Result<Perturbation, PerturbError> {
    match attack {
        AttackKind::Clean => clean(x, cfg),
        AttackKind::Amputated => amputate_with(x, cfg, scorer),
        AttackKind::Abbreviated => abbreviate(x, lex, cfg),
        AttackKind::Combined => combine_with(x, lex, cfg, scorer),
    }
}

/// Rebuild the attacked text from the clean tokens and the traces.
pub fn replay(
    clean: &TokenSequence,
    kept_indices: &[usize],
    abbreviated_indices: &[usize],
    lex: &AbbreviationLexicon,
    lowercase: bool,
) -> Option<TokenSequence> {
    let base = if lowercase {
        clean.lowercased()
    } else {
        clean.clone()
    };
    let mut kept: Vec<String> = kept_indices
        .iter()
        .map(|&i| base.tokens().get(i).cloned())
        .collect::<Option<_>>()?;
    for &i in abbreviated_indices {
        let slot = kept.get_mut(i)?;
        *slot = lex.abbreviate_token(slot)?;
    }
    Some(TokenSequence::from_tokens(kept))
}
