//! Token alignment used to audit LLM-produced perturbations.

use super::lexicon::strip_interior_vowels;
use super::AbbreviationLexicon;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchKind {
    Exact,
    Abbreviation,
}

/// One aligned pair: input position, output position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignedPair {
    pub input: usize,
    pub output: usize,
    pub kind: MatchKind,
}

/// How an output token relates to an input token, if at all.
///
/// Comparison is case-insensitive. An output token counts as an abbreviation
/// of the input token when it is a shorter prefix followed by a period
/// (`mobile` / `mob.`), the input with interior vowels removed (`brown` /
/// `brwn`, optionally with a trailing period), or the lexicon's form.
pub fn token_relation(input: &str, output: &str, lex: &AbbreviationLexicon) -> Option<MatchKind> {
    let i = input.to_lowercase();
    let o = output.to_lowercase();
    if i == o {
        return Some(MatchKind::Exact);
    }
    if o.chars().count() >= i.chars().count() {
        return None;
    }
    if let Some(stem) = o.strip_suffix('.') {
        if !stem.is_empty() && i.starts_with(stem) {
            return Some(MatchKind::Abbreviation);
        }
    }
    let stripped = strip_interior_vowels(&i);
    if o == stripped || o.strip_suffix('.') == Some(stripped.as_str()) {
        return Some(MatchKind::Abbreviation);
    }
    if lex
        .abbreviate_token(&i)
        .is_some_and(|a| a.to_lowercase() == o)
    {
        return Some(MatchKind::Abbreviation);
    }
    None
}

/// Longest common subsequence under [`token_relation`], preferring exact
/// matches among alignments of equal length.
pub fn align(input: &[String], output: &[String], lex: &AbbreviationLexicon) -> Vec<AlignedPair> {
    let (n, m) = (input.len(), output.len());
    // score[i][j] = best (matched, exact) for input[i..], output[j..]
    let mut score = vec![vec![(0usize, 0usize); m + 1]; n + 1];
    let mut rel = vec![vec![None; m]; n];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            rel[i][j] = token_relation(&input[i], &output[j], lex);
            let mut best = score[i + 1][j].max(score[i][j + 1]);
            if let Some(kind) = rel[i][j] {
                let (c, e) = score[i + 1][j + 1];
                best = best.max((c + 1, e + usize::from(kind == MatchKind::Exact)));
            }
            score[i][j] = best;
        }
    }
    let mut pairs = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if let Some(kind) = rel[i][j] {
            let (c, e) = score[i + 1][j + 1];
            if score[i][j] == (c + 1, e + usize::from(kind == MatchKind::Exact)) {
                pairs.push(AlignedPair {
                    input: i,
                    output: j,
                    kind,
                });
                i += 1;
                j += 1;
                continue;
            }
        }
        if score[i + 1][j] >= score[i][j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    pairs
}
