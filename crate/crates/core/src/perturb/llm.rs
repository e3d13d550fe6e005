use serde::{Deserialize, Serialize};

use super::align::{align, token_relation, MatchKind};
use super::{
    AbbreviationLexicon, AttackKind, PerturbError, PerturbationConfig, PerturbedRecord,
    TokenSequence,
};
use crate::corpus::ProductRecord;
use crate::llm::ChatClient;
use crate::prompt::render_template;
use crate::util::ordered_parallel_map;

const ABBREVIATION_TEMPLATE: &str = include_str!("../../templates/abbreviation.txt");
const AMPUTATION_TEMPLATE: &str = include_str!("../../templates/amputation.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Abbreviation,
    Amputation,
}

/// Render the LLM instruction for one attack on one description.
pub fn render_perturbation_prompt(kind: PromptKind, industry: &str, description: &str) -> String {
    let template = match kind {
        PromptKind::Abbreviation => ABBREVIATION_TEMPLATE,
        PromptKind::Amputation => AMPUTATION_TEMPLATE,
    };
    render_template(
        template,
        &[
            ("industry_input", industry),
            ("description_input", description),
        ],
    )
}

/// Outcome of auditing one completion against its input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Validation {
    pub kept_indices: Vec<usize>,
    pub abbreviated_indices: Vec<usize>,
    pub violations: Vec<String>,
}

/// Align `output` against `input` and check the hard constraints for `kind`:
/// no reordering, no introduced tokens, and (for abbreviation) no removals
/// and at most the configured share of abbreviated tokens.
pub fn validate_perturbation(
    kind: PromptKind,
    input: &TokenSequence,
    output: &TokenSequence,
    lex: &AbbreviationLexicon,
    cfg: &PerturbationConfig,
) -> Validation {
    let pairs = align(input.tokens(), output.tokens(), lex);
    let mut violations = Vec::new();

    let matched_out: Vec<bool> = {
        let mut v = vec![false; output.len()];
        for p in &pairs {
            v[p.output] = true;
        }
        v
    };
    for (j, tok) in output.tokens().iter().enumerate() {
        if matched_out[j] {
            continue;
        }
        let known = input
            .tokens()
            .iter()
            .any(|t| token_relation(t, tok, lex).is_some());
        violations.push(if known {
            format!("token '{tok}' at position {j} is out of order")
        } else {
            format!("token '{tok}' at position {j} does not come from the input")
        });
    }

    let abbreviated: Vec<usize> = pairs
        .iter()
        .filter(|p| p.kind == MatchKind::Abbreviation)
        .map(|p| p.output)
        .collect();
    match kind {
        PromptKind::Amputation => {
            for p in pairs.iter().filter(|p| p.kind == MatchKind::Abbreviation) {
                violations.push(format!(
                    "token '{}' was altered to '{}' during amputation",
                    input.tokens()[p.input],
                    output.tokens()[p.output]
                ));
            }
        }
        PromptKind::Abbreviation => {
            if pairs.len() < input.len() {
                violations.push(format!(
                    "{} of {} tokens were removed during abbreviation",
                    input.len() - pairs.len(),
                    input.len()
                ));
            }
            let budget = cfg.abbrev_budget(input.len());
            if abbreviated.len() > budget {
                violations.push(format!(
                    "{} tokens abbreviated, limit is {budget}",
                    abbreviated.len()
                ));
            }
        }
    }
    Validation {
        kept_indices: pairs.iter().map(|p| p.input).collect(),
        abbreviated_indices: if kind == PromptKind::Abbreviation {
            abbreviated
        } else {
            Vec::new()
        },
        violations,
    }
}

fn clean_completion(raw: &str, lowercase: bool) -> TokenSequence {
    let mut text = raw.trim();
    if let Some(rest) = text.strip_prefix("New description:") {
        text = rest.trim();
    }
    let text = text.trim_matches('"');
    let seq = TokenSequence::from_text(text);
    if lowercase {
        seq.lowercased()
    } else {
        seq
    }
}

/// One LLM call for `kind` on `description`, audited.
pub fn llm_transform(
    kind: PromptKind,
    industry: &str,
    description: &str,
    client: &dyn ChatClient,
    lex: &AbbreviationLexicon,
    cfg: &PerturbationConfig,
) -> Result<(TokenSequence, Validation), PerturbError> {
    let input = TokenSequence::from_text(description);
    if input.is_empty() {
        return Err(PerturbError::EmptyInput);
    }
    let prompt = render_perturbation_prompt(kind, industry, description);
    let raw = client.complete(&prompt)?;
    let output = clean_completion(&raw, cfg.lowercase_output);
    let validation = validate_perturbation(kind, &input, &output, lex, cfg);
    Ok((output, validation))
}

/// Attack `record` through the chat client.
///
/// `Combined` runs amputation and then abbreviation on the amputated text.
/// Constraint violations do not fail the call; the record comes back flagged
/// as degraded with the violations listed.
pub fn llm_perturb(
    record: &ProductRecord,
    attack: AttackKind,
    client: &dyn ChatClient,
    lex: &AbbreviationLexicon,
    cfg: &PerturbationConfig,
) -> Result<PerturbedRecord, PerturbError> {
    let industry = record.level2().unwrap_or_default();
    let clean = TokenSequence::from_text(&record.description);
    let (tokens, kept, abbreviated, violations) = match attack {
        AttackKind::Clean => {
            let p = super::clean(&clean, cfg)?;
            (p.tokens, p.kept_indices, p.abbreviated_indices, Vec::new())
        }
        AttackKind::Amputated => {
            let (out, v) = llm_transform(
                PromptKind::Amputation,
                industry,
                &record.description,
                client,
                lex,
                cfg,
            )?;
            (out, v.kept_indices, Vec::new(), v.violations)
        }
        AttackKind::Abbreviated => {
            let (out, v) = llm_transform(
                PromptKind::Abbreviation,
                industry,
                &record.description,
                client,
                lex,
                cfg,
            )?;
            (out, v.kept_indices, v.abbreviated_indices, v.violations)
        }
        AttackKind::Combined => {
            let (amputated, first) = llm_transform(
                PromptKind::Amputation,
                industry,
                &record.description,
                client,
                lex,
                cfg,
            )?;
            if amputated.is_empty() {
                return Ok(PerturbedRecord::degraded(
                    record,
                    attack,
                    String::new(),
                    first.kept_indices,
                    vec!["amputation returned an empty description".into()],
                ));
            }
            let (out, second) = llm_transform(
                PromptKind::Abbreviation,
                industry,
                &amputated.text(),
                client,
                lex,
                cfg,
            )?;
            let mut violations = first.violations;
            violations.extend(second.violations);
            (
                out,
                first.kept_indices,
                second.abbreviated_indices,
                violations,
            )
        }
    };
    let mut out = PerturbedRecord::from_parts(record, attack, tokens.text(), kept, abbreviated);
    if tokens.is_empty() {
        out.violations.push("completion was empty".into());
    }
    out.violations.extend(violations);
    out.degraded = !out.violations.is_empty();
    Ok(out)
}

/// Attack many records concurrently; output order follows input order.
pub fn llm_perturb_many(
    records: &[ProductRecord],
    attack: AttackKind,
    client: &dyn ChatClient,
    lex: &AbbreviationLexicon,
    cfg: &PerturbationConfig,
    parallelism: usize,
) -> Vec<Result<PerturbedRecord, PerturbError>> {
    ordered_parallel_map(records, parallelism, |_, r| {
        llm_perturb(r, attack, client, lex, cfg)
    })
}
