use std::collections::BTreeMap;
use std::path::Path;

use super::tokens::split_trailing_punct;
use super::PerturbError;

/// Seed dictionary of shipment-style abbreviations.
const SEED_ENTRIES: &[(&str, &str)] = &[
    ("accessories", "acc."),
    ("accessory", "acc."),
    ("adapter", "adptr"),
    ("battery", "batt."),
    ("black", "blk"),
    ("brown", "brwn"),
    ("cable", "cbl"),
    ("charger", "chrgr"),
    ("computer", "comp."),
    ("connector", "conn."),
    ("controller", "ctrl."),
    ("display", "disp."),
    ("edition", "ed."),
    ("extension", "ext."),
    ("external", "ext."),
    ("gray", "gry"),
    ("green", "grn"),
    ("grey", "gry"),
    ("headphones", "hdphns"),
    ("inches", "in."),
    ("internal", "int."),
    ("international", "intl"),
    ("keyboard", "kbd"),
    ("large", "lg"),
    ("management", "mgmt"),
    ("maximum", "max"),
    ("medium", "med."),
    ("memory", "mem."),
    ("minimum", "min"),
    ("mobile", "mob."),
    ("monitor", "mon."),
    ("network", "netw."),
    ("notebook", "nb"),
    ("number", "no."),
    ("orange", "orng"),
    ("package", "pkg"),
    ("pieces", "pcs"),
    ("printer", "prntr"),
    ("professional", "pro"),
    ("protection", "prot."),
    ("protective", "prot."),
    ("purple", "prpl"),
    ("quantity", "qty"),
    ("replacement", "repl."),
    ("screen", "scrn"),
    ("silver", "slv"),
    ("small", "sm"),
    ("speaker", "spkr"),
    ("standard", "std"),
    ("station", "stn"),
    ("storage", "stor."),
    ("support", "supp."),
    ("system", "sys."),
    ("version", "ver."),
    ("warranty", "wrnty"),
    ("white", "wht"),
    ("wireless", "wrls"),
    ("yellow", "ylw"),
];

/// Map from lowercase full word to a strictly shorter abbreviation.
///
/// With `rule_fallback` enabled, words of four or more letters without an
/// entry are abbreviated by dropping interior vowels and appending `.`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AbbreviationLexicon {
    entries: BTreeMap<String, String>,
    rule_fallback: bool,
}

impl AbbreviationLexicon {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The shipped seed dictionary, without the rule fallback.
    pub fn seed() -> Self {
        let mut lex = Self::empty();
        for (full, abbr) in SEED_ENTRIES {
            lex.insert(full, abbr).expect("seed entries are valid");
        }
        lex
    }

    pub fn with_rule_fallback(mut self, enabled: bool) -> Self {
        self.rule_fallback = enabled;
        self
    }

    pub fn rule_fallback(&self) -> bool {
        self.rule_fallback
    }

    pub fn insert(&mut self, full: &str, abbr: &str) -> Result<(), PerturbError> {
        let full = full.trim().to_lowercase();
        let abbr = abbr.trim().to_string();
        if full.is_empty() || abbr.is_empty() {
            return Err(PerturbError::Lexicon(format!(
                "empty entry '{full}' -> '{abbr}'"
            )));
        }
        if full.contains(char::is_whitespace) || abbr.contains(char::is_whitespace) {
            return Err(PerturbError::Lexicon(format!(
                "entry '{full}' -> '{abbr}' contains whitespace"
            )));
        }
        if abbr.chars().count() >= full.chars().count() || abbr.to_lowercase() == full {
            return Err(PerturbError::Lexicon(format!(
                "abbreviation '{abbr}' is not shorter than '{full}'"
            )));
        }
        self.entries.insert(full, abbr);
        Ok(())
    }

    pub fn from_entries<'a>(
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self, PerturbError> {
        let mut lex = Self::empty();
        for (f, a) in pairs {
            lex.insert(f, a)?;
        }
        Ok(lex)
    }

    /// Parse `full<TAB>abbreviation` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, PerturbError> {
        let mut lex = Self::empty();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (full, abbr) = line.split_once('\t').ok_or_else(|| {
                PerturbError::Lexicon(format!(
                    "line {}: expected two tab-separated columns",
                    i + 1
                ))
            })?;
            lex.insert(full, abbr)
                .map_err(|e| PerturbError::Lexicon(format!("line {}: {e}", i + 1)))?;
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self, PerturbError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PerturbError::Lexicon(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_tsv(&self) -> String {
        self.entries
            .iter()
            .map(|(f, a)| format!("{f}\t{a}\n"))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && !self.rule_fallback
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(f, a)| (f.as_str(), a.as_str()))
    }

    pub fn get(&self, word: &str) -> Option<&str> {
        self.entries.get(&word.to_lowercase()).map(String::as_str)
    }

    /// Abbreviated form of `token`, keeping trailing punctuation, or `None`
    /// when the token is not eligible.
    pub fn abbreviate_token(&self, token: &str) -> Option<String> {
        let (core, tail) = split_trailing_punct(token);
        if core.is_empty() {
            return None;
        }
        let lower = core.to_lowercase();
        let abbr = match self.entries.get(&lower) {
            Some(a) => a.clone(),
            None if self.rule_fallback => strip_vowels_rule(&lower)?,
            None => return None,
        };
        // "mob." followed by "," would otherwise read "mob.,"; keep one mark.
        if abbr.ends_with('.') && tail.starts_with('.') {
            Some(format!("{abbr}{}", &tail[1..]))
        } else {
            Some(format!("{abbr}{tail}"))
        }
    }
}

/// Drop vowels after the first character, append `.`. Only for words with at
/// least four letters, and only when the result is actually shorter.
pub fn strip_vowels_rule(word: &str) -> Option<String> {
    if word.chars().filter(|c| c.is_alphabetic()).count() < 4 {
        return None;
    }
    let stripped = strip_interior_vowels(word);
    let out = format!("{stripped}.");
    (out.chars().count() < word.chars().count()).then_some(out)
}

/// Remove vowels except the first character, e.g. `brown` -> `brwn`.
pub fn strip_interior_vowels(word: &str) -> String {
    let mut chars = word.chars();
    let mut out: String = chars.next().into_iter().collect();
    out.extend(chars.filter(|c| !matches!(c.to_ascii_lowercase(), 'a' | 'e' | 'i' | 'o' | 'u')));
    out
}
