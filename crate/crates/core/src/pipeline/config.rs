use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::classify::{Approach, ClassOrder};
use crate::llm::ChatConfig;
use crate::metrics::MacroScope;
use crate::perturb::{AttackKind, PerturbationConfig, PerturbationMode};
use crate::retrieval::HttpEmbeddingConfig;

fn default_parallelism() -> usize {
    4
}

/// Everything one pipeline run needs. Relative paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    pub output_dir: PathBuf,
    pub taxonomy: PathBuf,
    pub test: PathBuf,
    /// Clean training split; required by few-shot cells.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    /// Stratified sample size drawn from the test split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_size: Option<usize>,
    #[serde(default)]
    pub perturbation: PerturbationSettings,
    #[serde(default)]
    pub embedding: EmbeddingSettings,
    #[serde(default)]
    pub classify: ClassifySettings,
    #[serde(default)]
    pub metrics: MetricsSettings,
    /// The (backend, approach, attack, reason note) combinations to run.
    pub cells: Vec<CellConfig>,
    #[serde(default)]
    pub backends: BTreeMap<String, BackendConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationSettings {
    pub mode: PerturbationMode,
    pub max_keep_tokens: usize,
    pub max_abbrev_fraction: f64,
    pub lowercase_output: bool,
    /// Tab-separated `word<TAB>abbreviation` file; the built-in lexicon otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    pub rule_fallback: bool,
    /// Chat backend used in `llm` mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
}

impl Default for PerturbationSettings {
    fn default() -> Self {
        let d = PerturbationConfig::default();
        Self {
            mode: d.mode,
            max_keep_tokens: d.max_keep_tokens,
            max_abbrev_fraction: d.max_abbrev_fraction,
            lowercase_output: d.lowercase_output,
            lexicon: None,
            rule_fallback: false,
            backend: None,
        }
    }
}

impl PerturbationSettings {
    pub fn operator_config(&self, seed: u64) -> PerturbationConfig {
        PerturbationConfig {
            mode: self.mode,
            max_keep_tokens: self.max_keep_tokens,
            max_abbrev_fraction: self.max_abbrev_fraction,
            seed,
            lowercase_output: self.lowercase_output,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EmbeddingSettings {
    Hashed {
        #[serde(default = "default_dimension")]
        dimension: usize,
    },
    Http(HttpEmbeddingConfig),
}

fn default_dimension() -> usize {
    256
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        EmbeddingSettings::Hashed {
            dimension: default_dimension(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifySettings {
    pub class_order: ClassOrder,
    pub few_shot_k: usize,
    /// Resolve free-form outputs by embedding similarity as a last resort.
    pub label_embeddings: bool,
}

impl Default for ClassifySettings {
    fn default() -> Self {
        Self {
            class_order: ClassOrder::Taxonomy,
            few_shot_k: crate::classify::MAX_FEW_SHOT,
            label_embeddings: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSettings {
    pub macro_scope: MacroScope,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub backend: String,
    pub approach: Approach,
    pub attack: AttackKind,
    #[serde(default)]
    pub reason_note: bool,
}

impl CellConfig {
    /// File-name stem, e.g. `gpt4__few-shot__combined__reason`.
    pub fn id(&self) -> String {
        let mut id = format!("{}__{}__{}", self.backend, self.approach, self.attack);
        if self.reason_note {
            id.push_str("__reason");
        }
        id
    }

    /// Row label in the report, e.g. `Combined-Reason`.
    pub fn attack_label(&self) -> String {
        let base = match self.attack {
            AttackKind::Clean => "Clean",
            AttackKind::Abbreviated => "Abbreviated",
            AttackKind::Amputated => "Amputated",
            AttackKind::Combined => "Combined",
        };
        if self.reason_note {
            format!("{base}-Reason")
        } else {
            base.to_string()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendConfig {
    /// Hosted chat model.
    Chat {
        #[serde(flatten)]
        chat: ChatConfig,
        #[serde(default)]
        completion_suffix: bool,
    },
    /// Replays predictions produced elsewhere.
    PredictionFile { path: PathBuf },
    /// Answers with the gold label; for plumbing checks.
    GoldEcho,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !name.contains("__")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Parse `path` and resolve relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.taxonomy);
        fix(&mut self.test);
        if let Some(p) = &mut self.train {
            fix(p);
        }
        if let Some(p) = &mut self.perturbation.lexicon {
            fix(p);
        }
        for b in self.backends.values_mut() {
            if let BackendConfig::PredictionFile { path } = b {
                fix(path);
            }
        }
    }

    /// Static checks. `injected` names backends supplied in code rather than config.
    pub fn validate(&self, injected: &BTreeSet<String>) -> Result<(), PipelineError> {
        let err = |m: String| Err(PipelineError::Config(m));
        if self.parallelism == 0 {
            return err("parallelism must be at least 1".into());
        }
        if self.cells.is_empty() {
            return err("no cells configured".into());
        }
        let must_exist = |p: &Path, what: &str| {
            if p.is_file() {
                Ok(())
            } else {
                Err(PipelineError::Config(format!(
                    "{what} '{}' does not exist",
                    p.display()
                )))
            }
        };
        must_exist(&self.taxonomy, "taxonomy")?;
        must_exist(&self.test, "test split")?;
        if let Some(t) = &self.train {
            must_exist(t, "train split")?;
        }
        if let Some(l) = &self.perturbation.lexicon {
            must_exist(l, "lexicon")?;
        }
        if self.sample_size == Some(0) {
            return err("sample_size must be positive".into());
        }
        if self.classify.few_shot_k == 0 || self.classify.few_shot_k > crate::classify::MAX_FEW_SHOT
        {
            return err(format!(
                "few_shot_k must be between 1 and {}",
                crate::classify::MAX_FEW_SHOT
            ));
        }
        if let EmbeddingSettings::Hashed { dimension: 0 } = self.embedding {
            return err("embedding dimension must be positive".into());
        }
        self.perturbation
            .operator_config(self.seed)
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;

        for (name, b) in &self.backends {
            if !valid_name(name) {
                return err(format!(
                    "backend name '{name}' may only use letters, digits, '-', '_' and '.', without '__'"
                ));
            }
            if let BackendConfig::PredictionFile { path } = b {
                must_exist(path, &format!("prediction file for backend '{name}'"))?;
            }
        }
        if self.perturbation.mode == PerturbationMode::Llm {
            match self.perturbation.backend.as_deref() {
                None => return err("llm perturbation needs perturbation.backend".into()),
                Some(n) if injected.contains(n) => {}
                Some(n) => match self.backends.get(n) {
                    Some(BackendConfig::Chat { .. }) => {}
                    _ => return err(format!("perturbation backend '{n}' must be a chat backend")),
                },
            }
        }
        let mut seen = BTreeSet::new();
        for c in &self.cells {
            if !injected.contains(&c.backend) && !self.backends.contains_key(&c.backend) {
                return err(format!("cell uses undefined backend '{}'", c.backend));
            }
            if !valid_name(&c.backend) {
                return err(format!(
                    "backend name '{}' is not usable in file names",
                    c.backend
                ));
            }
            if c.approach == Approach::FewShot && self.train.is_none() {
                return err("few-shot cells need a train split".into());
            }
            if c.attack == AttackKind::Clean && c.reason_note {
                return err(format!(
                    "cell {} pairs the reason note with clean data",
                    c.id()
                ));
            }
            if !seen.insert(c.id()) {
                return err(format!("cell {} is listed twice", c.id()));
            }
        }
        Ok(())
    }

    pub fn attacks(&self) -> Vec<AttackKind> {
        let set: BTreeSet<AttackKind> = self
            .cells
            .iter()
            .map(|c| c.attack)
            .filter(|a| *a != AttackKind::Clean)
            .collect();
        AttackKind::ALL
            .into_iter()
            .filter(|a| set.contains(a))
            .collect()
    }
}
