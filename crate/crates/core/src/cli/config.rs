//! Run configuration: JSON file, then command-line flags, then `NATSEL_*`
//! environment variables, each layer overriding the one before.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::WindowPolicy;
use crate::curation::{SelectionStrategy, StrategyKind};
use crate::scorer::{ScorerConfig, ScorerRef};

/// Scorer given either as a path to a scorer JSON file or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScorerSource {
    Path(PathBuf),
    Inline(ScorerConfig),
}

/// Contents of the `--config` file. Every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompts: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidates: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scorer: Option<ScorerSource>,
    /// `fixed:K`, `fraction:F` or `full`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_level: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub include_prompt: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_template: Option<String>,
}

macro_rules! overlay_fields {
    ($dst:ident, $src:ident, $($field:ident),*) => {
        $(if $src.$field.is_some() { $dst.$field = $src.$field; })*
    };
}

impl RunConfig {
    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, String> {
        let bytes = std::fs::read(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut config: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| format!("config {}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut config.prompts,
            &mut config.candidates,
            &mut config.cache_dir,
            &mut config.output_dir,
        ]
        .into_iter()
        .flatten()
        {
            rebase(p);
        }
        match &mut config.scorer {
            Some(ScorerSource::Path(p)) => rebase(p),
            Some(ScorerSource::Inline(ScorerConfig::ReferenceNgram { model_path, .. })) => {
                rebase(model_path)
            }
            _ => {}
        }
        Ok(config)
    }

    /// Fields set in `other` replace those in `self`.
    pub fn overlay(mut self, other: RunConfig) -> Self {
        overlay_fields!(
            self,
            other,
            prompts,
            candidates,
            cache_dir,
            output_dir,
            scorer,
            window,
            strategy,
            parallelism,
            seed,
            log_level,
            include_prompt,
            prompt_template
        );
        self
    }

    /// The `NATSEL_*` layer, read through `var` so tests can supply it.
    pub fn from_env(var: impl Fn(&str) -> Option<String>) -> Result<Self, String> {
        let get = |name: &str| var(&format!("NATSEL_{name}")).filter(|v| !v.is_empty());
        let parse_num = |name: &str| -> Result<Option<u64>, String> {
            get(name)
                .map(|v| {
                    v.parse::<u64>()
                        .map_err(|e| format!("NATSEL_{name}={v:?}: {e}"))
                })
                .transpose()
        };
        Ok(RunConfig {
            prompts: get("PROMPTS").map(PathBuf::from),
            candidates: get("CANDIDATES").map(PathBuf::from),
            cache_dir: get("CACHE_DIR").map(PathBuf::from),
            output_dir: get("OUTPUT_DIR").map(PathBuf::from),
            scorer: get("SCORER").map(|p| ScorerSource::Path(p.into())),
            window: get("WINDOW"),
            strategy: get("STRATEGY"),
            parallelism: parse_num("PARALLELISM")?.map(|n| n as usize),
            seed: parse_num("SEED")?,
            log_level: get("LOG_LEVEL"),
            include_prompt: None,
            prompt_template: None,
        })
    }

    pub fn window_policy(&self) -> Result<WindowPolicy, String> {
        match &self.window {
            Some(w) => w
                .parse::<WindowPolicy>()
                .map_err(|e| format!("window: {e}")),
            None => Ok(WindowPolicy::default()),
        }
    }

    pub fn selection_strategy(&self) -> Result<SelectionStrategy, String> {
        let name = self.strategy.as_deref().ok_or("strategy is required")?;
        let kind: StrategyKind = name.parse()?;
        let seed = match kind {
            StrategyKind::Random => Some(self.seed.ok_or("random strategy requires a seed")?),
            _ => None,
        };
        SelectionStrategy::new(kind, seed).map_err(|e| e.to_string())
    }

    pub fn log_filter(&self) -> Result<log::LevelFilter, String> {
        match &self.log_level {
            Some(l) => l
                .parse()
                .map_err(|_| format!("log_level: unknown level {l:?}")),
            None => Ok(log::LevelFilter::Warn),
        }
    }

    pub fn scorer_ref(&self) -> Result<ScorerRef, String> {
        match self.scorer.as_ref().ok_or("scorer is required")? {
            ScorerSource::Path(p) => ScorerRef::load(p),
            ScorerSource::Inline(c) => ScorerRef::from_config(c.clone()),
        }
        .map_err(|e| format!("scorer: {e}"))
    }

    pub fn require_prompts(&self) -> Result<&Path, String> {
        self.prompts
            .as_deref()
            .ok_or_else(|| "prompts path is required".into())
    }

    pub fn require_candidates(&self) -> Result<&Path, String> {
        self.candidates
            .as_deref()
            .ok_or_else(|| "candidates path is required".into())
    }

    /// Output path: an explicit `--out` (relative paths go under
    /// `output_dir` when one is set) or `output_dir/default_name`.
    pub fn output_path(&self, out: Option<&Path>, default_name: &str) -> Option<PathBuf> {
        match (out, &self.output_dir) {
            (Some(o), Some(dir)) if o.is_relative() => Some(dir.join(o)),
            (Some(o), _) => Some(o.to_path_buf()),
            (None, Some(dir)) => Some(dir.join(default_name)),
            (None, None) => None,
        }
    }
}
