//! Data model, JSONL ingestion/emission and the on-disk score cache.
//!
//! All datasets are JSON Lines files: one record per line, keys emitted in
//! struct declaration order. Floats are written in their shortest
//! round-trippable form, so write-then-load is the identity on every record.

mod cache;
mod jsonl;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{CacheEntry, ScoreCache};
pub use jsonl::{load_jsonl, write_jsonl, write_jsonl_to, JsonlRecord};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: I/O error: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate key {key}")]
    Duplicate {
        path: String,
        line: usize,
        key: String,
    },
    #[error("{path}:{line}: {message}")]
    Invalid {
        path: String,
        line: usize,
        message: String,
    },
    #[error("record {index}: non-finite value in field `{field}`")]
    NonFinite { index: usize, field: String },
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

impl CorpusError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// One input prompt with an optional ground-truth final answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub prompt_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

impl JsonlRecord for PromptRecord {
    fn validate(&self) -> Result<(), String> {
        if self.prompt_id.is_empty() {
            return Err("empty prompt_id".into());
        }
        if self.text.trim().is_empty() {
            return Err(format!("prompt {}: empty text", self.prompt_id));
        }
        Ok(())
    }
}

/// A sentence-level step of a response. `index` is 1-based and `text`
/// keeps its trailing delimiter and whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub index: usize,
    pub text: String,
}

/// One teacher's response to a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateResponse {
    pub prompt_id: String,
    pub teacher_id: String,
    pub candidate_index: u64,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub steps: Vec<Step>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_correct: Option<bool>,
}

impl CandidateResponse {
    pub fn key(&self) -> CandidateKey {
        CandidateKey {
            prompt_id: self.prompt_id.clone(),
            teacher_id: self.teacher_id.clone(),
            candidate_index: self.candidate_index,
        }
    }

    pub fn is_segmented(&self) -> bool {
        !self.steps.is_empty()
    }
}

impl JsonlRecord for CandidateResponse {
    fn validate(&self) -> Result<(), String> {
        if self.prompt_id.is_empty() || self.teacher_id.is_empty() {
            return Err("empty prompt_id or teacher_id".into());
        }
        if self.text.trim().is_empty() {
            return Err(format!("candidate {}: empty text", self.key()));
        }
        if !self.steps.is_empty() {
            for (i, step) in self.steps.iter().enumerate() {
                if step.index != i + 1 {
                    return Err(format!(
                        "candidate {}: step indices must run 1..p, found {} at position {}",
                        self.key(),
                        step.index,
                        i + 1
                    ));
                }
                if step.text.is_empty() {
                    return Err(format!(
                        "candidate {}: empty step {}",
                        self.key(),
                        step.index
                    ));
                }
            }
            let joined: String = self.steps.iter().map(|s| s.text.as_str()).collect();
            if joined != self.text {
                return Err(format!(
                    "candidate {}: steps do not reconstruct the response text",
                    self.key()
                ));
            }
        }
        Ok(())
    }
}

/// Identity of a candidate within a candidate set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CandidateKey {
    pub prompt_id: String,
    pub teacher_id: String,
    pub candidate_index: u64,
}

impl std::fmt::Display for CandidateKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}, {}, {})",
            self.prompt_id, self.teacher_id, self.candidate_index
        )
    }
}

/// How many preceding steps enter a step's scoring context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WindowPolicy {
    /// At most `k` preceding steps.
    Fixed { k: usize },
    /// `ceil(fraction * (i - 1))` preceding steps for step `i`.
    Fraction { fraction: f64 },
    /// Every preceding step.
    Full,
}

impl Default for WindowPolicy {
    fn default() -> Self {
        WindowPolicy::Fixed { k: 4 }
    }
}

impl WindowPolicy {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            WindowPolicy::Fraction { fraction } if !(fraction > 0.0 && fraction <= 1.0) => Err(
                format!("window fraction must lie in (0, 1], got {fraction}"),
            ),
            _ => Ok(()),
        }
    }

    /// Number of preceding steps in the window of the 1-based step `i`.
    pub fn window_len(&self, i: usize) -> usize {
        let preceding = i.saturating_sub(1);
        let k = match *self {
            WindowPolicy::Fixed { k } => k,
            WindowPolicy::Fraction { fraction } => (fraction * preceding as f64).ceil() as usize,
            WindowPolicy::Full => preceding,
        };
        k.min(preceding)
    }
}

impl std::fmt::Display for WindowPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WindowPolicy::Fixed { k } => write!(f, "fixed:{k}"),
            WindowPolicy::Fraction { fraction } => write!(f, "fraction:{fraction}"),
            WindowPolicy::Full => write!(f, "full"),
        }
    }
}

impl std::str::FromStr for WindowPolicy {
    type Err = String;

    /// Parses `fixed:K`, `fraction:F` or `full`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let policy = if s == "full" {
            WindowPolicy::Full
        } else if let Some(k) = s.strip_prefix("fixed:") {
            let k = k
                .parse::<usize>()
                .map_err(|_| format!("invalid window size in `{s}`"))?;
            WindowPolicy::Fixed { k }
        } else if let Some(f) = s.strip_prefix("fraction:") {
            let fraction = f
                .parse::<f64>()
                .map_err(|_| format!("invalid window fraction in `{s}`"))?;
            WindowPolicy::Fraction { fraction }
        } else {
            return Err(format!(
                "unknown window policy `{s}` (expected fixed:K, fraction:F or full)"
            ));
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// Global and local scores for one candidate under one scorer.
///
/// `step_token_counts` is carried alongside `step_lps` so the token-weighted
/// aggregate of the step scores can be recovered from the file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRecord {
    pub prompt_id: String,
    pub teacher_id: String,
    pub candidate_index: u64,
    pub scorer_id: String,
    pub token_count: usize,
    pub global_lp: f64,
    pub step_lps: Vec<f64>,
    pub step_token_counts: Vec<usize>,
    pub local_lp: f64,
    pub window_policy: WindowPolicy,
}

impl ScoreRecord {
    pub fn key(&self) -> CandidateKey {
        CandidateKey {
            prompt_id: self.prompt_id.clone(),
            teacher_id: self.teacher_id.clone(),
            candidate_index: self.candidate_index,
        }
    }

    /// Token-count-weighted mean of the step scores.
    pub fn token_weighted_lp(&self) -> f64 {
        let total: usize = self.step_token_counts.iter().sum();
        let weighted: Vec<f64> = self
            .step_lps
            .iter()
            .zip(&self.step_token_counts)
            .map(|(lp, n)| lp * *n as f64)
            .collect();
        crate::numeric::sum(&weighted) / total as f64
    }
}

impl JsonlRecord for ScoreRecord {
    fn validate(&self) -> Result<(), String> {
        self.window_policy.validate()?;
        if self.token_count == 0 {
            return Err(format!(
                "score {}: token_count must be positive",
                self.key()
            ));
        }
        if self.step_lps.is_empty() || self.step_lps.len() != self.step_token_counts.len() {
            return Err(format!(
                "score {}: step_lps and step_token_counts must be non-empty and of equal length",
                self.key()
            ));
        }
        for (name, v) in std::iter::once(("global_lp", self.global_lp))
            .chain(std::iter::once(("local_lp", self.local_lp)))
            .chain(self.step_lps.iter().map(|v| ("step_lps", *v)))
        {
            if !v.is_finite() {
                return Err(format!("score {}: non-finite {name}", self.key()));
            }
            if v > 0.0 {
                return Err(format!(
                    "score {}: positive log-probability in {name}",
                    self.key()
                ));
            }
        }
        Ok(())
    }

    fn non_finite_field(&self) -> Option<&'static str> {
        if !self.global_lp.is_finite() {
            Some("global_lp")
        } else if !self.local_lp.is_finite() {
            Some("local_lp")
        } else if self.step_lps.iter().any(|v| !v.is_finite()) {
            Some("step_lps")
        } else if let WindowPolicy::Fraction { fraction } = self.window_policy {
            (!fraction.is_finite()).then_some("window_policy.fraction")
        } else {
            None
        }
    }
}

/// Loads prompts in file order. Duplicate ids and empty texts are errors.
pub fn load_prompts(path: impl AsRef<std::path::Path>) -> Result<Vec<PromptRecord>, CorpusError> {
    let path = path.as_ref();
    let records: Vec<(usize, PromptRecord)> = load_jsonl(path)?;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (line, record) in records {
        if !seen.insert(record.prompt_id.clone()) {
            return Err(CorpusError::Duplicate {
                path: path.display().to_string(),
                line,
                key: record.prompt_id,
            });
        }
        out.push(record);
    }
    Ok(out)
}

/// Loads candidate responses in file order, enforcing key uniqueness.
pub fn load_candidates(
    path: impl AsRef<std::path::Path>,
) -> Result<Vec<CandidateResponse>, CorpusError> {
    let path = path.as_ref();
    let records: Vec<(usize, CandidateResponse)> = load_jsonl(path)?;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (line, record) in records {
        let key = record.key();
        if !seen.insert(key.clone()) {
            return Err(CorpusError::Duplicate {
                path: path.display().to_string(),
                line,
                key: key.to_string(),
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_scores(path: impl AsRef<std::path::Path>) -> Result<Vec<ScoreRecord>, CorpusError> {
    Ok(load_jsonl(path.as_ref())?
        .into_iter()
        .map(|(_, r)| r)
        .collect())
}
