//! Conditional token log-likelihood backends.
//!
//! Every backend answers one question: the log-probabilities (nats) of the
//! tokens of `continuation` when it is forced after `context`. The global
//! and local scores in [`crate::metrics`] are built only from this call.

mod cached;
mod ngram;
mod remote;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cached::{CacheStats, CachingScorer};
pub use ngram::{train_reference_lm, ReferenceLm, ReferenceLmFile, BOS, EOS};
pub use remote::{RemoteConfig, RemoteScorer, ScoreRequest, ScoreResponse, TransportConfig};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("continuation must be non-empty")]
    EmptyContinuation,
    #[error("character {0:?} is outside the reference model vocabulary")]
    OutOfVocabulary(char),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("context too long: {required} tokens required, {allowed} allowed")]
    ContextOverflow { required: u64, allowed: u64 },
    #[error("request rejected with HTTP {status}: {message}")]
    Rejected { status: u16, message: String },
    #[error("transport failed after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("invalid scorer configuration: {0}")]
    Config(String),
    #[error("reference model error: {0}")]
    Model(String),
    #[error(transparent)]
    Cache(#[from] crate::corpus::CorpusError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ScoreError {
    /// True for failures of the scoring service itself, as opposed to bad
    /// input or configuration.
    pub fn is_transport(&self) -> bool {
        matches!(
            self,
            ScoreError::Exhausted { .. } | ScoreError::Protocol(_) | ScoreError::Rejected { .. }
        )
    }
}

/// Per-token log-probabilities of a continuation, in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScores {
    logprobs: Vec<f64>,
}

impl TokenScores {
    /// Fails unless every entry is finite and `<= 0` and the list is
    /// non-empty.
    pub fn new(logprobs: Vec<f64>) -> Result<Self, ScoreError> {
        if logprobs.is_empty() {
            return Err(ScoreError::Protocol("no token log-probabilities".into()));
        }
        if let Some((i, v)) = logprobs
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v > 0.0)
        {
            return Err(ScoreError::Protocol(format!(
                "token {i} has invalid log-probability {v}"
            )));
        }
        Ok(Self { logprobs })
    }

    pub fn logprobs(&self) -> &[f64] {
        &self.logprobs
    }

    pub fn token_count(&self) -> usize {
        self.logprobs.len()
    }

    /// Token-mean log-probability.
    pub fn mean(&self) -> f64 {
        crate::numeric::mean(&self.logprobs)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.logprobs
    }
}

/// A student model viewed as a conditional scorer.
pub trait Scorer: Send + Sync {
    /// Stable identity; changes whenever anything that affects scores does.
    fn scorer_id(&self) -> &str;

    /// Teacher-forced log-probabilities of `continuation` given `context`.
    fn token_logprobs(&self, context: &str, continuation: &str) -> Result<TokenScores, ScoreError>;
}

impl<S: Scorer + ?Sized> Scorer for Arc<S> {
    fn scorer_id(&self) -> &str {
        (**self).scorer_id()
    }

    fn token_logprobs(&self, context: &str, continuation: &str) -> Result<TokenScores, ScoreError> {
        (**self).token_logprobs(context, continuation)
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn scorer_id(&self) -> &str {
        (**self).scorer_id()
    }

    fn token_logprobs(&self, context: &str, continuation: &str) -> Result<TokenScores, ScoreError> {
        (**self).token_logprobs(context, continuation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Remote,
    ReferenceNgram,
}

/// Backend configuration as stored in `scorer.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerConfig {
    Remote {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scorer_id: Option<String>,
        endpoint: String,
        model: String,
        #[serde(default)]
        transport: TransportConfig,
    },
    ReferenceNgram {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scorer_id: Option<String>,
        model_path: PathBuf,
    },
}

/// Resolved identity and parameters of a scorer backend.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScorerRef {
    pub scorer_id: String,
    pub kind: ScorerKind,
    pub params: ScorerConfig,
}

impl ScorerRef {
    /// Reads a scorer config; relative model paths resolve against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScoreError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| ScoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut config: ScorerConfig = serde_json::from_slice(&bytes)
            .map_err(|e| ScoreError::Config(format!("{}: {e}", path.display())))?;
        if let ScorerConfig::ReferenceNgram { model_path, .. } = &mut config {
            if model_path.is_relative() {
                if let Some(dir) = path.parent() {
                    *model_path = dir.join(&*model_path);
                }
            }
        }
        Self::from_config(config)
    }

    /// Derives the scorer id when the config does not pin one: a hash of the
    /// model file bytes for the reference LM, of endpoint and model name for
    /// the remote service. Transport settings do not change scores and are
    /// excluded.
    pub fn from_config(config: ScorerConfig) -> Result<Self, ScoreError> {
        let (kind, scorer_id) = match &config {
            ScorerConfig::Remote { scorer_id, .. } => {
                let remote = remote_config(&config);
                remote.validate()?;
                let id = match scorer_id {
                    Some(id) => id.clone(),
                    None => {
                        let digest = Sha256::new()
                            .chain_update(remote.endpoint.trim_end_matches('/').as_bytes())
                            .chain_update([0u8])
                            .chain_update(remote.model.as_bytes())
                            .finalize();
                        format!("remote:{}:{}", remote.model, &hex::encode(digest)[..16])
                    }
                };
                (ScorerKind::Remote, id)
            }
            ScorerConfig::ReferenceNgram {
                scorer_id,
                model_path,
            } => {
                let id = match scorer_id {
                    Some(id) => id.clone(),
                    None => {
                        let bytes = std::fs::read(model_path).map_err(|source| ScoreError::Io {
                            path: model_path.display().to_string(),
                            source,
                        })?;
                        ReferenceLm::from_json_bytes(&bytes)?
                            .scorer_id()
                            .to_string()
                    }
                };
                (ScorerKind::ReferenceNgram, id)
            }
        };
        if scorer_id.is_empty() {
            return Err(ScoreError::Config("scorer_id must be non-empty".into()));
        }
        Ok(Self {
            scorer_id,
            kind,
            params: config,
        })
    }

    /// Instantiates the backend.
    pub fn open(&self) -> Result<Arc<dyn Scorer>, ScoreError> {
        match &self.params {
            ScorerConfig::Remote { .. } => Ok(Arc::new(RemoteScorer::new(
                remote_config(&self.params),
                self.scorer_id.clone(),
            )?)),
            ScorerConfig::ReferenceNgram { model_path, .. } => {
                let lm = ReferenceLm::load(model_path)?.with_scorer_id(self.scorer_id.clone());
                Ok(Arc::new(lm))
            }
        }
    }
}

fn remote_config(config: &ScorerConfig) -> RemoteConfig {
    match config {
        ScorerConfig::Remote {
            endpoint,
            model,
            transport,
            ..
        } => RemoteConfig {
            endpoint: endpoint.clone(),
            model: model.clone(),
            transport: transport.clone(),
        },
        ScorerConfig::ReferenceNgram { .. } => unreachable!("not a remote config"),
    }
}

/// Checked entry point: enforces the non-empty-continuation precondition and
/// the invariant that one log-probability comes back per token.
pub fn token_logprobs(
    scorer: &dyn Scorer,
    context: &str,
    continuation: &str,
) -> Result<TokenScores, ScoreError> {
    if continuation.is_empty() {
        return Err(ScoreError::EmptyContinuation);
    }
    scorer.token_logprobs(context, continuation)
}
