use std::sync::atomic::{AtomicU64, Ordering};

use super::{ScoreError, Scorer, TokenScores};
use crate::corpus::ScoreCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheStats {
    pub hits: u64,
    /// Calls that reached the backend.
    pub misses: u64,
}

/// Routes every call through the on-disk cache and counts backend calls.
/// Without a cache it only counts.
pub struct CachingScorer<S> {
    inner: S,
    cache: Option<ScoreCache>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl<S: Scorer> CachingScorer<S> {
    pub fn new(inner: S, cache: Option<ScoreCache>) -> Self {
        Self {
            inner,
            cache,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }
}

impl<S: Scorer> Scorer for CachingScorer<S> {
    fn scorer_id(&self) -> &str {
        self.inner.scorer_id()
    }

    fn token_logprobs(&self, context: &str, continuation: &str) -> Result<TokenScores, ScoreError> {
        let id = self.inner.scorer_id();
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.lookup(id, context, continuation)? {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(hit);
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let scores = self.inner.token_logprobs(context, continuation)?;
        if let Some(cache) = &self.cache {
            cache.store(id, context, continuation, &scores)?;
        }
        Ok(scores)
    }
}
