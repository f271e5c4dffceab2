use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CorpusError;
use crate::scorer::TokenScores;

/// On-disk entry format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheEntry {
    pub token_logprobs: Vec<f64>,
    pub token_count: usize,
}

/// Content-addressed store of token log-probabilities.
///
/// Entries live at `<root>/<h0h1>/<h2h3>/<hash>.json` where `hash` is the
/// SHA-256 of the length-prefixed `(scorer_id, context, continuation)` bytes.
/// Writes go through a temp file and a rename, so concurrent writers of one
/// key leave exactly one intact entry.
#[derive(Debug, Clone)]
pub struct ScoreCache {
    root: PathBuf,
}

impl ScoreCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, CorpusError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| CorpusError::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn key(scorer_id: &str, context: &str, continuation: &str) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"natsel-score-cache-v1\0");
        for part in [scorer_id, context, continuation] {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part.as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    fn entry_path(&self, key: &str) -> PathBuf {
        self.root
            .join(&key[0..2])
            .join(&key[2..4])
            .join(format!("{key}.json"))
    }

    /// Returns the stored scores, or `None` on a miss. A corrupted entry is
    /// logged and reported as a miss; the next store replaces it.
    pub fn lookup(
        &self,
        scorer_id: &str,
        context: &str,
        continuation: &str,
    ) -> Result<Option<TokenScores>, CorpusError> {
        let path = self.entry_path(&Self::key(scorer_id, context, continuation));
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(CorpusError::io(&path, e)),
        };
        let entry = match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) => entry,
            Err(e) => {
                log::warn!(
                    "corrupted cache entry {}: {e}; treating as miss",
                    path.display()
                );
                return Ok(None);
            }
        };
        match TokenScores::new(entry.token_logprobs) {
            Ok(scores) if scores.token_count() == entry.token_count => Ok(Some(scores)),
            _ => {
                log::warn!("invalid cache entry {}; treating as miss", path.display());
                Ok(None)
            }
        }
    }

    pub fn store(
        &self,
        scorer_id: &str,
        context: &str,
        continuation: &str,
        scores: &TokenScores,
    ) -> Result<(), CorpusError> {
        let path = self.entry_path(&Self::key(scorer_id, context, continuation));
        let entry = CacheEntry {
            token_logprobs: scores.logprobs().to_vec(),
            token_count: scores.token_count(),
        };
        let bytes = serde_json::to_vec(&entry)?;
        crate::fsutil::write_atomic(&path, &bytes).map_err(|e| CorpusError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scores(v: &[f64]) -> TokenScores {
        TokenScores::new(v.to_vec()).unwrap()
    }

    #[test]
    fn miss_on_empty_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ScoreCache::open(dir.path()).unwrap();
        assert!(cache.lookup("s", "ctx", "cont").unwrap().is_none());
    }

    #[test]
    fn store_then_lookup_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ScoreCache::open(dir.path()).unwrap();
        cache
            .store("s", "ctx", "cont", &scores(&[-0.5, -1.0]))
            .unwrap();
        let got = cache.lookup("s", "ctx", "cont").unwrap().unwrap();
        assert_eq!(got.logprobs(), &[-0.5, -1.0]);
        assert_eq!(got.token_count(), 2);
    }

    #[test]
    fn scorer_id_is_part_of_key() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ScoreCache::open(dir.path()).unwrap();
        cache.store("s1", "ctx", "cont", &scores(&[-0.5])).unwrap();
        assert!(cache.lookup("s2", "ctx", "cont").unwrap().is_none());
    }

    #[test]
    fn key_is_unambiguous_across_field_boundaries() {
        assert_ne!(
            ScoreCache::key("s", "ab", "c"),
            ScoreCache::key("s", "a", "bc")
        );
        assert_ne!(
            ScoreCache::key("sa", "b", "c"),
            ScoreCache::key("s", "ab", "c")
        );
    }

    #[test]
    fn layout_is_two_level_fanout() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ScoreCache::open(dir.path()).unwrap();
        cache.store("s", "c", "x", &scores(&[-1.0])).unwrap();
        let key = ScoreCache::key("s", "c", "x");
        let path = dir
            .path()
            .join(&key[0..2])
            .join(&key[2..4])
            .join(format!("{key}.json"));
        let entry: serde_json::Value =
            serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
        assert_eq!(
            entry,
            serde_json::json!({"token_logprobs": [-1.0], "token_count": 1})
        );
    }

    #[test]
    fn corrupted_entry_is_miss_then_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ScoreCache::open(dir.path()).unwrap();
        cache.store("s", "c", "x", &scores(&[-1.0])).unwrap();
        let path = cache.entry_path(&ScoreCache::key("s", "c", "x"));
        std::fs::write(&path, b"{\"token_logprobs\": [-1.0").unwrap();
        assert!(cache.lookup("s", "c", "x").unwrap().is_none());
        std::fs::write(&path, b"{\"token_logprobs\": [0.5], \"token_count\": 1}").unwrap();
        assert!(cache.lookup("s", "c", "x").unwrap().is_none());
        cache.store("s", "c", "x", &scores(&[-2.0])).unwrap();
        assert_eq!(
            cache.lookup("s", "c", "x").unwrap().unwrap().logprobs(),
            &[-2.0]
        );
    }

    #[test]
    fn concurrent_stores_leave_one_intact_value() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ScoreCache::open(dir.path()).unwrap();
        std::thread::scope(|s| {
            for t in 0..16 {
                let cache = cache.clone();
                s.spawn(move || {
                    for _ in 0..20 {
                        let v = -(t as f64) - 0.25;
                        cache.store("s", "ctx", "cont", &scores(&[v, v])).unwrap();
                    }
                });
            }
        });
        let got = cache.lookup("s", "ctx", "cont").unwrap().unwrap();
        let v = got.logprobs()[0];
        assert_eq!(got.logprobs(), &[v, v]);
        assert!((0..16).any(|t| v == -(t as f64) - 0.25));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Lookup always returns the last stored value for a key, or none.
        #[test]
        fn lookup_returns_last_store(ops in prop::collection::vec((0usize..4, prop::option::of(prop::collection::vec(-30.0f64..=0.0, 1..5))), 1..30)) {
            let dir = tempfile::tempdir().unwrap();
            let cache = ScoreCache::open(dir.path()).unwrap();
            let mut model: std::collections::HashMap<usize, Vec<f64>> = Default::default();
            for (key, op) in ops {
                let ctx = format!("context {key}");
                match op {
                    Some(v) => {
                        cache.store("s", &ctx, "cont", &scores(&v)).unwrap();
                        model.insert(key, v);
                    }
                    None => {
                        let got = cache.lookup("s", &ctx, "cont").unwrap().map(|s| s.logprobs().to_vec());
                        prop_assert_eq!(got, model.get(&key).cloned());
                    }
                }
            }
        }
    }
}
