//! Character n-gram reference model with add-one smoothing.
//!
//! Each training line is padded with `n - 1` BOS symbols and one EOS symbol.
//! The probability of a character `c` after history `h` (the last `n - 1`
//! symbols) is
//!
//! ```text
//! P(c | h) = (count(h, c) + 1) / (sum over regular c' of count(h, c') + |V|)
//! ```
//!
//! where `V` is the set of regular characters seen in training. EOS is
//! recorded for sampling but is never a scoring target, so the distribution
//! over `V` sums to one for every history, seen or not. A history that never
//! occurred in training (for instance one containing a newline) therefore
//! scores every character as `1 / |V|`.
//!
//! Scoring is character-level, so step boundaries are always token
//! boundaries and scoring `a + b` equals scoring `a` then `b` with `a`
//! appended to the context.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ScoreError, Scorer, TokenScores};

/// Reserved start-of-line padding symbol.
pub const BOS: char = '\u{2}';
/// Reserved end-of-line symbol.
pub const EOS: char = '\u{3}';

/// Serialized form: `{"n": int, "vocab": [str], "counts": {context: {char: int}}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceLmFile {
    pub n: usize,
    pub vocab: Vec<String>,
    pub counts: BTreeMap<String, BTreeMap<String, u64>>,
}

#[derive(Debug, Clone, Default)]
struct Successors {
    counts: HashMap<char, u64>,
    regular_total: u64,
}

#[derive(Debug, Clone)]
pub struct ReferenceLm {
    order: usize,
    vocab: Vec<char>,
    vocab_set: HashSet<char>,
    table: HashMap<String, Successors>,
    file: ReferenceLmFile,
    scorer_id: String,
}

impl ReferenceLm {
    /// Trains on the lines of `corpus`; empty lines are skipped.
    pub fn train(corpus: &str, n: usize) -> Result<Self, ScoreError> {
        if n < 1 {
            return Err(ScoreError::Model("order n must be at least 1".into()));
        }
        let mut counts: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
        let mut vocab: std::collections::BTreeSet<char> = Default::default();
        let mut lines = 0usize;
        for line in corpus.lines().filter(|l| !l.is_empty()) {
            if line.contains([BOS, EOS]) {
                return Err(ScoreError::Model(
                    "corpus contains reserved BOS/EOS symbols".into(),
                ));
            }
            lines += 1;
            vocab.extend(line.chars());
            let padded: Vec<char> = std::iter::repeat_n(BOS, n - 1)
                .chain(line.chars())
                .chain(std::iter::once(EOS))
                .collect();
            for j in (n - 1)..padded.len() {
                let ctx: String = padded[j + 1 - n..j].iter().collect();
                *counts
                    .entry(ctx)
                    .or_default()
                    .entry(padded[j].to_string())
                    .or_default() += 1;
            }
        }
        if lines == 0 {
            return Err(ScoreError::Model("empty training corpus".into()));
        }
        let file = ReferenceLmFile {
            n,
            vocab: [BOS, EOS]
                .into_iter()
                .chain(vocab)
                .map(String::from)
                .collect(),
            counts,
        };
        Self::from_file(file)
    }

    /// A model with no counts: every character scores `-ln |V|` after any
    /// history.
    pub fn uniform(vocab: &[char], n: usize) -> Result<Self, ScoreError> {
        let mut chars: Vec<char> = vocab.to_vec();
        chars.sort_unstable();
        chars.dedup();
        let file = ReferenceLmFile {
            n,
            vocab: [BOS, EOS]
                .into_iter()
                .chain(chars)
                .map(String::from)
                .collect(),
            counts: BTreeMap::new(),
        };
        Self::from_file(file)
    }

    pub fn from_file(file: ReferenceLmFile) -> Result<Self, ScoreError> {
        let bad = |m: String| Err(ScoreError::Model(m));
        if file.n < 1 {
            return bad("order n must be at least 1".into());
        }
        let mut vocab = Vec::new();
        let mut seen_reserved = (false, false);
        for entry in &file.vocab {
            let mut it = entry.chars();
            let (Some(c), None) = (it.next(), it.next()) else {
                return bad(format!("vocab entry {entry:?} is not a single character"));
            };
            match c {
                BOS => seen_reserved.0 = true,
                EOS => seen_reserved.1 = true,
                _ => vocab.push(c),
            }
        }
        if seen_reserved != (true, true) {
            return bad("vocab must contain the reserved BOS and EOS symbols".into());
        }
        vocab.sort_unstable();
        vocab.dedup();
        if vocab.is_empty() {
            return bad("vocabulary has no regular characters".into());
        }
        let vocab_set: HashSet<char> = vocab.iter().copied().collect();
        let mut table: HashMap<String, Successors> = HashMap::new();
        for (ctx, succ) in &file.counts {
            if ctx.chars().count() != file.n - 1 {
                return bad(format!("context {ctx:?} does not have n - 1 characters"));
            }
            let mut s = Successors::default();
            for (next, &count) in succ {
                let mut it = next.chars();
                let (Some(c), None) = (it.next(), it.next()) else {
                    return bad(format!("successor {next:?} is not a single character"));
                };
                if c != EOS && !vocab_set.contains(&c) {
                    return bad(format!("successor {c:?} is not in the vocabulary"));
                }
                if c != EOS {
                    s.regular_total += count;
                }
                s.counts.insert(c, count);
            }
            table.insert(ctx.clone(), s);
        }
        let canonical = serde_json::to_vec(&file).expect("model file serializes");
        let digest = Sha256::digest(&canonical);
        let scorer_id = format!("ngram:n{}:{}", file.n, &hex::encode(digest)[..16]);
        Ok(Self {
            order: file.n,
            vocab,
            vocab_set,
            table,
            file,
            scorer_id,
        })
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self, ScoreError> {
        let file: ReferenceLmFile = serde_json::from_slice(bytes)
            .map_err(|e| ScoreError::Model(format!("invalid model file: {e}")))?;
        Self::from_file(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScoreError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| ScoreError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_bytes(&bytes)
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.file).expect("model file serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ScoreError> {
        let path = path.as_ref();
        crate::fsutil::write_atomic(path, &self.to_json_bytes()).map_err(|source| ScoreError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Overrides the content-derived scorer id.
    pub fn with_scorer_id(mut self, id: String) -> Self {
        self.scorer_id = id;
        self
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Regular (scorable) characters, sorted.
    pub fn vocab(&self) -> &[char] {
        &self.vocab
    }

    pub fn file(&self) -> &ReferenceLmFile {
        &self.file
    }

    /// Count of `next` after the exact `n - 1` symbol history `ctx`.
    pub fn count(&self, ctx: &str, next: char) -> u64 {
        self.table
            .get(ctx)
            .and_then(|s| s.counts.get(&next))
            .copied()
            .unwrap_or(0)
    }

    fn logprob_after(&self, ctx: &str, c: char) -> f64 {
        let (count, total) = match self.table.get(ctx) {
            Some(s) => (s.counts.get(&c).copied().unwrap_or(0), s.regular_total),
            None => (0, 0),
        };
        ((count + 1) as f64).ln() - ((total + self.vocab.len() as u64) as f64).ln()
    }

    /// The `n - 1` symbols preceding the end of `text`, BOS-padded.
    fn tail(&self, text: &str) -> Vec<char> {
        let k = self.order - 1;
        let mut tail: Vec<char> = text.chars().rev().take(k).collect();
        tail.extend(std::iter::repeat_n(BOS, k - tail.len()));
        tail.reverse();
        tail
    }

    /// Next-character distribution over the vocabulary after `history`.
    pub fn next_char_distribution(&self, history: &str) -> Vec<(char, f64)> {
        let ctx: String = self.tail(history).into_iter().collect();
        self.vocab
            .iter()
            .map(|&c| (c, self.logprob_after(&ctx, c).exp()))
            .collect()
    }

    /// Samples one line from the unsmoothed counts, falling back to uniform
    /// over `V ∪ {EOS}` after an unseen history. Stops at EOS or
    /// `max_chars`.
    pub fn sample_line<R: Rng + ?Sized>(&self, rng: &mut R, max_chars: usize) -> String {
        let k = self.order - 1;
        let mut hist: Vec<char> = vec![BOS; k];
        let mut out = String::new();
        for _ in 0..max_chars {
            let ctx: String = hist[hist.len() - k..].iter().collect();
            let next = match self.table.get(&ctx) {
                Some(s) if !s.counts.is_empty() => {
                    let mut options: Vec<(char, u64)> =
                        s.counts.iter().map(|(&c, &n)| (c, n)).collect();
                    options.sort_unstable();
                    let total: u64 = options.iter().map(|o| o.1).sum();
                    let mut draw = rng.random_range(0..total);
                    options
                        .into_iter()
                        .find(|&(_, n)| {
                            if draw < n {
                                true
                            } else {
                                draw -= n;
                                false
                            }
                        })
                        .map(|o| o.0)
                        .expect("draw below total")
                }
                _ => {
                    let i = rng.random_range(0..=self.vocab.len());
                    self.vocab.get(i).copied().unwrap_or(EOS)
                }
            };
            if next == EOS {
                break;
            }
            out.push(next);
            hist.push(next);
        }
        out
    }
}

impl Scorer for ReferenceLm {
    fn scorer_id(&self) -> &str {
        &self.scorer_id
    }

    fn token_logprobs(&self, context: &str, continuation: &str) -> Result<TokenScores, ScoreError> {
        if continuation.is_empty() {
            return Err(ScoreError::EmptyContinuation);
        }
        if let Some(c) = continuation.chars().find(|c| !self.vocab_set.contains(c)) {
            return Err(ScoreError::OutOfVocabulary(c));
        }
        let k = self.order - 1;
        let mut hist = self.tail(context);
        let mut out = Vec::with_capacity(continuation.len());
        for c in continuation.chars() {
            let ctx: String = hist[hist.len() - k..].iter().collect();
            out.push(self.logprob_after(&ctx, c));
            hist.push(c);
        }
        TokenScores::new(out)
    }
}

/// Trains a reference model from a UTF-8 corpus file.
pub fn train_reference_lm(
    corpus_path: impl AsRef<Path>,
    n: usize,
) -> Result<ReferenceLm, ScoreError> {
    let path = corpus_path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ReferenceLm::train(&text, n)
}
