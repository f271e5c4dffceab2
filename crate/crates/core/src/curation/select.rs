use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CurationError;
use crate::corpus::{JsonlRecord, ScoreRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Random,
    GlobalHighest,
    GlobalLowest,
    GlobalMiddle,
    LocalHighest,
    LocalLowest,
    AllTeachers,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::Random,
        StrategyKind::GlobalHighest,
        StrategyKind::GlobalLowest,
        StrategyKind::GlobalMiddle,
        StrategyKind::LocalHighest,
        StrategyKind::LocalLowest,
        StrategyKind::AllTeachers,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Random => "random",
            StrategyKind::GlobalHighest => "global_highest",
            StrategyKind::GlobalLowest => "global_lowest",
            StrategyKind::GlobalMiddle => "global_middle",
            StrategyKind::LocalHighest => "local_highest",
            StrategyKind::LocalLowest => "local_lowest",
            StrategyKind::AllTeachers => "all_teachers",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
                format!(
                    "unknown strategy `{s}` (expected one of {})",
                    names.join(", ")
                )
            })
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionStrategy {
    pub kind: StrategyKind,
    /// Present iff `kind` is random.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl SelectionStrategy {
    pub fn new(kind: StrategyKind, seed: Option<u64>) -> Result<Self, CurationError> {
        let s = Self { kind, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), CurationError> {
        match (self.kind, self.seed) {
            (StrategyKind::Random, None) => Err(CurationError::InvalidStrategy(
                "random selection requires a seed".into(),
            )),
            (StrategyKind::Random, Some(_)) | (_, None) => Ok(()),
            (kind, Some(_)) => Err(CurationError::InvalidStrategy(format!(
                "{kind} takes no seed"
            ))),
        }
    }
}

impl std::fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.seed {
            Some(seed) => write!(f, "{}(seed={seed})", self.kind),
            None => write!(f, "{}", self.kind),
        }
    }
}

/// The response chosen for one prompt. `score` is the score the strategy
/// ranked by; it is absent for random and all-teachers selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionRecord {
    pub prompt_id: String,
    pub teacher_id: String,
    pub candidate_index: u64,
    pub strategy: SelectionStrategy,
    pub score: Option<f64>,
    pub tie_broken: bool,
}

impl JsonlRecord for SelectionRecord {
    fn validate(&self) -> Result<(), String> {
        self.strategy.validate().map_err(|e| e.to_string())
    }

    fn non_finite_field(&self) -> Option<&'static str> {
        self.score
            .is_some_and(|s| !s.is_finite())
            .then_some("score")
    }
}

fn draw_index(seed: u64, prompt_id: &str, n: usize) -> usize {
    let digest = Sha256::new()
        .chain_update(b"natsel-random-select-v1\0")
        .chain_update(seed.to_le_bytes())
        .chain_update(prompt_id.as_bytes())
        .finalize();
    let mut rng = ChaCha8Rng::from_seed(digest.into());
    rng.random_range(0..n)
}

fn record(
    r: &ScoreRecord,
    strategy: SelectionStrategy,
    score: Option<f64>,
    tie_broken: bool,
) -> SelectionRecord {
    SelectionRecord {
        prompt_id: r.prompt_id.clone(),
        teacher_id: r.teacher_id.clone(),
        candidate_index: r.candidate_index,
        strategy,
        score,
        tie_broken,
    }
}

/// Picks one response per prompt (every response for `all_teachers`).
///
/// Output is ordered by prompt id. Within a prompt, candidates are
/// considered in `(teacher_id, candidate_index)` order, which is also the
/// tie-break order: among equal scores the first wins and `tie_broken` is
/// set. `global_middle` takes the candidate at ascending-rank index
/// `floor((n - 1) / 2)`. Random selection seeds a ChaCha8 stream from
/// SHA-256 of `(seed, prompt_id)`, so each prompt's draw is independent of
/// every other prompt in the file.
pub fn select(
    scores: &[ScoreRecord],
    strategy: SelectionStrategy,
) -> Result<Vec<SelectionRecord>, CurationError> {
    strategy.validate()?;
    if let Some(first) = scores.first() {
        if let Some(other) = scores
            .iter()
            .find(|r| r.scorer_id != first.scorer_id || r.window_policy != first.window_policy)
        {
            return Err(CurationError::MixedScores(format!(
                "{} [{}] vs {} [{}]",
                first.scorer_id, first.window_policy, other.scorer_id, other.window_policy
            )));
        }
    }
    let mut groups: BTreeMap<&str, Vec<&ScoreRecord>> = BTreeMap::new();
    for r in scores {
        groups.entry(r.prompt_id.as_str()).or_default().push(r);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (prompt_id, mut group) in groups {
        group.sort_by(|a, b| {
            (a.teacher_id.as_str(), a.candidate_index)
                .cmp(&(b.teacher_id.as_str(), b.candidate_index))
        });
        if let Some(w) = group.windows(2).find(|w| w[0].key() == w[1].key()) {
            return Err(CurationError::Duplicate(w[0].key()));
        }
        let global = |r: &ScoreRecord| r.global_lp;
        let local = |r: &ScoreRecord| r.local_lp;
        match strategy.kind {
            StrategyKind::AllTeachers => {
                out.extend(group.iter().map(|r| record(r, strategy, None, false)));
            }
            StrategyKind::Random => {
                let i = draw_index(strategy.seed.expect("validated"), prompt_id, group.len());
                out.push(record(group[i], strategy, None, false));
            }
            StrategyKind::GlobalHighest => {
                out.push(extreme(&group, global, Ordering::Greater, strategy))
            }
            StrategyKind::GlobalLowest => {
                out.push(extreme(&group, global, Ordering::Less, strategy))
            }
            StrategyKind::LocalHighest => {
                out.push(extreme(&group, local, Ordering::Greater, strategy))
            }
            StrategyKind::LocalLowest => out.push(extreme(&group, local, Ordering::Less, strategy)),
            StrategyKind::GlobalMiddle => {
                let mut ranked = group.clone();
                // stable: equal scores keep tie-break order
                ranked.sort_by(|a, b| a.global_lp.total_cmp(&b.global_lp));
                let chosen = ranked[(ranked.len() - 1) / 2];
                let ties = group
                    .iter()
                    .filter(|r| r.global_lp == chosen.global_lp)
                    .count();
                out.push(record(chosen, strategy, Some(chosen.global_lp), ties > 1));
            }
        }
    }
    Ok(out)
}

/// First candidate (in tie-break order) whose score is extreme in direction
/// `want`.
fn extreme(
    group: &[&ScoreRecord],
    score: impl Fn(&ScoreRecord) -> f64,
    want: Ordering,
    strategy: SelectionStrategy,
) -> SelectionRecord {
    let mut best = group[0];
    for r in &group[1..] {
        if score(r).total_cmp(&score(best)) == want {
            best = r;
        }
    }
    let best_score = score(best);
    let ties = group.iter().filter(|r| score(r) == best_score).count();
    record(best, strategy, Some(best_score), ties > 1)
}
