//! Selection, teacher ranking, reporting and answer filtering over scored
//! candidates.

mod filter;
mod rank;
mod report;
mod select;
mod sft;

use thiserror::Error;

pub use filter::{extract_final_answer, filter_correct, normalize_answer};
pub use rank::{
    rank_teachers, rank_teachers_subset, TeacherRankEntry, TeacherRanking, TIE_TOLERANCE,
};
pub use report::{composition_csv, composition_report, CompositionRow};
pub use select::{select, SelectionRecord, SelectionStrategy, StrategyKind};
pub use sft::{build_sft_records, emit_sft_dataset, load_sft_dataset, SftRecord};

use crate::corpus::{CandidateKey, CorpusError};

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("no records to process")]
    Empty,
    #[error("records mix scorers or window policies: {0}")]
    MixedScores(String),
    #[error("selections mix strategies: {0} and {1}")]
    MixedStrategies(String, String),
    #[error("candidate {0} appears more than once")]
    Duplicate(CandidateKey),
    #[error("subset of {requested} prompts requested but {available} are available")]
    InvalidSubset { requested: usize, available: usize },
    #[error("selection {0} does not resolve to a prompt and candidate")]
    Dangling(CandidateKey),
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}
