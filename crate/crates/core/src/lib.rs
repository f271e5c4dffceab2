//! Student-aware selection of teacher responses.

pub mod cli;
pub mod corpus;
pub mod curation;
pub(crate) mod fsutil;
pub mod metrics;
pub mod numeric;
pub mod scorer;
pub mod segmenter;
