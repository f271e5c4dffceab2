use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CurationError, SelectionRecord};
use crate::corpus::{
    load_jsonl, write_jsonl, CandidateKey, CandidateResponse, JsonlRecord, PromptRecord,
};

/// One supervised fine-tuning pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftRecord {
    pub prompt: String,
    pub response: String,
    pub teacher_id: String,
}

impl JsonlRecord for SftRecord {
    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

/// Resolves selections to prompt/response text, ordered by prompt id and
/// then candidate key.
pub fn build_sft_records(
    selections: &[SelectionRecord],
    prompts: &[PromptRecord],
    candidates: &[CandidateResponse],
) -> Result<Vec<SftRecord>, CurationError> {
    let prompt_text: HashMap<&str, &str> = prompts
        .iter()
        .map(|p| (p.prompt_id.as_str(), p.text.as_str()))
        .collect();
    let by_key: HashMap<CandidateKey, &CandidateResponse> =
        candidates.iter().map(|c| (c.key(), c)).collect();
    let mut ordered: Vec<&SelectionRecord> = selections.iter().collect();
    ordered.sort_by(|a, b| {
        (
            a.prompt_id.as_str(),
            a.teacher_id.as_str(),
            a.candidate_index,
        )
            .cmp(&(
                b.prompt_id.as_str(),
                b.teacher_id.as_str(),
                b.candidate_index,
            ))
    });
    ordered
        .into_iter()
        .map(|s| {
            let key = CandidateKey {
                prompt_id: s.prompt_id.clone(),
                teacher_id: s.teacher_id.clone(),
                candidate_index: s.candidate_index,
            };
            match (prompt_text.get(s.prompt_id.as_str()), by_key.get(&key)) {
                (Some(prompt), Some(cand)) => Ok(SftRecord {
                    prompt: prompt.to_string(),
                    response: cand.text.clone(),
                    teacher_id: cand.teacher_id.clone(),
                }),
                _ => Err(CurationError::Dangling(key)),
            }
        })
        .collect()
}

/// Writes the SFT dataset as JSONL. Nothing is written if any selection
/// fails to resolve.
pub fn emit_sft_dataset(
    selections: &[SelectionRecord],
    prompts: &[PromptRecord],
    candidates: &[CandidateResponse],
    path: &Path,
) -> Result<Vec<SftRecord>, CurationError> {
    let records = build_sft_records(selections, prompts, candidates)?;
    write_jsonl(&records, path)?;
    Ok(records)
}

pub fn load_sft_dataset(path: &Path) -> Result<Vec<SftRecord>, CurationError> {
    Ok(load_jsonl::<SftRecord>(path)?
        .into_iter()
        .map(|(_, r)| r)
        .collect())
}
