use std::collections::HashMap;

use crate::corpus::{CandidateResponse, PromptRecord};

const BOXED: &str = "\\boxed{";
const MARKER: &str = "answer is";

/// Content of the last balanced `\boxed{...}` span, or else the text after
/// the last "answer is" on the last non-empty line (case-insensitive, with a
/// leading colon and trailing period removed).
pub fn extract_final_answer(text: &str) -> Option<String> {
    if let Some(boxed) = last_boxed(text) {
        return Some(boxed.to_string());
    }
    let line = text.lines().rev().find(|l| !l.trim().is_empty())?;
    // ASCII lowering keeps byte offsets aligned with the original
    let at = line.to_ascii_lowercase().rfind(MARKER)?;
    let answer = line[at + MARKER.len()..]
        .trim()
        .trim_start_matches(':')
        .trim()
        .trim_end_matches('.')
        .trim();
    (!answer.is_empty()).then(|| answer.to_string())
}

fn last_boxed(text: &str) -> Option<&str> {
    let starts: Vec<usize> = text.match_indices(BOXED).map(|(i, _)| i).collect();
    starts.into_iter().rev().find_map(|start| {
        let body = start + BOXED.len();
        let mut depth = 1usize;
        for (off, c) in text[body..].char_indices() {
            match c {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(&text[body..body + off]);
                    }
                }
                _ => {}
            }
        }
        None
    })
}

/// Drops all whitespace, then peels surrounding `$...$` and matching outer
/// braces until neither applies.
pub fn normalize_answer(answer: &str) -> String {
    let mut s: String = answer.chars().filter(|c| !c.is_whitespace()).collect();
    loop {
        let dollars = s.len() >= 2 && s.starts_with('$') && s.ends_with('$');
        if !dollars && !(s.starts_with('{') && outer_brace_matches(&s)) {
            return s;
        }
        s = s[1..s.len() - 1].to_string();
    }
}

/// True when the `{` at position 0 closes at the final character.
fn outer_brace_matches(s: &str) -> bool {
    let mut depth = 0i64;
    for (i, c) in s.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return i == s.len() - 1;
                }
            }
            _ => {}
        }
    }
    false
}

/// Keeps candidates whose extracted final answer equals the prompt's ground
/// truth after normalization, marking them `answer_correct`. Candidates
/// whose prompt has no ground truth pass through unchanged.
pub fn filter_correct(
    candidates: &[CandidateResponse],
    prompts: &[PromptRecord],
) -> Vec<CandidateResponse> {
    let truth: HashMap<&str, Option<String>> = prompts
        .iter()
        .map(|p| {
            (
                p.prompt_id.as_str(),
                p.ground_truth.as_deref().map(normalize_answer),
            )
        })
        .collect();
    let mut unchecked = 0usize;
    let kept: Vec<CandidateResponse> = candidates
        .iter()
        .filter_map(|c| match truth.get(c.prompt_id.as_str()) {
            Some(Some(expected)) => {
                let got = extract_final_answer(&c.text).map(|a| normalize_answer(&a));
                (got.as_ref() == Some(expected)).then(|| CandidateResponse {
                    answer_correct: Some(true),
                    ..c.clone()
                })
            }
            _ => {
                unchecked += 1;
                Some(c.clone())
            }
        })
        .collect();
    if unchecked > 0 {
        log::warn!("{unchecked} candidates have no ground truth and were kept unchecked");
    }
    kept
}
