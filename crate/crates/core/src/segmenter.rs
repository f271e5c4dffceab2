//! Lossless sentence splitting of responses into reasoning steps.
//!
//! A boundary falls after sentence-terminal punctuation (`.`, `!`, `?`,
//! `。`, `！`, `？`) that is followed by whitespace or the end of the text,
//! and after any whitespace run containing a blank line. The whitespace
//! following a boundary stays with the preceding step, so concatenating the
//! steps gives back the input byte for byte.
//!
//! No boundary is placed after a configured abbreviation or inside a
//! `$...$` / `$$...$$` math span. A decimal point never qualifies because it
//! is followed by a digit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CandidateResponse, Step};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SegmentError {
    #[error("cannot segment empty text")]
    EmptyText,
    #[error("abbreviation `{0}` must end with '.'")]
    BadAbbreviation(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub abbreviations: Vec<String>,
    pub split_on_blank_line: bool,
    pub protect_math_spans: bool,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            abbreviations: ["e.g.", "i.e.", "Dr.", "Mr.", "Eq.", "Fig.", "vs."]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            split_on_blank_line: true,
            protect_math_spans: true,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<(), SegmentError> {
        match self.abbreviations.iter().find(|a| !a.ends_with('.')) {
            Some(bad) => Err(SegmentError::BadAbbreviation(bad.clone())),
            None => Ok(()),
        }
    }
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '。' | '！' | '？')
}

/// Splits `text` into 1-indexed steps whose concatenation is `text`.
pub fn segment(text: &str, config: &SegmenterConfig) -> Result<Vec<Step>, SegmentError> {
    if text.is_empty() {
        return Err(SegmentError::EmptyText);
    }
    config.validate()?;
    let spans = if config.protect_math_spans {
        math_spans(text)
    } else {
        Vec::new()
    };
    let in_span = |pos: usize| spans.iter().any(|&(s, e)| s <= pos && pos < e);

    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut cuts: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if c.is_whitespace() {
            // whitespace run [i, j)
            let mut j = i;
            let mut newlines = 0;
            while j < chars.len() && chars[j].1.is_whitespace() {
                if chars[j].1 == '\n' {
                    newlines += 1;
                }
                j += 1;
            }
            if config.split_on_blank_line
                && newlines >= 2
                && pos > 0
                && j < chars.len()
                && !in_span(pos)
            {
                cuts.push(chars[j].0);
            }
            i = j;
            continue;
        }
        if is_terminal(c) && !in_span(pos) {
            let next = chars.get(i + 1).map(|&(_, n)| n);
            let followed_ok = next.is_none_or(char::is_whitespace);
            if followed_ok && !(c == '.' && ends_with_abbreviation(text, pos, config)) {
                let mut j = i + 1;
                while j < chars.len() && chars[j].1.is_whitespace() {
                    j += 1;
                }
                if j < chars.len() {
                    cuts.push(chars[j].0);
                }
                i = j;
                continue;
            }
        }
        i += 1;
    }
    cuts.sort_unstable();
    cuts.dedup();

    let mut steps = Vec::with_capacity(cuts.len() + 1);
    let mut start = 0;
    for end in cuts.into_iter().chain(std::iter::once(text.len())) {
        steps.push(Step {
            index: steps.len() + 1,
            text: text[start..end].to_string(),
        });
        start = end;
    }
    Ok(steps)
}

/// Byte-exact concatenation of step texts.
pub fn reconstruct(steps: &[Step]) -> String {
    steps.iter().map(|s| s.text.as_str()).collect()
}

/// Fills `candidate.steps` from its text.
pub fn segment_candidate(
    candidate: &mut CandidateResponse,
    config: &SegmenterConfig,
) -> Result<(), SegmentError> {
    candidate.steps = segment(&candidate.text, config)?;
    Ok(())
}

/// Whether the whitespace-delimited word ending at the `.` at byte `dot`
/// ends with a configured abbreviation.
fn ends_with_abbreviation(text: &str, dot: usize, config: &SegmenterConfig) -> bool {
    let word_end = dot + 1;
    let word_start = text[..dot]
        .char_indices()
        .rev()
        .find(|(_, c)| c.is_whitespace())
        .map(|(i, c)| i + c.len_utf8())
        .unwrap_or(0);
    let word = &text[word_start..word_end];
    config.abbreviations.iter().any(|abbr| {
        word.strip_suffix(abbr.as_str()).is_some_and(|head| {
            head.chars()
                .next_back()
                .is_none_or(|c| !c.is_alphanumeric())
        })
    })
}

/// Byte ranges `[start, end)` of `$...$` and `$$...$$` spans. `\$` is a
/// literal dollar. An opener with no closer before the next blank line is
/// treated as a literal.
fn math_spans(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => i += 2,
            b'$' => {
                let display = bytes.get(i + 1) == Some(&b'$');
                let open_len = if display { 2 } else { 1 };
                match find_closer(bytes, i + open_len, display) {
                    Some(close_end) => {
                        spans.push((i, close_end));
                        i = close_end;
                    }
                    None => i += open_len,
                }
            }
            _ => i += 1,
        }
    }
    spans
}

/// Scans from `from` for the closing delimiter; returns the byte offset just
/// past it.
fn find_closer(bytes: &[u8], from: usize, display: bool) -> Option<usize> {
    let mut i = from;
    // set after a newline, cleared by any non-whitespace byte
    let mut line_blank = false;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => {
                line_blank = false;
                i += 2;
                continue;
            }
            b'\n' => {
                if line_blank {
                    return None;
                }
                line_blank = true;
            }
            b' ' | b'\t' | b'\r' => {}
            b'$' => {
                if !display {
                    return Some(i + 1);
                }
                if bytes.get(i + 1) == Some(&b'$') {
                    return Some(i + 2);
                }
                line_blank = false;
            }
            _ => line_blank = false,
        }
        i += 1;
    }
    None
}
