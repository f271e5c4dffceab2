use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::CorpusError;

/// A record that can be stored one-per-line in a JSONL file.
pub trait JsonlRecord: Serialize + DeserializeOwned {
    /// Record-level invariants checked on load and before write.
    fn validate(&self) -> Result<(), String> {
        Ok(())
    }

    /// Name of the first non-finite float field, if any. JSON cannot carry
    /// NaN or infinities, and `serde_json` would silently emit `null`.
    fn non_finite_field(&self) -> Option<&'static str> {
        None
    }
}

/// Reads a JSONL file, returning each record with its 1-based line number.
/// Blank lines are skipped.
pub fn load_jsonl<T: JsonlRecord>(path: &Path) -> Result<Vec<(usize, T)>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: path.display().to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        record.validate().map_err(|message| CorpusError::Invalid {
            path: path.display().to_string(),
            line: line_no,
            message,
        })?;
        out.push((line_no, record));
    }
    Ok(out)
}

/// Serializes records to any writer, one JSON object per line.
pub fn write_jsonl_to<T: JsonlRecord, W: Write>(
    records: &[T],
    mut writer: W,
) -> Result<(), CorpusError> {
    for (index, record) in records.iter().enumerate() {
        if let Some(field) = record.non_finite_field() {
            return Err(CorpusError::NonFinite {
                index,
                field: field.to_string(),
            });
        }
        serde_json::to_writer(&mut writer, record)?;
        writer
            .write_all(b"\n")
            .map_err(|e| CorpusError::io(Path::new("<writer>"), e))?;
    }
    writer
        .flush()
        .map_err(|e| CorpusError::io(Path::new("<writer>"), e))
}

/// Writes records atomically: the file appears under `path` only once it is
/// complete.
pub fn write_jsonl<T: JsonlRecord>(records: &[T], path: &Path) -> Result<(), CorpusError> {
    let mut buf = Vec::new();
    write_jsonl_to(records, &mut buf)?;
    crate::fsutil::write_atomic(path, &buf).map_err(|e| CorpusError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        load_candidates, load_prompts, load_scores, CandidateResponse, PromptRecord, ScoreRecord,
        WindowPolicy,
    };
    use proptest::prelude::*;

    fn write_lines(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn prompts_load_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let body: String = (0..817)
            .map(|i| format!("{{\"prompt_id\":\"p{i}\",\"text\":\"question {i}\"}}\n"))
            .collect();
        let path = write_lines(&dir, "p.jsonl", &body);
        let prompts = load_prompts(&path).unwrap();
        assert_eq!(prompts.len(), 817);
        assert_eq!(prompts[0].prompt_id, "p0");
        assert_eq!(prompts[816].prompt_id, "p816");
    }

    #[test]
    fn empty_file_is_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(&dir, "p.jsonl", "");
        assert!(load_prompts(&path).unwrap().is_empty());
    }

    #[test]
    fn duplicate_prompt_id_names_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            &dir,
            "p.jsonl",
            "{\"prompt_id\":\"p1\",\"text\":\"a\"}\n{\"prompt_id\":\"p1\",\"text\":\"b\"}\n",
        );
        let err = load_prompts(&path).unwrap_err();
        assert!(matches!(err, CorpusError::Duplicate { line: 2, .. }));
        assert!(err.to_string().contains("p1"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            &dir,
            "p.jsonl",
            "{\"prompt_id\":\"p1\",\"text\":\"a\"}\n{not json\n",
        );
        match load_prompts(&path).unwrap_err() {
            CorpusError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn blank_prompt_text_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            &dir,
            "p.jsonl",
            "{\"prompt_id\":\"p1\",\"text\":\"  \\n\"}\n",
        );
        assert!(matches!(
            load_prompts(&path).unwrap_err(),
            CorpusError::Invalid { line: 1, .. }
        ));
    }

    #[test]
    fn candidates_teacher_grid() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = String::new();
        for t in ["qwq", "r1", "qwen3"] {
            for p in 0..817 {
                body.push_str(&format!(
                    "{{\"prompt_id\":\"p{p}\",\"teacher_id\":\"{t}\",\"candidate_index\":0,\"text\":\"x\"}}\n"
                ));
            }
        }
        let path = write_lines(&dir, "c.jsonl", &body);
        let cands = load_candidates(&path).unwrap();
        assert_eq!(cands.len(), 2451);
        assert_eq!(cands[817].teacher_id, "r1");
    }

    #[test]
    fn sixteen_samples_from_one_teacher() {
        let dir = tempfile::tempdir().unwrap();
        let body: String = (0..16)
            .map(|i| {
                format!(
                    "{{\"prompt_id\":\"p\",\"teacher_id\":\"t\",\"candidate_index\":{i},\"text\":\"y\"}}\n"
                )
            })
            .collect();
        let path = write_lines(&dir, "c.jsonl", &body);
        assert_eq!(load_candidates(&path).unwrap().len(), 16);
    }

    #[test]
    fn negative_candidate_index_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_lines(
            &dir,
            "c.jsonl",
            "{\"prompt_id\":\"p\",\"teacher_id\":\"t\",\"candidate_index\":-1,\"text\":\"y\"}\n",
        );
        assert!(matches!(
            load_candidates(&path).unwrap_err(),
            CorpusError::Malformed { line: 1, .. }
        ));
    }

    #[test]
    fn duplicate_candidate_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let line =
            "{\"prompt_id\":\"p\",\"teacher_id\":\"t\",\"candidate_index\":3,\"text\":\"y\"}\n";
        let path = write_lines(&dir, "c.jsonl", &format!("{line}{line}"));
        assert!(matches!(
            load_candidates(&path).unwrap_err(),
            CorpusError::Duplicate { line: 2, .. }
        ));
    }

    fn score(lp: f64) -> ScoreRecord {
        ScoreRecord {
            prompt_id: "p".into(),
            teacher_id: "t".into(),
            candidate_index: 0,
            scorer_id: "s".into(),
            token_count: 3,
            global_lp: lp,
            step_lps: vec![lp],
            step_token_counts: vec![3],
            local_lp: lp,
            window_policy: WindowPolicy::default(),
        }
    }

    #[test]
    fn nan_score_is_serialization_error() {
        let mut out = Vec::new();
        let err = write_jsonl_to(&[score(-0.1), score(f64::NAN)], &mut out).unwrap_err();
        assert!(matches!(err, CorpusError::NonFinite { index: 1, .. }));
    }

    #[test]
    fn empty_list_is_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        write_jsonl::<ScoreRecord>(&[], &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"");
    }

    #[test]
    fn score_record_key_order_is_fixed() {
        let mut out = Vec::new();
        write_jsonl_to(&[score(-0.5)], &mut out).unwrap();
        let line = String::from_utf8(out).unwrap();
        assert_eq!(
            line,
            "{\"prompt_id\":\"p\",\"teacher_id\":\"t\",\"candidate_index\":0,\"scorer_id\":\"s\",\
             \"token_count\":3,\"global_lp\":-0.5,\"step_lps\":[-0.5],\"step_token_counts\":[3],\
             \"local_lp\":-0.5,\"window_policy\":{\"kind\":\"fixed\",\"k\":4}}\n"
        );
    }

    fn arb_policy() -> impl Strategy<Value = WindowPolicy> {
        prop_oneof![
            (0usize..10).prop_map(|k| WindowPolicy::Fixed { k }),
            (1u32..=1000).prop_map(|n| WindowPolicy::Fraction {
                fraction: n as f64 / 1000.0
            }),
            Just(WindowPolicy::Full),
        ]
    }

    fn arb_score() -> impl Strategy<Value = ScoreRecord> {
        (
            "[a-z0-9]{1,8}",
            "[a-zA-Z\\-]{1,8}",
            any::<u32>(),
            1usize..5000,
            -50.0f64..=0.0,
            prop::collection::vec((-50.0f64..=0.0, 1usize..200), 1..20),
            arb_policy(),
        )
            .prop_map(|(pid, tid, idx, m, g, steps, policy)| {
                let step_lps: Vec<f64> = steps.iter().map(|s| s.0).collect();
                let local = crate::numeric::mean(&step_lps);
                ScoreRecord {
                    prompt_id: pid,
                    teacher_id: tid,
                    candidate_index: idx as u64,
                    scorer_id: "ngram:abc".into(),
                    token_count: m,
                    global_lp: g,
                    step_token_counts: steps.iter().map(|s| s.1).collect(),
                    step_lps,
                    local_lp: local,
                    window_policy: policy,
                }
            })
    }

    fn arb_candidate() -> impl Strategy<Value = CandidateResponse> {
        (
            "\\PC{1,6}",
            "[a-z]{1,6}",
            any::<u64>(),
            prop::collection::vec("\\PC{1,12}", 0..6),
            prop::option::of(any::<bool>()),
        )
            .prop_map(|(pid, tid, idx, parts, correct)| {
                let steps: Vec<crate::corpus::Step> = parts
                    .iter()
                    .enumerate()
                    .map(|(i, t)| crate::corpus::Step {
                        index: i + 1,
                        text: t.clone(),
                    })
                    .collect();
                let text = if parts.is_empty() {
                    "body".to_string()
                } else {
                    parts.concat()
                };
                CandidateResponse {
                    prompt_id: pid,
                    teacher_id: tid,
                    candidate_index: idx,
                    text,
                    steps,
                    answer_correct: correct,
                }
            })
            .prop_filter("non-blank text", |c| {
                !c.text.trim().is_empty() && !c.prompt_id.is_empty()
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn score_records_round_trip(records in prop::collection::vec(arb_score(), 0..40)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("s.jsonl");
            write_jsonl(&records, &path).unwrap();
            prop_assert_eq!(load_scores(&path).unwrap(), records);
        }

        #[test]
        fn candidates_round_trip(records in prop::collection::vec(arb_candidate(), 0..20)) {
            let mut seen = std::collections::HashSet::new();
            let records: Vec<_> = records.into_iter().filter(|c| seen.insert(c.key())).collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.jsonl");
            write_jsonl(&records, &path).unwrap();
            prop_assert_eq!(load_candidates(&path).unwrap(), records);
        }

        #[test]
        fn prompts_round_trip(texts in prop::collection::vec(("\\PC*[a-z]\\PC*", prop::option::of("\\PC{0,6}")), 0..20)) {
            let records: Vec<PromptRecord> = texts
                .into_iter()
                .enumerate()
                .map(|(i, (text, gt))| PromptRecord { prompt_id: format!("p{i}"), text, ground_truth: gt })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.jsonl");
            write_jsonl(&records, &path).unwrap();
            prop_assert_eq!(load_prompts(&path).unwrap(), records);
        }
    }
}
