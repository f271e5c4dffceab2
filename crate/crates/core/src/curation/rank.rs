use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::CurationError;
use crate::corpus::ScoreRecord;
use crate::numeric::mean;

/// Means closer than this are reported as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TeacherRankEntry {
    pub rank: usize,
    pub teacher_id: String,
    pub mean_local_lp: f64,
    pub mean_global_lp: f64,
    pub n_prompts: usize,
    pub n_candidates: usize,
    /// Tied with a neighbour on mean local score.
    pub tie: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TeacherRanking {
    pub entries: Vec<TeacherRankEntry>,
    /// Prompts the ranking was computed on, when it used a subset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subset_prompt_ids: Option<Vec<String>>,
}

impl TeacherRanking {
    pub fn order(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.teacher_id.as_str()).collect()
    }

    /// CSV: `rank,teacher_id,mean_local_lp,mean_global_lp,n_prompts,n_candidates,tie`.
    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record([
            "rank",
            "teacher_id",
            "mean_local_lp",
            "mean_global_lp",
            "n_prompts",
            "n_candidates",
            "tie",
        ])?;
        for e in &self.entries {
            w.write_record([
                e.rank.to_string(),
                e.teacher_id.clone(),
                e.mean_local_lp.to_string(),
                e.mean_global_lp.to_string(),
                e.n_prompts.to_string(),
                e.n_candidates.to_string(),
                e.tie.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Orders teachers by mean local score, highest first. Global means are
/// reported but never used for ordering. Teachers whose means differ by at
/// most [`TIE_TOLERANCE`] are flagged and listed in lexicographic order.
pub fn rank_teachers(scores: &[ScoreRecord]) -> Result<TeacherRanking, CurationError> {
    if scores.is_empty() {
        return Err(CurationError::Empty);
    }
    let first = &scores[0];
    if let Some(other) = scores
        .iter()
        .find(|r| r.scorer_id != first.scorer_id || r.window_policy != first.window_policy)
    {
        return Err(CurationError::MixedScores(format!(
            "{} [{}] vs {} [{}]",
            first.scorer_id, first.window_policy, other.scorer_id, other.window_policy
        )));
    }
    let mut by_teacher: BTreeMap<&str, Vec<&ScoreRecord>> = BTreeMap::new();
    for r in scores {
        by_teacher.entry(r.teacher_id.as_str()).or_default().push(r);
    }
    let mut entries: Vec<TeacherRankEntry> = by_teacher
        .iter()
        .map(|(teacher, recs)| {
            let locals: Vec<f64> = recs.iter().map(|r| r.local_lp).collect();
            let globals: Vec<f64> = recs.iter().map(|r| r.global_lp).collect();
            let prompts: BTreeSet<&str> = recs.iter().map(|r| r.prompt_id.as_str()).collect();
            TeacherRankEntry {
                rank: 0,
                teacher_id: teacher.to_string(),
                mean_local_lp: mean(&locals),
                mean_global_lp: mean(&globals),
                n_prompts: prompts.len(),
                n_candidates: recs.len(),
                tie: false,
            }
        })
        .collect();

    let coverage: BTreeSet<usize> = entries.iter().map(|e| e.n_prompts).collect();
    if coverage.len() > 1 {
        log::warn!(
            "teachers cover different numbers of prompts ({:?}); means are not directly comparable",
            coverage
        );
    }

    entries.sort_by(|a, b| {
        b.mean_local_lp
            .total_cmp(&a.mean_local_lp)
            .then_with(|| a.teacher_id.cmp(&b.teacher_id))
    });
    // chain near-equal neighbours into tie groups
    let mut start = 0;
    while start < entries.len() {
        let mut end = start + 1;
        while end < entries.len()
            && (entries[end - 1].mean_local_lp - entries[end].mean_local_lp).abs() <= TIE_TOLERANCE
        {
            end += 1;
        }
        if end - start > 1 {
            entries[start..end].sort_by(|a, b| a.teacher_id.cmp(&b.teacher_id));
            for e in &mut entries[start..end] {
                e.tie = true;
            }
        }
        start = end;
    }
    for (i, e) in entries.iter_mut().enumerate() {
        e.rank = i + 1;
    }
    Ok(TeacherRanking {
        entries,
        subset_prompt_ids: None,
    })
}

/// Ranks teachers on `n_prompts` prompts drawn uniformly without
/// replacement (ChaCha8 seeded with `seed`, over prompt ids in sorted
/// order). The chosen ids are returned with the ranking.
pub fn rank_teachers_subset(
    scores: &[ScoreRecord],
    n_prompts: usize,
    seed: u64,
) -> Result<TeacherRanking, CurationError> {
    let all: Vec<&str> = scores
        .iter()
        .map(|r| r.prompt_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if n_prompts == 0 || n_prompts > all.len() {
        return Err(CurationError::InvalidSubset {
            requested: n_prompts,
            available: all.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: BTreeSet<&str> = rand::seq::index::sample(&mut rng, all.len(), n_prompts)
        .into_iter()
        .map(|i| all[i])
        .collect();
    let subset: Vec<ScoreRecord> = scores
        .iter()
        .filter(|r| chosen.contains(r.prompt_id.as_str()))
        .cloned()
        .collect();
    let mut ranking = rank_teachers(&subset)?;
    ranking.subset_prompt_ids = Some(chosen.into_iter().map(String::from).collect());
    Ok(ranking)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::WindowPolicy;

    fn rec(prompt: &str, teacher: &str, global: f64, local: f64) -> ScoreRecord {
        ScoreRecord {
            prompt_id: prompt.into(),
            teacher_id: teacher.into(),
            candidate_index: 0,
            scorer_id: "s".into(),
            token_count: 10,
            global_lp: global,
            step_lps: vec![local],
            step_token_counts: vec![10],
            local_lp: local,
            window_policy: WindowPolicy::default(),
        }
    }

    #[test]
    fn reported_student_means_rank_by_local() {
        // local and global means of the three teachers for a 7B student
        let scores = [
            rec("p", "Qwen3-32B", -0.697, -0.279),
            rec("p", "DeepSeek-R1", -0.796, -0.264),
            rec("p", "QWQ-32B", -0.743, -0.241),
        ];
        let r = rank_teachers(&scores).unwrap();
        assert_eq!(r.order(), vec!["QWQ-32B", "DeepSeek-R1", "Qwen3-32B"]);
        assert_eq!(r.entries[2].mean_global_lp, -0.697);
        assert!(r.entries.iter().all(|e| !e.tie));
    }

    #[test]
    fn single_teacher() {
        let r = rank_teachers(&[rec("p", "only", -1.0, -0.5)]).unwrap();
        assert_eq!(r.entries.len(), 1);
        assert_eq!(r.entries[0].rank, 1);
    }

    #[test]
    fn near_equal_means_tie_lexicographically() {
        let scores = [
            rec("p", "zed", -1.0, -0.3),
            rec("p", "amy", -1.0, -0.3 - 5e-13),
            rec("p", "bob", -1.0, -0.1),
        ];
        let r = rank_teachers(&scores).unwrap();
        assert_eq!(r.order(), vec!["bob", "amy", "zed"]);
        assert_eq!(
            r.entries.iter().map(|e| e.tie).collect::<Vec<_>>(),
            vec![false, true, true]
        );
    }

    #[test]
    fn empty_is_error() {
        assert!(matches!(rank_teachers(&[]), Err(CurationError::Empty)));
    }

    #[test]
    fn subset_bounds() {
        let scores: Vec<_> = (0..10)
            .map(|i| rec(&format!("p{i}"), "t", -1.0, -1.0))
            .collect();
        assert!(matches!(
            rank_teachers_subset(&scores, 0, 1),
            Err(CurationError::InvalidSubset { .. })
        ));
        assert!(matches!(
            rank_teachers_subset(&scores, 11, 1),
            Err(CurationError::InvalidSubset { .. })
        ));
        let r = rank_teachers_subset(&scores, 4, 1).unwrap();
        assert_eq!(r.subset_prompt_ids.as_ref().unwrap().len(), 4);
        assert_eq!(r.entries[0].n_prompts, 4);
        assert_eq!(rank_teachers_subset(&scores, 4, 1).unwrap(), r);
    }

    #[test]
    fn full_subset_equals_full_ranking() {
        let scores: Vec<_> = (0..30)
            .flat_map(|i| {
                let x = i as f64 * 0.013;
                [
                    rec(&format!("p{i}"), "a", -1.0 - x, -0.3 - x),
                    rec(&format!("p{i}"), "b", -0.9, -0.35 + x / 7.0),
                ]
            })
            .collect();
        let full = rank_teachers(&scores).unwrap();
        let sub = rank_teachers_subset(&scores, 30, 99).unwrap();
        assert_eq!(sub.entries, full.entries);
    }

    #[test]
    fn csv_output() {
        let r = rank_teachers(&[rec("p", "a", -1.0, -0.5)]).unwrap();
        assert_eq!(
            r.to_csv().unwrap(),
            "rank,teacher_id,mean_local_lp,mean_global_lp,n_prompts,n_candidates,tie\n1,a,-0.5,-1,1,1,false\n"
        );
    }
}
