use std::collections::BTreeMap;

use serde::Serialize;

use super::{CurationError, SelectionRecord};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompositionRow {
    pub teacher_id: String,
    pub count: u64,
    /// Share of all selections, in percent.
    pub percent: f64,
}

/// Share of selected responses contributed by each teacher, sorted by
/// teacher id. Every record must come from the same strategy run.
pub fn composition_report(
    selection: &[SelectionRecord],
) -> Result<Vec<CompositionRow>, CurationError> {
    let first = selection.first().ok_or(CurationError::Empty)?;
    if let Some(other) = selection.iter().find(|r| r.strategy != first.strategy) {
        return Err(CurationError::MixedStrategies(
            first.strategy.to_string(),
            other.strategy.to_string(),
        ));
    }
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for r in selection {
        *counts.entry(r.teacher_id.as_str()).or_default() += 1;
    }
    let total = selection.len() as f64;
    Ok(counts
        .into_iter()
        .map(|(teacher, count)| CompositionRow {
            teacher_id: teacher.to_string(),
            count,
            percent: 100.0 * count as f64 / total,
        })
        .collect())
}

/// CSV with header `teacher_id,count,percent`, percent to one decimal.
pub fn composition_csv(rows: &[CompositionRow]) -> Result<String, csv::Error> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(["teacher_id", "count", "percent"])?;
    for r in rows {
        w.write_record([
            r.teacher_id.clone(),
            r.count.to_string(),
            format!("{:.1}", r.percent),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::{SelectionStrategy, StrategyKind};

    fn sel(prompt: usize, teacher: &str, kind: StrategyKind, seed: Option<u64>) -> SelectionRecord {
        SelectionRecord {
            prompt_id: format!("p{prompt}"),
            teacher_id: teacher.into(),
            candidate_index: 0,
            strategy: SelectionStrategy::new(kind, seed).unwrap(),
            score: None,
            tie_broken: false,
        }
    }

    #[test]
    fn percentages_of_817() {
        let mut records = Vec::new();
        for (teacher, n) in [("deepseek", 350), ("qwen3", 290), ("qwq", 177)] {
            for _ in 0..n {
                records.push(sel(
                    records.len(),
                    teacher,
                    StrategyKind::LocalHighest,
                    None,
                ));
            }
        }
        let rows = composition_report(&records).unwrap();
        assert_eq!(rows.iter().map(|r| r.count).sum::<u64>(), 817);
        assert_eq!(
            composition_csv(&rows).unwrap(),
            "teacher_id,count,percent\ndeepseek,350,42.8\nqwen3,290,35.5\nqwq,177,21.7\n"
        );
    }

    #[test]
    fn mixed_strategies_rejected() {
        let records = [
            sel(0, "a", StrategyKind::LocalHighest, None),
            sel(1, "a", StrategyKind::Random, Some(1)),
        ];
        assert!(matches!(
            composition_report(&records),
            Err(CurationError::MixedStrategies(..))
        ));
        let seeds = [
            sel(0, "a", StrategyKind::Random, Some(1)),
            sel(1, "a", StrategyKind::Random, Some(2)),
        ];
        assert!(composition_report(&seeds).is_err());
    }

    #[test]
    fn empty_rejected() {
        assert!(matches!(composition_report(&[]), Err(CurationError::Empty)));
    }
}
