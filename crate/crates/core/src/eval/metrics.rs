//! Ranking metrics over a single task.

use std::collections::BTreeSet;

use super::{EvalError, RunRecord};
use crate::ehr::CcsId;
use crate::evidence::Task;

/// Drops codes already in the history, keeping order.
pub fn novel_filter(ranked: &[CcsId], history: &BTreeSet<CcsId>) -> Vec<CcsId> {
    ranked.iter().filter(|c| !history.contains(*c)).cloned().collect()
}

fn hits(ranked: &[CcsId], target: &BTreeSet<CcsId>, k: usize) -> usize {
    ranked.iter().take(k).filter(|c| target.contains(*c)).count()
}

/// `|top-k ∩ target| / min(k, |target|)`.
pub fn visit_precision_at_k(ranked: &[CcsId], target: &BTreeSet<CcsId>, k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if target.is_empty() {
        return Err(EvalError::EmptyTarget);
    }
    Ok(hits(ranked, target, k) as f64 / k.min(target.len()) as f64)
}

/// The ranking and target a record is scored on for `task`, or `None` when
/// it is not eligible (empty target).
pub fn scored_view(record: &RunRecord, task: Task) -> Option<(Vec<CcsId>, &BTreeSet<CcsId>)> {
    match task {
        Task::Overall => (!record.target_overall.is_empty()).then(|| (record.ranked.clone(), &record.target_overall)),
        Task::Novel => (!record.target_novel.is_empty())
            .then(|| (novel_filter(&record.ranked, &record.history_ccs), &record.target_novel)),
    }
}

/// Mean visit-level precision over eligible records.
pub fn mean_precision_at_k(records: &[RunRecord], k: usize, task: Task) -> Result<f64, EvalError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in records {
        if let Some((ranked, target)) = scored_view(r, task) {
            sum += visit_precision_at_k(&ranked, target, k)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::NoEligible(task));
    }
    Ok(sum / n as f64)
}

/// Pooled hit ratio `Σ |top-k ∩ Y| / Σ |Y|` over eligible records.
pub fn code_accuracy_at_k(records: &[RunRecord], k: usize, task: Task) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let (mut num, mut den) = (0usize, 0usize);
    for r in records {
        if let Some((ranked, target)) = scored_view(r, task) {
            num += hits(&ranked, target, k);
            den += target.len();
        }
    }
    if den == 0 {
        return Err(EvalError::NoEligible(task));
    }
    Ok(num as f64 / den as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(s: &[&str]) -> Vec<CcsId> {
        s.iter().map(|&c| c.into()).collect()
    }

    fn set(s: &[&str]) -> BTreeSet<CcsId> {
        s.iter().map(|&c| c.into()).collect()
    }

    #[test]
    fn precision_examples() {
        let p = visit_precision_at_k(&ids(&["a", "b", "x", "y", "z"]), &set(&["a", "b", "c"]), 5).unwrap();
        assert!((p - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(visit_precision_at_k(&ids(&["a", "b", "c", "d"]), &set(&["c", "a"]), 3).unwrap(), 1.0);
        assert_eq!(visit_precision_at_k(&ids(&["x", "y"]), &set(&["a"]), 2).unwrap(), 0.0);
        assert_eq!(visit_precision_at_k(&ids(&["a"]), &set(&[]), 2), Err(EvalError::EmptyTarget));
        assert_eq!(visit_precision_at_k(&ids(&["a"]), &set(&["a"]), 0), Err(EvalError::ZeroK));
    }

    #[test]
    fn filter_examples() {
        assert_eq!(novel_filter(&ids(&["a", "b", "c"]), &set(&["a"])), ids(&["b", "c"]));
        assert_eq!(novel_filter(&ids(&["a", "b"]), &set(&[])), ids(&["a", "b"]));
        assert!(novel_filter(&ids(&["a", "b"]), &set(&["a", "b", "c"])).is_empty());
    }
}
