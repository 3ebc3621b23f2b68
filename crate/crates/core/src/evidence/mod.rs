//! Evidence derived from backend logits: top-K candidates, logit-ordered
//! history with ICD propagation, and co-occurrence links from history to
//! novel candidates.

pub mod cooccurrence;

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::LogitVector;
use crate::ehr::{CcsId, IcdId, Ontology, Visit};

pub use cooccurrence::{build_cooccurrence, load_cooccurrence, save_cooccurrence, CooccurrenceError, CooccurrenceMatrix};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvidenceError {
    #[error("K must be at least 1")]
    ZeroK,
    #[error("no logit for history code {0}")]
    MissingLogit(CcsId),
}

/// Prediction task. Novel excludes every code seen in the patient's history.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Overall,
    #[default]
    Novel,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Overall => "overall",
            Task::Novel => "novel",
        })
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "overall" => Ok(Task::Overall),
            "novel" => Ok(Task::Novel),
            other => Err(format!("unknown task `{other}` (expected `overall` or `novel`)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    /// Descending by logit, ties by code id.
    pub entries: Vec<(CcsId, f64)>,
    pub k: usize,
    pub mode: Task,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn codes(&self) -> impl Iterator<Item = &CcsId> {
        self.entries.iter().map(|(c, _)| c)
    }

    pub fn contains(&self, code: &CcsId) -> bool {
        self.entries.iter().any(|(c, _)| c == code)
    }
}

fn rank_desc(a: &(CcsId, f64), b: &(CcsId, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Top-`k` codes by logit. In Novel mode history codes are removed first.
pub fn select_candidates(
    logits: &LogitVector,
    k: usize,
    mode: Task,
    history_ccs: &BTreeSet<CcsId>,
) -> Result<CandidateSet, EvidenceError> {
    if k == 0 {
        return Err(EvidenceError::ZeroK);
    }
    let mut entries: Vec<(CcsId, f64)> = logits
        .iter()
        .filter(|(c, _)| mode == Task::Overall || !history_ccs.contains(*c))
        .map(|(c, s)| (c.clone(), s))
        .collect();
    entries.sort_by(rank_desc);
    entries.truncate(k);
    Ok(CandidateSet { entries, k, mode })
}

/// History codes ordered by descending logit, ties by code id.
pub fn prioritize_history(
    history_ccs: &BTreeSet<CcsId>,
    logits: &LogitVector,
) -> Result<Vec<(CcsId, f64)>, EvidenceError> {
    let mut out: Vec<(CcsId, f64)> = history_ccs
        .iter()
        .map(|c| logits.get(c.as_str()).map(|s| (c.clone(), s)).ok_or_else(|| EvidenceError::MissingLogit(c.clone())))
        .collect::<Result<_, _>>()?;
    out.sort_by(rank_desc);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryGroup {
    pub ccs: CcsId,
    /// Distinct ICD codes of the input visits mapping to `ccs`, first occurrence first.
    pub icds: Vec<IcdId>,
    pub logit: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrioritizedHistory {
    pub groups: Vec<HistoryGroup>,
    /// Input ICD codes whose parent is not among the ordered CCS codes.
    pub unmapped: Vec<IcdId>,
}

/// Expands ordered CCS codes into the ICD codes observed under each.
pub fn propagate_to_icd(ordered_ccs: &[(CcsId, f64)], input_visits: &[Visit], ontology: &Ontology) -> PrioritizedHistory {
    let mut seen: HashSet<&IcdId> = HashSet::new();
    let mut first_seen: Vec<&IcdId> = Vec::new();
    for visit in input_visits {
        for icd in &visit.icd {
            if seen.insert(icd) {
                first_seen.push(icd);
            }
        }
    }
    let listed: HashSet<&CcsId> = ordered_ccs.iter().map(|(c, _)| c).collect();
    let groups = ordered_ccs
        .iter()
        .map(|(ccs, logit)| HistoryGroup {
            ccs: ccs.clone(),
            icds: first_seen
                .iter()
                .filter(|icd| ontology.ccs_of(icd.as_str()) == Some(ccs))
                .map(|icd| (*icd).clone())
                .collect(),
            logit: *logit,
        })
        .collect();
    let unmapped = first_seen
        .iter()
        .filter(|icd| ontology.ccs_of(icd.as_str()).is_none_or(|p| !listed.contains(p)))
        .map(|icd| (*icd).clone())
        .collect();
    PrioritizedHistory { groups, unmapped }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub historical: CcsId,
    pub candidate: CcsId,
    pub count: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationalEvidence {
    /// In candidate order; at most one link per candidate.
    pub links: Vec<Relation>,
}

impl RelationalEvidence {
    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn supports(&self, candidate: &CcsId) -> bool {
        self.links.iter().any(|l| &l.candidate == candidate)
    }
}

/// Links each candidate outside the history to its most co-occurring
/// history code. Zero co-occurrence gives no link.
pub fn extract_relations(
    history_ccs: &BTreeSet<CcsId>,
    candidates: &CandidateSet,
    g: &CooccurrenceMatrix,
) -> RelationalEvidence {
    let mut links = Vec::new();
    for cand in candidates.codes() {
        if history_ccs.contains(cand) {
            continue;
        }
        let mut best: Option<(&CcsId, u32)> = None;
        // history iterates in ascending id, so strict > keeps the smallest id on ties
        for h in history_ccs {
            let c = g.get(h, cand);
            if c > 0 && best.is_none_or(|(_, b)| c > b) {
                best = Some((h, c));
            }
        }
        if let Some((h, count)) = best {
            links.push(Relation { historical: h.clone(), candidate: cand.clone(), count });
        }
    }
    RelationalEvidence { links }
}
