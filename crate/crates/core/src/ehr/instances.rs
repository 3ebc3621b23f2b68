use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::codes::CcsId;
use super::dataset::{Dataset, PatientRecord, Visit};

/// Which visit transitions become prediction instances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceMode {
    /// One instance per patient: every visit but the last is input.
    #[default]
    LastVisit,
    /// One instance per visit transition.
    AllPrefixes,
}

/// A next-visit prediction problem built from a patient prefix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionInstance {
    pub patient_id: String,
    pub input_visits: Vec<Visit>,
    pub target_day: u32,
    pub target_overall: BTreeSet<CcsId>,
    pub target_novel: BTreeSet<CcsId>,
    pub history_ccs: BTreeSet<CcsId>,
}

impl PredictionInstance {
    /// Builds the instance predicting `patient.visits[target]` from everything before it.
    ///
    /// Panics if `target` is 0 or out of range.
    pub fn from_prefix(patient: &PatientRecord, target: usize) -> Self {
        assert!(target >= 1 && target < patient.visits.len(), "target visit {target} out of range");
        let input_visits = patient.visits[..target].to_vec();
        let history_ccs: BTreeSet<CcsId> =
            input_visits.iter().flat_map(|v| v.ccs.iter().cloned()).collect();
        let target_visit = &patient.visits[target];
        let target_overall = target_visit.ccs.clone();
        let target_novel = target_overall.difference(&history_ccs).cloned().collect();
        Self {
            patient_id: patient.patient_id.clone(),
            input_visits,
            target_day: target_visit.day,
            target_overall,
            target_novel,
            history_ccs,
        }
    }

    pub fn last_input_visit(&self) -> &Visit {
        self.input_visits.last().expect("instance has input visits")
    }

    /// Days between the last input visit and the visit being predicted.
    pub fn days_since_last_visit(&self) -> u32 {
        self.target_day.saturating_sub(self.last_input_visit().day)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("min_visits must be at least 2, got {0}")]
pub struct MinVisitsError(pub usize);

/// Builds prediction instances from patients with at least `min_visits` visits.
pub fn build_instances(
    dataset: &Dataset,
    min_visits: usize,
    mode: InstanceMode,
) -> Result<Vec<PredictionInstance>, MinVisitsError> {
    if min_visits < 2 {
        return Err(MinVisitsError(min_visits));
    }
    let mut out = Vec::new();
    for patient in dataset.patients.iter().filter(|p| p.visits.len() >= min_visits) {
        match mode {
            InstanceMode::LastVisit => {
                out.push(PredictionInstance::from_prefix(patient, patient.visits.len() - 1));
            }
            InstanceMode::AllPrefixes => {
                out.extend((1..patient.visits.len()).map(|t| PredictionInstance::from_prefix(patient, t)));
            }
        }
    }
    Ok(out)
}
