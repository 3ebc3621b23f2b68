//! Patient records and the JSONL dataset format.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::codes::{CcsId, IcdId};
use super::ontology::Ontology;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("failed to access dataset: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("line {line}: unknown ICD code {code}")]
    UnknownIcd { line: usize, code: IcdId },
    #[error("line {line}: unknown CCS code {code}")]
    UnknownCcs { line: usize, code: CcsId },
    #[error("line {line}: patient {patient} visit on day {day} lists CCS {listed:?} but its ICD codes map to {derived:?}")]
    CcsMismatch {
        line: usize,
        patient: String,
        day: u32,
        listed: Vec<String>,
        derived: Vec<String>,
    },
    #[error("line {line}: patient {patient} has a visit without ICD codes")]
    EmptyVisit { line: usize, patient: String },
    #[error("line {line}: patient {patient} has no visits")]
    NoVisits { line: usize, patient: String },
    #[error("line {line}: empty patient id")]
    EmptyPatientId { line: usize },
    #[error("line {line}: duplicate patient id {patient}")]
    DuplicatePatient { line: usize, patient: String },
    #[error("failed to serialize record: {0}")]
    Serialize(serde_json::Error),
}

/// One encounter: a non-negative day offset and the diagnosis codes recorded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    pub day: u32,
    pub icd: BTreeSet<IcdId>,
    pub ccs: BTreeSet<CcsId>,
}

impl Visit {
    /// Builds a visit whose CCS set is the ontology image of `icd`.
    /// Codes unknown to the ontology contribute no CCS.
    pub fn from_icd<I, S>(day: u32, icd: I, ontology: &Ontology) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<IcdId>,
    {
        let icd: BTreeSet<IcdId> = icd.into_iter().map(Into::into).collect();
        let ccs = icd.iter().filter_map(|i| ontology.ccs_of(i.as_str()).cloned()).collect();
        Self { day, icd, ccs }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    /// Union of CCS codes over all visits.
    pub fn all_ccs(&self) -> BTreeSet<CcsId> {
        self.visits.iter().flat_map(|v| v.ccs.iter().cloned()).collect()
    }
}

/// An ordered collection of patients coded against one ontology.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub patients: Vec<PatientRecord>,
    pub ontology_ref: String,
}

impl Dataset {
    pub fn new(patients: Vec<PatientRecord>, ontology_ref: impl Into<String>) -> Self {
        Self { patients, ontology_ref: ontology_ref.into() }
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn patient_ids(&self) -> impl Iterator<Item = &str> {
        self.patients.iter().map(|p| p.patient_id.as_str())
    }

    pub fn n_visits(&self) -> usize {
        self.patients.iter().map(|p| p.visits.len()).sum()
    }

    /// Parses JSONL and validates every record against `ontology`.
    pub fn read_jsonl<R: BufRead>(reader: R, ontology: &Ontology) -> Result<Self, DatasetError> {
        let mut patients = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut record: PatientRecord = serde_json::from_str(&line)
                .map_err(|source| DatasetError::Parse { line: line_no, source })?;
            validate_record(&mut record, ontology, line_no)?;
            if !seen.insert(record.patient_id.clone()) {
                return Err(DatasetError::DuplicatePatient { line: line_no, patient: record.patient_id });
            }
            patients.push(record);
        }
        Ok(Self { patients, ontology_ref: ontology.fingerprint() })
    }

    pub fn write_jsonl<W: Write>(&self, mut writer: W) -> Result<(), DatasetError> {
        for patient in &self.patients {
            let line = serde_json::to_string(patient).map_err(DatasetError::Serialize)?;
            writer.write_all(line.as_bytes())?;
            writer.write_all(b"\n")?;
        }
        writer.flush()?;
        Ok(())
    }
}

fn validate_record(
    record: &mut PatientRecord,
    ontology: &Ontology,
    line: usize,
) -> Result<(), DatasetError> {
    if record.patient_id.trim().is_empty() {
        return Err(DatasetError::EmptyPatientId { line });
    }
    if record.visits.is_empty() {
        return Err(DatasetError::NoVisits { line, patient: record.patient_id.clone() });
    }
    for visit in &record.visits {
        if visit.icd.is_empty() {
            return Err(DatasetError::EmptyVisit { line, patient: record.patient_id.clone() });
        }
        let mut derived = BTreeSet::new();
        for icd in &visit.icd {
            let ccs = ontology
                .ccs_of(icd.as_str())
                .ok_or_else(|| DatasetError::UnknownIcd { line, code: icd.clone() })?;
            derived.insert(ccs.clone());
        }
        if let Some(unknown) = visit.ccs.iter().find(|c| !ontology.contains_ccs(c.as_str())) {
            return Err(DatasetError::UnknownCcs { line, code: unknown.clone() });
        }
        if derived != visit.ccs {
            return Err(DatasetError::CcsMismatch {
                line,
                patient: record.patient_id.clone(),
                day: visit.day,
                listed: visit.ccs.iter().map(ToString::to_string).collect(),
                derived: derived.iter().map(ToString::to_string).collect(),
            });
        }
    }
    // stable: same-day visits keep file order
    record.visits.sort_by_key(|v| v.day);
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>, ontology: &Ontology) -> Result<Dataset, DatasetError> {
    Dataset::read_jsonl(BufReader::new(File::open(path)?), ontology)
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    dataset.write_jsonl(BufWriter::new(File::create(path)?))
}
