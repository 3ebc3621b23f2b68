//! Records which split each stage read, so tests can prove the test split
//! never reaches training or co-occurrence counting.

use std::collections::BTreeSet;
use std::sync::Mutex;

use crate::ehr::{split_patients, Dataset, SplitError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessEvent {
    pub stage: String,
    pub split: SplitName,
    pub patient_ids: Vec<String>,
}

#[derive(Debug, Default)]
pub struct AccessLog {
    events: Mutex<Vec<AccessEvent>>,
}

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> Vec<AccessEvent> {
        self.events.lock().unwrap().clone()
    }

    /// Patient ids read by `stage`, over all splits.
    pub fn patients_read_by(&self, stage: &str) -> BTreeSet<String> {
        self.events
            .lock()
            .unwrap()
            .iter()
            .filter(|e| e.stage == stage)
            .flat_map(|e| e.patient_ids.iter().cloned())
            .collect()
    }

    /// `stage,split,patient_id` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,split,patient_id\n");
        for e in self.events.lock().unwrap().iter() {
            for p in &e.patient_ids {
                s.push_str(&format!("{},{},{}\n", e.stage, e.split.as_str(), p));
            }
        }
        s
    }
}

/// A patient-level split whose parts are handed out only through [`Splits::read`].
#[derive(Debug)]
pub struct Splits {
    train: Dataset,
    validation: Dataset,
    test: Dataset,
}

impl Splits {
    pub fn new(dataset: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<Self, SplitError> {
        let (train, validation, test) = split_patients(dataset, ratios, seed)?;
        Ok(Self { train, validation, test })
    }

    /// The requested part, logging every patient id under `stage`.
    pub fn read<'a>(&'a self, split: SplitName, stage: &str, log: &AccessLog) -> &'a Dataset {
        let ds = match split {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        };
        log.events.lock().unwrap().push(AccessEvent {
            stage: stage.to_string(),
            split,
            patient_ids: ds.patient_ids().map(str::to_string).collect(),
        });
        ds
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}
