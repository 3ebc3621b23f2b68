//! Patient-level CCS co-occurrence counts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::ehr::{CcsId, Dataset};

#[derive(Debug, thiserror::Error)]
pub enum CooccurrenceError {
    #[error("co-occurrence file: {0}")]
    Io(#[from] std::io::Error),
    #[error("co-occurrence csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("co-occurrence file is missing the `# n_patients=` header")]
    MissingHeader,
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Symmetric count of training patients diagnosed with both codes at any
/// visit. The diagonal holds each code's patient count.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CooccurrenceMatrix {
    /// Keyed by `(i, j)` with `i <= j`.
    counts: BTreeMap<(CcsId, CcsId), u32>,
    n_patients: usize,
}

fn key(a: &CcsId, b: &CcsId) -> (CcsId, CcsId) {
    if a <= b {
        (a.clone(), b.clone())
    } else {
        (b.clone(), a.clone())
    }
}

impl CooccurrenceMatrix {
    pub fn n_patients(&self) -> usize {
        self.n_patients
    }

    pub fn get(&self, a: &CcsId, b: &CcsId) -> u32 {
        self.counts.get(&key(a, b)).copied().unwrap_or(0)
    }

    /// Stored non-zero entries as `(i, j, count)` with `i <= j`, ascending.
    pub fn entries(&self) -> impl Iterator<Item = (&CcsId, &CcsId, u32)> {
        self.counts.iter().map(|((a, b), &c)| (a, b, c))
    }

    pub fn nnz(&self) -> usize {
        self.counts.len()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), CooccurrenceError> {
        let mut w = BufWriter::new(writer);
        writeln!(w, "# n_patients={}", self.n_patients)?;
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["ccs_i", "ccs_j", "count"])?;
        for (a, b, c) in self.entries() {
            wtr.write_record([a.as_str(), b.as_str(), &c.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, CooccurrenceError> {
        let mut r = BufReader::new(reader);
        let mut first = String::new();
        r.read_line(&mut first)?;
        let n_patients = first
            .trim()
            .strip_prefix("# n_patients=")
            .ok_or(CooccurrenceError::MissingHeader)?
            .parse::<usize>()
            .map_err(|e| CooccurrenceError::Parse { line: 1, reason: e.to_string() })?;
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let mut counts = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 3;
            let bad = |reason: &str| CooccurrenceError::Parse { line, reason: reason.into() };
            if rec.len() != 3 {
                return Err(bad("expected 3 fields"));
            }
            let (a, b) = (CcsId::new(&rec[0]), CcsId::new(&rec[1]));
            if a > b {
                return Err(bad("pair not in ascending order"));
            }
            let c: u32 = rec[2].parse().map_err(|_| bad("count is not a non-negative integer"))?;
            if c as usize > n_patients {
                return Err(bad("count exceeds n_patients"));
            }
            if c > 0 && counts.insert((a, b), c).is_some() {
                return Err(bad("duplicate pair"));
            }
        }
        Ok(Self { counts, n_patients })
    }
}

/// Counts, for every CCS pair, the patients whose visits contain both.
/// Each patient contributes at most 1 to any pair.
pub fn build_cooccurrence(train: &Dataset) -> CooccurrenceMatrix {
    let mut counts: BTreeMap<(CcsId, CcsId), u32> = BTreeMap::new();
    for patient in &train.patients {
        let codes: Vec<&CcsId> = patient.visits.iter().flat_map(|v| v.ccs.iter()).collect::<BTreeSet<_>>().into_iter().collect();
        for (i, a) in codes.iter().enumerate() {
            for b in &codes[i..] {
                *counts.entry(key(a, b)).or_insert(0) += 1;
            }
        }
    }
    CooccurrenceMatrix { counts, n_patients: train.len() }
}

pub fn save_cooccurrence(m: &CooccurrenceMatrix, path: impl AsRef<Path>) -> Result<(), CooccurrenceError> {
    m.write_csv(File::create(path)?)
}

pub fn load_cooccurrence(path: impl AsRef<Path>) -> Result<CooccurrenceMatrix, CooccurrenceError> {
    CooccurrenceMatrix::read_csv(File::open(path)?)
}
