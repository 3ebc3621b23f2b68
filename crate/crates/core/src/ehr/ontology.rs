//! The ICD→CCS grouping used for label construction and history propagation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::codes::{CcsCode, CcsId, IcdCode, IcdId};

#[derive(Debug, thiserror::Error)]
pub enum OntologyError {
    #[error("failed to read ontology: {0}")]
    Io(#[from] std::io::Error),
    #[error("ontology csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("ontology csv is missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("row {row}: empty {field}")]
    EmptyField { row: usize, field: &'static str },
    #[error("ICD code {icd} maps to both {first} and {second}")]
    ConflictingParent { icd: IcdId, first: CcsId, second: CcsId },
    #[error("code {id} has conflicting names {first:?} and {second:?}")]
    ConflictingName { id: String, first: String, second: String },
}

/// One row of the ontology table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OntologyRow {
    pub icd_id: String,
    pub icd_name: String,
    pub ccs_id: String,
    pub ccs_name: String,
}

/// Many-to-one map from ICD codes to CCS categories, with names for both levels.
///
/// Immutable after construction; `ccs_to_icd` is always the exact inverse of
/// `icd_to_ccs` and every CCS referenced by an ICD has a name entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ontology {
    icd_to_ccs: BTreeMap<IcdId, CcsId>,
    ccs_to_icd: BTreeMap<CcsId, Vec<IcdId>>,
    icd_names: BTreeMap<IcdId, String>,
    ccs_names: BTreeMap<CcsId, String>,
}

const COLUMNS: [&str; 4] = ["icd_id", "icd_name", "ccs_id", "ccs_name"];

impl Ontology {
    pub fn from_rows<I>(rows: I) -> Result<Self, OntologyError>
    where
        I: IntoIterator<Item = OntologyRow>,
    {
        let mut icd_to_ccs: BTreeMap<IcdId, CcsId> = BTreeMap::new();
        let mut icd_names: BTreeMap<IcdId, String> = BTreeMap::new();
        let mut ccs_names: BTreeMap<CcsId, String> = BTreeMap::new();

        for (row_no, row) in rows.into_iter().enumerate() {
            let row_no = row_no + 1;
            if row.icd_id.trim().is_empty() {
                return Err(OntologyError::EmptyField { row: row_no, field: "icd_id" });
            }
            if row.ccs_id.trim().is_empty() {
                return Err(OntologyError::EmptyField { row: row_no, field: "ccs_id" });
            }
            let icd = IcdId::new(row.icd_id.trim());
            let ccs = CcsId::new(row.ccs_id.trim());

            match icd_to_ccs.get(&icd) {
                Some(existing) if *existing != ccs => {
                    return Err(OntologyError::ConflictingParent {
                        icd,
                        first: existing.clone(),
                        second: ccs,
                    });
                }
                Some(_) => {}
                None => {
                    icd_to_ccs.insert(icd.clone(), ccs.clone());
                }
            }
            insert_name(&mut icd_names, icd, row.icd_name)?;
            insert_name(&mut ccs_names, ccs, row.ccs_name)?;
        }

        let mut ccs_to_icd: BTreeMap<CcsId, Vec<IcdId>> =
            ccs_names.keys().map(|c| (c.clone(), Vec::new())).collect();
        for (icd, ccs) in &icd_to_ccs {
            ccs_to_icd.entry(ccs.clone()).or_default().push(icd.clone());
        }

        Ok(Self { icd_to_ccs, ccs_to_icd, icd_names, ccs_names })
    }

    /// Parent CCS of an ICD code.
    pub fn ccs_of(&self, icd: &str) -> Option<&CcsId> {
        self.icd_to_ccs.get(icd)
    }

    /// ICD children of a CCS category, sorted by id.
    pub fn icds_of(&self, ccs: &str) -> &[IcdId] {
        self.ccs_to_icd.get(ccs).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains_ccs(&self, ccs: &str) -> bool {
        self.ccs_names.contains_key(ccs)
    }

    pub fn contains_icd(&self, icd: &str) -> bool {
        self.icd_to_ccs.contains_key(icd)
    }

    pub fn ccs_name(&self, ccs: &str) -> Option<&str> {
        self.ccs_names.get(ccs).map(String::as_str)
    }

    pub fn icd_name(&self, icd: &str) -> Option<&str> {
        self.icd_names.get(icd).map(String::as_str)
    }

    pub fn ccs(&self, id: &str) -> Option<CcsCode> {
        self.ccs_names
            .get_key_value(id)
            .map(|(id, name)| CcsCode { id: id.clone(), name: name.clone() })
    }

    pub fn icd(&self, id: &str) -> Option<IcdCode> {
        self.icd_names
            .get_key_value(id)
            .map(|(id, name)| IcdCode { id: id.clone(), name: name.clone() })
    }

    /// All CCS categories in ascending id order. This is the prediction vocabulary.
    pub fn ccs_codes(&self) -> impl Iterator<Item = &CcsId> {
        self.ccs_names.keys()
    }

    pub fn n_ccs(&self) -> usize {
        self.ccs_names.len()
    }

    pub fn n_icd(&self) -> usize {
        self.icd_to_ccs.len()
    }

    pub fn rows(&self) -> impl Iterator<Item = OntologyRow> + '_ {
        self.icd_to_ccs.iter().map(|(icd, ccs)| OntologyRow {
            icd_id: icd.to_string(),
            icd_name: self.icd_names[icd].clone(),
            ccs_id: ccs.to_string(),
            ccs_name: self.ccs_names[ccs].clone(),
        })
    }

    /// Short content hash, used as `Dataset::ontology_ref`.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for row in self.rows() {
            for field in [&row.icd_id, &row.icd_name, &row.ccs_id, &row.ccs_name] {
                hasher.update(field.as_bytes());
                hasher.update([0x1f]);
            }
            hasher.update([0x1e]);
        }
        hex::encode(&hasher.finalize()[..8])
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, OntologyError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        for col in COLUMNS {
            if !headers.iter().any(|h| h == col) {
                return Err(OntologyError::MissingColumn(col));
            }
        }
        let rows = rdr
            .deserialize::<OntologyRow>()
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_rows(rows)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), OntologyError> {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        wtr.write_record(COLUMNS)?;
        for row in self.rows() {
            wtr.serialize(row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn insert_name<K: Ord + ToString>(
    names: &mut BTreeMap<K, String>,
    id: K,
    name: String,
) -> Result<(), OntologyError> {
    match names.get(&id) {
        Some(existing) if *existing != name => Err(OntologyError::ConflictingName {
            id: id.to_string(),
            first: existing.clone(),
            second: name,
        }),
        Some(_) => Ok(()),
        None => {
            names.insert(id, name);
            Ok(())
        }
    }
}

pub fn load_ontology(path: impl AsRef<Path>) -> Result<Ontology, OntologyError> {
    Ontology::read_csv(File::open(path)?)
}

pub fn save_ontology(ontology: &Ontology, path: impl AsRef<Path>) -> Result<(), OntologyError> {
    ontology.write_csv(File::create(path)?)
}
