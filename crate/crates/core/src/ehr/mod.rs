//! Data model: codes, ontology, patient records, splits, prediction instances
//! and the synthetic generator.

pub mod codes;
pub mod dataset;
pub mod instances;
pub mod ontology;
pub mod split;
pub mod synth;

pub use codes::{CcsCode, CcsId, IcdCode, IcdId};
pub use dataset::{load_dataset, save_dataset, Dataset, DatasetError, PatientRecord, Visit};
pub use instances::{build_instances, InstanceMode, MinVisitsError, PredictionInstance};
pub use ontology::{load_ontology, save_ontology, Ontology, OntologyError, OntologyRow};
pub use split::{split_patients, SplitError, DEFAULT_SPLIT};
pub use synth::{
    generate_synthetic, rule_onset_fraction, synthetic_ccs_id, synthetic_ontology, PlantedRule, SynthError, SyntheticConfig,
};
