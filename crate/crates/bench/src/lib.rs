//! Shared fixtures for the benchmarks.

use dxrerank::backend::{ModelParams, TrainConfig};
use dxrerank::backend::train::init_params;
use dxrerank::backend::BackendKind;
use dxrerank::ehr::{build_instances, generate_synthetic, Dataset, InstanceMode, Ontology, PredictionInstance, SyntheticConfig};

pub struct Fixture {
    pub dataset: Dataset,
    pub ontology: Ontology,
    pub instances: Vec<PredictionInstance>,
}

/// A synthetic cohort of `n_patients` over `n_ccs` codes.
pub fn fixture(n_patients: usize, n_ccs: usize) -> Fixture {
    let cfg = SyntheticConfig { n_patients, n_ccs, visits_range: (3, 6), seed: 1, ..SyntheticConfig::default() };
    let (dataset, ontology) = generate_synthetic(&cfg).expect("valid synthetic config");
    let instances = build_instances(&dataset, 2, InstanceMode::LastVisit).expect("min_visits >= 2");
    Fixture { dataset, ontology, instances }
}

/// Untrained parameters; logit cost does not depend on training.
pub fn params(kind: BackendKind, ontology: &Ontology) -> ModelParams {
    init_params(kind, ontology, &TrainConfig::default())
}
