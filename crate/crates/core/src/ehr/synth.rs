//! Seeded synthetic EHR generator with planted comorbidity rules.
//!
//! Each patient belongs to one of `n_clusters` comorbidity profiles and draws
//! background diagnoses from that profile. Between consecutive visits a code
//! persists with probability `chronic_rate`; each planted rule `trigger → onset`
//! fires with probability `q` when the trigger is present and the onset is not.
//! Dropped codes are replaced by fresh background codes, so with no rules and
//! `chronic_rate = 1` a patient's CCS set never changes.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::codes::{CcsId, IcdId};
use super::dataset::{Dataset, PatientRecord, Visit};
use super::ontology::{Ontology, OntologyRow};

/// `trigger` present at visit k introduces `onset` at visit k+1 with probability `q`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedRule {
    pub trigger: CcsId,
    pub onset: CcsId,
    pub q: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_patients: usize,
    pub n_ccs: usize,
    pub icd_per_ccs: usize,
    pub chronic_rate: f64,
    pub rules: Vec<PlantedRule>,
    /// Inclusive range of visits per patient.
    pub visits_range: (usize, usize),
    /// Inclusive range of CCS codes in a patient's first visit.
    pub codes_per_visit_range: (usize, usize),
    pub n_clusters: usize,
    /// Inclusive range of days between consecutive visits.
    pub gap_days_range: (u32, u32),
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_patients: 500,
            n_ccs: 60,
            icd_per_ccs: 3,
            chronic_rate: 0.5,
            rules: Vec::new(),
            visits_range: (2, 5),
            codes_per_visit_range: (3, 6),
            n_clusters: 1,
            gap_days_range: (1, 90),
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Invalid(String),
    #[error("rules reference {referenced} distinct CCS codes but n_ccs is {n_ccs}")]
    TooFewCodes { referenced: usize, n_ccs: usize },
    #[error("rule references unknown CCS code {0}")]
    UnknownCode(CcsId),
}

/// Id of the `k`-th synthetic CCS category for a vocabulary of size `n_ccs`.
pub fn synthetic_ccs_id(k: usize, n_ccs: usize) -> CcsId {
    CcsId::new(format!("CCS:{k:0w$}", w = id_width(n_ccs)))
}

fn synthetic_icd_id(k: usize, j: usize, n_ccs: usize) -> IcdId {
    IcdId::new(format!("ICD:{k:0w$}.{j}", w = id_width(n_ccs)))
}

fn id_width(n_ccs: usize) -> usize {
    n_ccs.saturating_sub(1).to_string().len().max(3)
}

pub fn synthetic_ontology(n_ccs: usize, icd_per_ccs: usize) -> Ontology {
    let rows = (0..n_ccs).flat_map(|k| {
        (1..=icd_per_ccs).map(move |j| OntologyRow {
            icd_id: synthetic_icd_id(k, j, n_ccs).to_string(),
            icd_name: format!("ICD-{k}.{j}"),
            ccs_id: synthetic_ccs_id(k, n_ccs).to_string(),
            ccs_name: format!("CCS-{k}"),
        })
    });
    Ontology::from_rows(rows).expect("synthetic rows are consistent")
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let invalid = |msg: String| Err(SynthError::Invalid(msg));
        if self.n_ccs == 0 {
            return invalid("n_ccs must be positive".into());
        }
        if self.icd_per_ccs == 0 {
            return invalid("icd_per_ccs must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.chronic_rate) {
            return invalid(format!("chronic_rate {} outside [0, 1]", self.chronic_rate));
        }
        let (vlo, vhi) = self.visits_range;
        if vlo == 0 || vlo > vhi {
            return invalid(format!("visits_range {:?} is empty", self.visits_range));
        }
        let (clo, chi) = self.codes_per_visit_range;
        if clo == 0 || clo > chi {
            return invalid(format!("codes_per_visit_range {:?} is empty", self.codes_per_visit_range));
        }
        if self.gap_days_range.0 > self.gap_days_range.1 {
            return invalid(format!("gap_days_range {:?} is empty", self.gap_days_range));
        }
        if self.n_clusters == 0 || self.n_clusters > self.n_ccs {
            return invalid(format!("n_clusters must be in 1..={}", self.n_ccs));
        }
        for rule in &self.rules {
            if !(0.0..=1.0).contains(&rule.q) {
                return invalid(format!("rule {} -> {} has q = {} outside [0, 1]", rule.trigger, rule.onset, rule.q));
            }
            if rule.trigger == rule.onset {
                return invalid(format!("rule trigger and onset are both {}", rule.trigger));
            }
        }
        let referenced: BTreeSet<&CcsId> =
            self.rules.iter().flat_map(|r| [&r.trigger, &r.onset]).collect();
        if referenced.len() > self.n_ccs {
            return Err(SynthError::TooFewCodes { referenced: referenced.len(), n_ccs: self.n_ccs });
        }
        let vocab: HashSet<CcsId> = (0..self.n_ccs).map(|k| synthetic_ccs_id(k, self.n_ccs)).collect();
        if let Some(unknown) = referenced.into_iter().find(|c| !vocab.contains(*c)) {
            return Err(SynthError::UnknownCode(unknown.clone()));
        }
        Ok(())
    }
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(Dataset, Ontology), SynthError> {
    config.validate()?;
    let n_ccs = config.n_ccs;
    let ontology = synthetic_ontology(n_ccs, config.icd_per_ccs);
    let index: BTreeMap<CcsId, usize> = (0..n_ccs).map(|k| (synthetic_ccs_id(k, n_ccs), k)).collect();
    let rules: Vec<(usize, usize, f64)> =
        config.rules.iter().map(|r| (index[&r.trigger], index[&r.onset], r.q)).collect();
    let onsets: HashSet<usize> = rules.iter().map(|r| r.1).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Background pools per cluster; rule onsets only ever appear through their rule.
    let mut assignment: Vec<usize> = (0..n_ccs).collect();
    assignment.shuffle(&mut rng);
    let mut pools = vec![Vec::new(); config.n_clusters];
    for (code, slot) in assignment.iter().enumerate() {
        if !onsets.contains(&code) {
            pools[slot % config.n_clusters].push(code);
        }
    }
    let global: Vec<usize> = (0..n_ccs).filter(|c| !onsets.contains(c)).collect();

    let mut patients = Vec::with_capacity(config.n_patients);
    for p in 0..config.n_patients {
        let pool = &pools[rng.random_range(0..config.n_clusters)];
        let n_visits = rng.random_range(config.visits_range.0..=config.visits_range.1);
        let mut day = 0u32;
        let mut current: BTreeSet<usize> = BTreeSet::new();
        let first = rng.random_range(config.codes_per_visit_range.0..=config.codes_per_visit_range.1);
        draw_fresh(&mut current, first, pool, &global, &mut rng);

        let mut visits = Vec::with_capacity(n_visits);
        for v in 0..n_visits {
            if v > 0 {
                day += rng.random_range(config.gap_days_range.0..=config.gap_days_range.1);
                let prev = current;
                current = BTreeSet::new();
                for &code in &prev {
                    if rng.random_bool(config.chronic_rate) {
                        current.insert(code);
                    }
                }
                let mut introduced = 0;
                for &(trigger, onset, q) in &rules {
                    let fires = rng.random_bool(q);
                    if fires && prev.contains(&trigger) && !prev.contains(&onset) && current.insert(onset) {
                        introduced += 1;
                    }
                }
                let dropped = prev.iter().filter(|c| !current.contains(c)).count();
                let mut refill = dropped.saturating_sub(introduced);
                if current.is_empty() {
                    refill = refill.max(1);
                }
                draw_fresh(&mut current, refill, pool, &global, &mut rng);
            }
            visits.push(render_visit(day, &current, config.icd_per_ccs, n_ccs, &mut rng));
        }
        patients.push(PatientRecord { patient_id: format!("P{p:05}"), visits });
    }

    Ok((Dataset::new(patients, ontology.fingerprint()), ontology))
}

fn draw_fresh(
    current: &mut BTreeSet<usize>,
    count: usize,
    pool: &[usize],
    global: &[usize],
    rng: &mut ChaCha8Rng,
) {
    let target = current.len() + count;
    for source in [pool, global] {
        let mut available: Vec<usize> = source.iter().copied().filter(|c| !current.contains(c)).collect();
        available.shuffle(rng);
        while current.len() < target {
            match available.pop() {
                Some(code) => {
                    current.insert(code);
                }
                None => break,
            }
        }
        if current.len() >= target {
            return;
        }
    }
}

fn render_visit(day: u32, ccs: &BTreeSet<usize>, icd_per_ccs: usize, n_ccs: usize, rng: &mut ChaCha8Rng) -> Visit {
    let mut icd = BTreeSet::new();
    let children: Vec<usize> = (1..=icd_per_ccs).collect();
    for &k in ccs {
        let n = rng.random_range(1..=icd_per_ccs.min(2));
        for &j in children.choose_multiple(rng, n) {
            icd.insert(synthetic_icd_id(k, j, n_ccs));
        }
    }
    Visit { day, icd, ccs: ccs.iter().map(|&k| synthetic_ccs_id(k, n_ccs)).collect() }
}

/// Empirical onset rate of `onset` after `trigger`: over visit transitions
/// k → k+1 where visit k contains the trigger but not the onset, the fraction
/// whose visit k+1 contains the onset. `None` when no transition qualifies.
pub fn rule_onset_fraction(dataset: &Dataset, trigger: &CcsId, onset: &CcsId) -> Option<f64> {
    let mut eligible = 0usize;
    let mut introduced = 0usize;
    for patient in &dataset.patients {
        for pair in patient.visits.windows(2) {
            if pair[0].ccs.contains(trigger) && !pair[0].ccs.contains(onset) {
                eligible += 1;
                if pair[1].ccs.contains(onset) {
                    introduced += 1;
                }
            }
        }
    }
    (eligible > 0).then(|| introduced as f64 / eligible as f64)
}
