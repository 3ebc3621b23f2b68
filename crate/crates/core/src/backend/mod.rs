//! Trainable scoring backends that produce one logit per CCS category.
//!
//! Two models share the same output space: a box-embedding scorer that ranks a
//! candidate by the smoothed volume of its intersection with the patient box,
//! and a reverse-time attention sequence model. Both are trained with mean
//! multi-label binary cross-entropy and hand-written backpropagation.

pub mod boxlm;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod retain;
pub mod train;
pub mod volume;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ehr::{CcsId, Ontology, PredictionInstance, Visit};

pub use boxlm::{boxlm_logits, patient_box, visit_box, BoxLmParams};
pub use io::{load_params, save_params, ParamsIoError};
pub use loss::{bce_loss, bce_loss_grad};
pub use retain::{retain_logits, GruCell, RetainParams};
pub use train::{train, AdamConfig, TrainConfig, TrainReport};
pub use volume::{intersection_volume, log_intersection_volume, BoxEmbed, VolumeConfig};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BackendError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cannot aggregate an empty set of boxes")]
    EmptyInput,
    #[error("CCS code {0} has no parameters in this model")]
    UnseenCode(CcsId),
    #[error("instance has no input visits")]
    NoVisits,
    #[error("backend mismatch: expected {expected} parameters, got {found}")]
    KindMismatch { expected: BackendKind, found: BackendKind },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("shape mismatch in {0}")]
    Shape(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Box,
    Retain,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Box => "box",
            BackendKind::Retain => "retain",
        })
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "box" => Ok(BackendKind::Box),
            "retain" => Ok(BackendKind::Retain),
            other => Err(format!("unknown backend `{other}` (expected `box` or `retain`)")),
        }
    }
}

/// The ordered CCS vocabulary a model scores. Index `i` of every logit or
/// parameter row corresponds to `codes()[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    codes: Vec<CcsId>,
    index: HashMap<CcsId, usize>,
}

impl Vocab {
    pub fn new(codes: Vec<CcsId>) -> Self {
        let index = codes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Self { codes, index }
    }

    pub fn from_ontology(ontology: &Ontology) -> Self {
        Self::new(ontology.ccs_codes().cloned().collect())
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[CcsId] {
        &self.codes
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    /// Visits as lists of vocabulary indices.
    pub fn encode_visits(&self, visits: &[Visit]) -> Result<Vec<Vec<usize>>, BackendError> {
        visits
            .iter()
            .map(|v| {
                v.ccs
                    .iter()
                    .map(|c| self.index_of(c.as_str()).ok_or_else(|| BackendError::UnseenCode(c.clone())))
                    .collect()
            })
            .collect()
    }

    pub fn encode_targets<'a, I>(&self, codes: I) -> Result<Vec<usize>, BackendError>
    where
        I: IntoIterator<Item = &'a CcsId>,
    {
        codes
            .into_iter()
            .map(|c| self.index_of(c.as_str()).ok_or_else(|| BackendError::UnseenCode(c.clone())))
            .collect()
    }

    pub fn logits(&self, scores: Vec<f64>) -> LogitVector {
        debug_assert_eq!(scores.len(), self.len());
        LogitVector { scores: self.codes.iter().cloned().zip(scores).collect() }
    }
}

/// Per-CCS real-valued relevance scores for one patient.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LogitVector {
    pub scores: BTreeMap<CcsId, f64>,
}

impl LogitVector {
    pub fn get(&self, code: &str) -> Option<f64> {
        self.scores.get(code).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CcsId, f64)> {
        self.scores.iter().map(|(c, s)| (c, *s))
    }
}

impl FromIterator<(CcsId, f64)> for LogitVector {
    fn from_iter<T: IntoIterator<Item = (CcsId, f64)>>(iter: T) -> Self {
        Self { scores: iter.into_iter().collect() }
    }
}

/// A training or inference example in index form.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub visits: Vec<Vec<usize>>,
    pub targets: Vec<usize>,
}

impl Encoded {
    pub fn from_instance(vocab: &Vocab, instance: &PredictionInstance) -> Result<Self, BackendError> {
        if instance.input_visits.is_empty() {
            return Err(BackendError::NoVisits);
        }
        Ok(Self {
            visits: vocab.encode_visits(&instance.input_visits)?,
            targets: vocab.encode_targets(&instance.target_overall)?,
        })
    }

    /// Dense 0/1 target vector over a vocabulary of size `n`.
    pub fn target_vector(&self, n: usize) -> Vec<f64> {
        let mut y = vec![0.0; n];
        for &t in &self.targets {
            y[t] = 1.0;
        }
        y
    }
}

/// Flat view of a parameter set, used by the optimizer and gradient checks.
pub trait Parameters: Clone {
    fn n_params(&self) -> usize;
    fn to_flat(&self) -> Vec<f64>;
    fn set_flat(&mut self, flat: &[f64]);
    /// A parameter-shaped record with every entry zero.
    fn zeros_like(&self) -> Self;
}

/// Shared interface of the two backends over encoded inputs.
pub trait ScoringModel: Parameters {
    fn vocab(&self) -> &Vocab;
    fn forward(&self, visits: &[Vec<usize>]) -> Result<Vec<f64>, BackendError>;
    /// Accumulates `dL/dθ` into `grad` given `dL/dlogits`.
    fn backward(&self, visits: &[Vec<usize>], dlogits: &[f64], grad: &mut Self) -> Result<(), BackendError>;
    /// Discrete choices (max/min selections, floors) taken by the forward pass.
    /// Finite differences are only meaningful when this is unchanged under perturbation.
    fn branch_signature(&self, _visits: &[Vec<usize>]) -> Vec<u32> {
        Vec::new()
    }
}

/// Trained parameters of either backend.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelParams {
    Box(BoxLmParams),
    Retain(RetainParams),
}

impl ModelParams {
    pub fn kind(&self) -> BackendKind {
        match self {
            ModelParams::Box(_) => BackendKind::Box,
            ModelParams::Retain(_) => BackendKind::Retain,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        match self {
            ModelParams::Box(p) => p.vocab(),
            ModelParams::Retain(p) => p.vocab(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelParams::Box(p) => p.dim(),
            ModelParams::Retain(p) => p.dim(),
        }
    }

    pub fn logits(&self, instance: &PredictionInstance) -> Result<LogitVector, BackendError> {
        match self {
            ModelParams::Box(p) => boxlm_logits(instance, p),
            ModelParams::Retain(p) => retain_logits(instance, p),
        }
    }
}

/// Scores every CCS code for `instance` with the backend named by `kind`.
pub fn infer_logits(
    kind: BackendKind,
    params: &ModelParams,
    instance: &PredictionInstance,
) -> Result<LogitVector, BackendError> {
    if params.kind() != kind {
        return Err(BackendError::KindMismatch { expected: kind, found: params.kind() });
    }
    params.logits(instance)
}

/// Mean loss and gradient over a batch.
pub fn batch_loss_and_grad<M: ScoringModel>(model: &M, batch: &[Encoded]) -> Result<(f64, M), BackendError> {
    let mut grad = model.zeros_like();
    if batch.is_empty() {
        return Ok((0.0, grad));
    }
    let n = model.vocab().len();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for example in batch {
        let logits = model.forward(&example.visits)?;
        let y = example.target_vector(n);
        total += bce_loss(&logits, &y);
        let mut dlogits = bce_loss_grad(&logits, &y);
        dlogits.iter_mut().for_each(|g| *g *= scale);
        model.backward(&example.visits, &dlogits, &mut grad)?;
    }
    Ok((total * scale, grad))
}

/// Mean loss over a batch without gradients.
pub fn batch_loss<M: ScoringModel>(model: &M, batch: &[Encoded]) -> Result<f64, BackendError> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let n = model.vocab().len();
    let mut total = 0.0;
    for example in batch {
        let logits = model.forward(&example.visits)?;
        total += bce_loss(&logits, &example.target_vector(n));
    }
    Ok(total / batch.len() as f64)
}

/// Gradient of the mean loss over `batch`; same shape as the parameters.
pub fn gradients<M: ScoringModel>(model: &M, batch: &[Encoded]) -> Result<M, BackendError> {
    if batch.is_empty() {
        return Err(BackendError::EmptyTrainingSet);
    }
    batch_loss_and_grad(model, batch).map(|(_, g)| g)
}

pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Backward pass of softmax: `ds_i = p_i (dp_i − Σ_j p_j dp_j)`.
pub(crate) fn softmax_backward(probs: &[f64], dprobs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(dprobs).map(|(p, d)| p * d).sum();
    probs.iter().zip(dprobs).map(|(p, d)| p * (d - dot)).collect()
}
