//! Mini-batch Adam training for both backends.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    batch_loss, batch_loss_and_grad, BackendError, BackendKind, BoxLmParams, Encoded, ModelParams,
    RetainParams, ScoringModel, Vocab, VolumeConfig,
};
use crate::ehr::{build_instances, Dataset, InstanceMode, Ontology};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Embedding dimension.
    pub d: usize,
    pub adam: AdamConfig,
    /// Box backend only.
    pub volume: VolumeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 1e-2,
            batch_size: 32,
            seed: 0,
            d: 16,
            adam: AdamConfig::default(),
            volume: VolumeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(BackendError::InvalidConfig(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(BackendError::InvalidConfig("batch_size must be positive".into()));
        }
        if self.d == 0 {
            return Err(BackendError::InvalidConfig("d must be positive".into()));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(BackendError::InvalidConfig("adam constants out of range".into()));
        }
        self.volume.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss over the full training set: entry 0 before any update, then
    /// one entry after each epoch.
    pub epoch_losses: Vec<f64>,
    pub n_instances: usize,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.epoch_losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().unwrap()
    }
}

struct Adam {
    cfg: AdamConfig,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(cfg: AdamConfig, lr: f64, n: usize) -> Self {
        Self { cfg, lr, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] -= self.lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Seeded initialization for `kind`; this is exactly what `train` returns for 0 epochs.
pub fn init_params(kind: BackendKind, ontology: &Ontology, cfg: &TrainConfig) -> ModelParams {
    let vocab = Vocab::from_ontology(ontology);
    match kind {
        BackendKind::Box => ModelParams::Box(BoxLmParams::init(vocab, cfg.d, cfg.volume, cfg.seed)),
        BackendKind::Retain => ModelParams::Retain(RetainParams::init(vocab, cfg.d, cfg.seed)),
    }
}

/// Every visit transition of every patient in `dataset`, in index form.
pub fn training_examples(dataset: &Dataset, vocab: &Vocab) -> Result<Vec<Encoded>, BackendError> {
    let instances = build_instances(dataset, 2, InstanceMode::AllPrefixes).expect("min_visits 2 is valid");
    instances.iter().map(|inst| Encoded::from_instance(vocab, inst)).collect()
}

/// Trains a model of the given kind on all prefixes of `dataset`'s patients.
pub fn train(
    kind: BackendKind,
    dataset: &Dataset,
    ontology: &Ontology,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainReport), BackendError> {
    cfg.validate()?;
    let params = init_params(kind, ontology, cfg);
    let examples = training_examples(dataset, params.vocab())?;
    if examples.is_empty() {
        return Err(BackendError::EmptyTrainingSet);
    }
    match params {
        ModelParams::Box(p) => fit(p, &examples, cfg).map(|(p, r)| (ModelParams::Box(p), r)),
        ModelParams::Retain(p) => fit(p, &examples, cfg).map(|(p, r)| (ModelParams::Retain(p), r)),
    }
}

/// Runs Adam on a pre-encoded training set.
pub fn fit<M: ScoringModel>(mut model: M, examples: &[Encoded], cfg: &TrainConfig) -> Result<(M, TrainReport), BackendError> {
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    losses.push(batch_loss(&model, examples)?);
    // separate stream from the initializer so changing epochs never alters init
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_ba7c);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut theta = model.to_flat();
    let mut adam = Adam::new(cfg.adam, cfg.learning_rate, theta.len());
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Encoded> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (_, grad) = batch_loss_and_grad(&model, &batch)?;
            adam.step(&mut theta, &grad.to_flat());
            model.set_flat(&theta);
        }
        losses.push(batch_loss(&model, examples)?);
    }
    Ok((model, TrainReport { epoch_losses: losses, n_instances: examples.len() }))
}
