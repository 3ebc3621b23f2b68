//! End-to-end orchestration: configuration, stages and file-level commands.

pub mod access;
pub mod commands;
pub mod config;
pub mod stages;

use std::path::PathBuf;

pub use access::{AccessEvent, AccessLog, SplitName, Splits};
pub use commands::{cmd_ablate, cmd_cooc, cmd_eval, cmd_predict, cmd_sweep_k, cmd_synth, cmd_train, Outcome};
pub use config::{Overrides, Paths, RunConfig};
pub use stages::{
    check_failures, cooc_stage, predict_all, predict_instance, predict_stage, run_meta, test_instances, train_stage,
    PredictContext, COOC_STAGE, PREDICT_STAGE, TRAIN_STAGE,
};

use crate::backend::{BackendError, ParamsIoError};
use crate::ehr::{DatasetError, OntologyError, SplitError};
use crate::eval::{ArtifactError, EvalError};
use crate::evidence::{CooccurrenceError, EvidenceError};
use crate::llm::LlmError;
use crate::prompting::PromptError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("required input {0} does not exist")]
    MissingInput(PathBuf),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Params(#[from] ParamsIoError),
    #[error(transparent)]
    Cooccurrence(#[from] CooccurrenceError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{failed} of {total} instances failed (first error: {first})")]
    TooManyFailures { failed: usize, total: usize, first: String },
}

impl PipelineError {
    /// 2 for bad configuration or missing inputs, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::MissingInput(_)
            | PipelineError::Split(_)
            | PipelineError::Backend(BackendError::KindMismatch { .. } | BackendError::InvalidConfig(_)) => 2,
            _ => 1,
        }
    }
}
