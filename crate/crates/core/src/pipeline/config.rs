//! The single JSON run configuration and its resolution.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::backend::{BackendKind, TrainConfig};
use crate::ehr::{SyntheticConfig, DEFAULT_SPLIT};
use crate::eval::KGrid;
use crate::llm::LlmConfig;
use crate::prompting::{AblationStage, PromptOptions};

/// File locations. Unset entries default to fixed names under `out`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub ontology: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub cooccurrence: Option<PathBuf>,
    pub artifact: Option<PathBuf>,
    /// Directory with `novel.txt` / `overall.txt` overriding the bundled templates.
    pub templates: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub paths: Paths,
    /// Copied into the synth, split, train and llm seeds on resolution.
    pub seed: u64,
    pub synth: SyntheticConfig,
    /// (train, validation, test) patient fractions.
    pub split: (f64, f64, f64),
    pub backend: BackendKind,
    pub train: TrainConfig,
    /// Candidate set size.
    pub k: usize,
    pub prompt: PromptOptions,
    /// Samples drawn per instance by the self-consistency strategy.
    pub sc_samples: u32,
    pub sc_temperature: f64,
    pub llm: LlmConfig,
    pub ks: KGrid,
    pub sweep_k: Vec<usize>,
    /// Number of seeded re-splits in `ablate`; run `i` uses `seed + i`.
    pub ablate_runs: usize,
    pub ablate_stages: Vec<AblationStage>,
    /// Fraction of failed instances above which `predict` fails.
    pub max_failure_rate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            paths: Paths::default(),
            seed: 0,
            synth: SyntheticConfig::default(),
            split: DEFAULT_SPLIT,
            backend: BackendKind::Box,
            train: TrainConfig::default(),
            k: 50,
            prompt: PromptOptions::default(),
            sc_samples: 3,
            sc_temperature: 0.7,
            llm: LlmConfig::default(),
            ks: KGrid::default(),
            sweep_k: vec![10, 25, 50, 100],
            ablate_runs: 5,
            ablate_stages: AblationStage::ALL.to_vec(),
            max_failure_rate: 0.1,
        }
    }
}

/// Overrides taken from the command line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub k: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies overrides, propagates the seed and validates.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self, PipelineError> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(k) = o.k {
            self.k = k;
        }
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.llm.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.sweep_k.contains(&0) {
            return bad("sweep_k entries must be at least 1".into());
        }
        if self.sc_samples == 0 {
            return bad("sc_samples must be at least 1".into());
        }
        if !(self.sc_temperature >= 0.0) {
            return bad("sc_temperature must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return bad("max_failure_rate must be in [0, 1]".into());
        }
        if self.ablate_runs == 0 || self.ablate_stages.is_empty() {
            return bad("ablate needs at least one run and one stage".into());
        }
        self.synth.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.llm.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.ks.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    fn path_or(&self, p: &Option<PathBuf>, name: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| self.out.join(name))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.path_or(&self.paths.dataset, "dataset.jsonl")
    }

    pub fn ontology_path(&self) -> PathBuf {
        self.path_or(&self.paths.ontology, "ontology.csv")
    }

    pub fn params_path(&self) -> PathBuf {
        self.path_or(&self.paths.params, "params.json")
    }

    pub fn cooccurrence_path(&self) -> PathBuf {
        self.path_or(&self.paths.cooccurrence, "cooccurrence.csv")
    }

    pub fn artifact_path(&self) -> PathBuf {
        self.path_or(&self.paths.artifact, "predictions.jsonl")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of everything that affects results. File locations are left out
    /// so the same run in another directory has the same fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.paths = Paths { templates: c.paths.templates.clone(), ..Paths::default() };
        let canonical = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Writes the resolved config as `{out}/{command}.config.json`.
    pub fn write_resolved(&self, command: &str) -> Result<PathBuf, PipelineError> {
        std::fs::create_dir_all(&self.out)?;
        let path = self.out.join(format!("{command}.config.json"));
        std::fs::write(&path, self.to_json())?;
        Ok(path)
    }
}
