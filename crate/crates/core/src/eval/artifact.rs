//! Per-instance prediction records and their JSONL form.
//!
//! The first line holds [`RunMeta`]; every following line is one [`RunRecord`].

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ehr::{CcsId, PredictionInstance};
use crate::evidence::Task;

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("artifact io: {0}")]
    Io(#[from] std::io::Error),
    #[error("artifact line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("artifact is empty")]
    Empty,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    /// Hash of the resolved run configuration.
    pub fingerprint: String,
    pub seed: u64,
    pub task: Task,
    /// Free-form run label, such as an ablation stage.
    #[serde(default)]
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub patient_id: String,
    pub target_day: u32,
    /// Candidate codes offered to the LLM, in prompt order.
    pub candidates: Vec<CcsId>,
    pub prompt: String,
    pub raw_text: String,
    /// Final ranking; empty when the instance failed.
    pub ranked: Vec<CcsId>,
    pub matched_count: usize,
    pub target_overall: BTreeSet<CcsId>,
    pub target_novel: BTreeSet<CcsId>,
    pub history_ccs: BTreeSet<CcsId>,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    /// A record carrying only the instance fields; prediction fields are empty.
    pub fn for_instance(inst: &PredictionInstance) -> Self {
        Self {
            patient_id: inst.patient_id.clone(),
            target_day: inst.target_day,
            candidates: Vec::new(),
            prompt: String::new(),
            raw_text: String::new(),
            ranked: Vec::new(),
            matched_count: 0,
            target_overall: inst.target_overall.clone(),
            target_novel: inst.target_novel.clone(),
            history_ccs: inst.history_ccs.clone(),
            attempts: 0,
            error: None,
        }
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub meta: RunMeta,
    pub records: Vec<RunRecord>,
}

impl RunArtifact {
    pub fn n_failed(&self) -> usize {
        self.records.iter().filter(|r| r.failed()).count()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), ArtifactError> {
        let line = |e: serde_json::Error| ArtifactError::Json { line: 0, source: e };
        serde_json::to_writer(&mut w, &self.meta).map_err(line)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, ArtifactError> {
        let mut lines = r.lines().enumerate().filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()));
        let (_, first) = lines.next().ok_or(ArtifactError::Empty)?;
        let meta = serde_json::from_str(&first?).map_err(|e| ArtifactError::Json { line: 1, source: e })?;
        let mut records = Vec::new();
        for (i, l) in lines {
            records.push(serde_json::from_str(&l?).map_err(|e| ArtifactError::Json { line: i + 1, source: e })?);
        }
        Ok(Self { meta, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ArtifactError> {
        self.write_jsonl(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ArtifactError> {
        Self::read_jsonl(BufReader::new(File::open(path)?))
    }
}
