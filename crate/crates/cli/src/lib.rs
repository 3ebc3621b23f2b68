//! Argument parsing and dispatch for the `dxrerank` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dxrerank::evidence::Task;
use dxrerank::llm::LlmBackend;
use dxrerank::pipeline::{self, Outcome, Overrides, PipelineError, RunConfig};
use dxrerank::prompting::{AblationStage, Strategy};

#[derive(Debug, Parser)]
#[command(name = "dxrerank", version, about = "Next-visit diagnosis prediction with evidence-guided LLM re-ranking")]
pub struct Cli {
    /// JSON run configuration; defaults apply to every missing field.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for generation, splitting, training and mock LLMs.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Directory with novel.txt / overall.txt prompt templates.
    #[arg(long, global = true)]
    pub templates: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and ontology.
    Synth,
    /// Train the deep backend on the train split.
    Train,
    /// Count co-occurrences on the train split.
    Cooc,
    /// Predict the test split.
    Predict(PredictArgs),
    /// Score a prediction artifact.
    Eval,
    /// Run the four ablation stages over seeded re-splits.
    Ablate,
    /// Predict and score once per candidate-set size.
    SweepK {
        /// Comma-separated K values, overriding the config.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Candidate set size.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// base, candidate, prioritization or full.
    #[arg(long)]
    pub stage: Option<AblationStage>,
    /// remote, mock_echo or mock_evidence.
    #[arg(long)]
    pub llm: Option<LlmBackend>,
}

/// Loads, overrides and validates the configuration for `cli`.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(t) = &cli.templates {
        cfg.paths.templates = Some(t.clone());
    }
    let mut overrides = Overrides { seed: cli.seed, out: cli.out.clone(), k: None };
    match &cli.command {
        Command::Predict(a) => {
            overrides.k = a.k;
            if let Some(t) = a.task {
                cfg.prompt.task = t;
            }
            if let Some(s) = a.strategy {
                cfg.prompt.strategy = s;
            }
            if let Some(s) = a.stage {
                cfg.prompt.flags = s.flags();
            }
            if let Some(b) = a.llm {
                cfg.llm.backend = b;
            }
        }
        Command::SweepK { ks: Some(ks) } => cfg.sweep_k = ks.clone(),
        _ => {}
    }
    cfg.resolve(&overrides)
}

pub fn run(cli: &Cli) -> Result<Outcome, PipelineError> {
    let cfg = resolve_config(cli)?;
    match cli.command {
        Command::Synth => pipeline::cmd_synth(&cfg),
        Command::Train => pipeline::cmd_train(&cfg),
        Command::Cooc => pipeline::cmd_cooc(&cfg),
        Command::Predict(_) => pipeline::cmd_predict(&cfg),
        Command::Eval => pipeline::cmd_eval(&cfg),
        Command::Ablate => pipeline::cmd_ablate(&cfg),
        Command::SweepK { .. } => pipeline::cmd_sweep_k(&cfg),
    }
}
