//! File-level subcommands. Each writes its resolved config next to its outputs.

use std::path::{Path, PathBuf};

use super::access::{AccessLog, Splits};
use super::config::RunConfig;
use super::stages::{check_failures, cooc_stage, predict_stage, train_stage, PredictContext};
use super::PipelineError;
use crate::backend::{load_params, save_params, BackendError, ModelParams};
use crate::ehr::{generate_synthetic, load_dataset, load_ontology, save_dataset, save_ontology, Dataset, Ontology, SynthError};
use crate::eval::{compare_ablations, evaluate_run, ComparisonTable, MetricsReport, RunArtifact};
use crate::evidence::{load_cooccurrence, save_cooccurrence, CooccurrenceMatrix};
use crate::llm::LlmClient;
use crate::prompting::{PromptTemplates, Strategy};

/// What a command did, for the CLI to print.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub message: String,
    pub files: Vec<PathBuf>,
}

fn require(path: &Path) -> Result<&Path, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingInput(path.to_path_buf()))
    }
}

fn write(path: &Path, text: &str, files: &mut Vec<PathBuf>) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    files.push(path.to_path_buf());
    Ok(())
}

fn load_inputs(cfg: &RunConfig) -> Result<(Dataset, Ontology), PipelineError> {
    let ontology = load_ontology(require(&cfg.ontology_path())?)?;
    let dataset = load_dataset(require(&cfg.dataset_path())?, &ontology)?;
    Ok((dataset, ontology))
}

fn load_model(cfg: &RunConfig, ontology: &Ontology) -> Result<ModelParams, PipelineError> {
    let (params, _) = load_params(require(&cfg.params_path())?, ontology)?;
    if params.kind() != cfg.backend {
        return Err(BackendError::KindMismatch { expected: cfg.backend, found: params.kind() }.into());
    }
    Ok(params)
}

fn load_cooc(cfg: &RunConfig) -> Result<CooccurrenceMatrix, PipelineError> {
    Ok(load_cooccurrence(require(&cfg.cooccurrence_path())?)?)
}

fn templates(cfg: &RunConfig) -> Result<PromptTemplates, PipelineError> {
    match &cfg.paths.templates {
        Some(dir) => Ok(PromptTemplates::from_dir(require(dir)?)?),
        None => Ok(PromptTemplates::default()),
    }
}

fn splits(cfg: &RunConfig, dataset: &Dataset, seed: u64) -> Result<Splits, PipelineError> {
    Ok(Splits::new(dataset, cfg.split, seed)?)
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l:?}\n"));
    }
    s
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<Outcome, PipelineError> {
    let (dataset, ontology) = generate_synthetic(&cfg.synth).map_err(|e: SynthError| PipelineError::Config(e.to_string()))?;
    let mut files = vec![cfg.write_resolved("synth")?];
    for p in [cfg.dataset_path(), cfg.ontology_path()] {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
    }
    save_dataset(&dataset, cfg.dataset_path())?;
    save_ontology(&ontology, cfg.ontology_path())?;
    files.extend([cfg.dataset_path(), cfg.ontology_path()]);
    Ok(Outcome {
        message: format!("{} patients, {} visits, {} CCS codes", dataset.len(), dataset.n_visits(), ontology.n_ccs()),
        files,
    })
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Outcome, PipelineError> {
    let (dataset, ontology) = load_inputs(cfg)?;
    let mut files = vec![cfg.write_resolved("train")?];
    let log = AccessLog::new();
    let sp = splits(cfg, &dataset, cfg.seed)?;
    let (params, report) = train_stage(cfg, &sp, &ontology, &log)?;
    if let Some(dir) = cfg.params_path().parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_params(&params, cfg.train.seed, cfg.params_path())?;
    files.push(cfg.params_path());
    write(&cfg.out.join("train_loss.csv"), &loss_csv(&report.epoch_losses), &mut files)?;
    write(&cfg.out.join("train.access.csv"), &log.to_csv(), &mut files)?;
    Ok(Outcome {
        message: format!(
            "{} backend, {} training instances, loss {:.6} -> {:.6}",
            cfg.backend,
            report.n_instances,
            report.initial_loss(),
            report.final_loss()
        ),
        files,
    })
}

pub fn cmd_cooc(cfg: &RunConfig) -> Result<Outcome, PipelineError> {
    let (dataset, _) = load_inputs(cfg)?;
    let mut files = vec![cfg.write_resolved("cooc")?];
    let log = AccessLog::new();
    let m = cooc_stage(&splits(cfg, &dataset, cfg.seed)?, &log);
    if let Some(dir) = cfg.cooccurrence_path().parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_cooccurrence(&m, cfg.cooccurrence_path())?;
    files.push(cfg.cooccurrence_path());
    write(&cfg.out.join("cooc.access.csv"), &log.to_csv(), &mut files)?;
    Ok(Outcome { message: format!("{} train patients, {} non-zero pairs", m.n_patients(), m.nnz()), files })
}

fn prediction_summary(a: &RunArtifact) -> String {
    let mut s = format!(
        "{} instances, {} failed, {} LLM attempts",
        a.records.len(),
        a.n_failed(),
        a.records.iter().map(|r| r.attempts as u64).sum::<u64>()
    );
    for r in a.records.iter().filter(|r| r.failed()).take(5) {
        s.push_str(&format!("\n  {}: {}", r.patient_id, r.error.as_deref().unwrap_or_default()));
    }
    s
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<Outcome, PipelineError> {
    let (dataset, ontology) = load_inputs(cfg)?;
    let params = load_model(cfg, &ontology)?;
    let cooc = load_cooc(cfg)?;
    let templates = templates(cfg)?;
    let client = LlmClient::new(cfg.llm.clone())?;
    let mut files = vec![cfg.write_resolved("predict")?];
    let log = AccessLog::new();
    let sp = splits(cfg, &dataset, cfg.seed)?;
    let ctx = PredictContext::from_config(cfg, &params, &cooc, &ontology, &templates, &client);
    let artifact = predict_stage(cfg, &sp, &log, &ctx, "")?;
    if let Some(dir) = cfg.artifact_path().parent() {
        std::fs::create_dir_all(dir)?;
    }
    artifact.save(cfg.artifact_path())?;
    files.push(cfg.artifact_path());
    let summary = prediction_summary(&artifact);
    write(&cfg.out.join("predict.summary.txt"), &format!("{summary}\n"), &mut files)?;
    check_failures(&artifact, cfg.max_failure_rate)?;
    Ok(Outcome { message: summary, files })
}

fn write_report(report: &MetricsReport, stem: &Path, files: &mut Vec<PathBuf>) -> Result<(), PipelineError> {
    write(&stem.with_extension("json"), &(report.to_json() + "\n"), files)?;
    write(&stem.with_extension("txt"), &report.render_table(), files)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<Outcome, PipelineError> {
    let artifact = RunArtifact::load(require(&cfg.artifact_path())?)?;
    let mut files = vec![cfg.write_resolved("eval")?];
    let report = evaluate_run(&artifact, &cfg.ks)?;
    write_report(&report, &cfg.out.join("metrics"), &mut files)?;
    Ok(Outcome { message: report.render_table(), files })
}

fn write_table(table: &ComparisonTable, stem: &Path, files: &mut Vec<PathBuf>) -> Result<(), PipelineError> {
    write(&stem.with_extension("csv"), &table.to_csv(), files)?;
    write(&stem.with_extension("txt"), &table.render_table(), files)?;
    let json = serde_json::to_string_pretty(table).map_err(|e| PipelineError::Config(e.to_string()))?;
    write(&stem.with_extension("json"), &(json + "\n"), files)
}

/// Each run `i` re-splits with `seed + i`, retrains, recounts co-occurrence
/// and predicts once per ablation stage.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Outcome, PipelineError> {
    let (dataset, ontology) = load_inputs(cfg)?;
    let templates = templates(cfg)?;
    let mut files = vec![cfg.write_resolved("ablate")?];
    let mut groups: Vec<(String, Vec<MetricsReport>)> =
        cfg.ablate_stages.iter().map(|s| (s.label().to_string(), Vec::new())).collect();
    for run in 0..cfg.ablate_runs {
        let seed = cfg.seed.wrapping_add(run as u64);
        let mut run_cfg = cfg.clone();
        run_cfg.seed = seed;
        run_cfg.train.seed = seed;
        run_cfg.llm.seed = seed;
        run_cfg.prompt.strategy = Strategy::Evidence;
        let log = AccessLog::new();
        let sp = splits(&run_cfg, &dataset, seed)?;
        let (params, _) = train_stage(&run_cfg, &sp, &ontology, &log)?;
        let cooc = cooc_stage(&sp, &log);
        let client = LlmClient::new(run_cfg.llm.clone())?;
        for (stage, group) in cfg.ablate_stages.iter().zip(groups.iter_mut()) {
            let mut stage_cfg = run_cfg.clone();
            stage_cfg.prompt.flags = stage.flags();
            let ctx = PredictContext::from_config(&stage_cfg, &params, &cooc, &ontology, &templates, &client);
            let artifact = predict_stage(&stage_cfg, &sp, &log, &ctx, stage.label())?;
            let name = format!("{stage:?}").to_lowercase();
            let path = cfg.out.join("ablate").join(format!("run{run}")).join(format!("{name}.jsonl"));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            artifact.save(&path)?;
            files.push(path);
            check_failures(&artifact, cfg.max_failure_rate)?;
            group.1.push(evaluate_run(&artifact, &cfg.ks)?);
        }
    }
    let table = compare_ablations(&groups)?;
    write_table(&table, &cfg.out.join("ablation"), &mut files)?;
    Ok(Outcome { message: table.render_table(), files })
}

/// Predicts and scores the test split once per K in `sweep_k`, reusing the
/// trained params and co-occurrence counts.
pub fn cmd_sweep_k(cfg: &RunConfig) -> Result<Outcome, PipelineError> {
    let (dataset, ontology) = load_inputs(cfg)?;
    let params = load_model(cfg, &ontology)?;
    let cooc = load_cooc(cfg)?;
    let templates = templates(cfg)?;
    let client = LlmClient::new(cfg.llm.clone())?;
    let mut files = vec![cfg.write_resolved("sweep-k")?];
    let log = AccessLog::new();
    let sp = splits(cfg, &dataset, cfg.seed)?;
    let mut groups = Vec::with_capacity(cfg.sweep_k.len());
    for &k in &cfg.sweep_k {
        let k_cfg = RunConfig { k, ..cfg.clone() };
        let ctx = PredictContext::from_config(&k_cfg, &params, &cooc, &ontology, &templates, &client);
        let label = format!("K={k}");
        let artifact = predict_stage(&k_cfg, &sp, &log, &ctx, &label)?;
        check_failures(&artifact, cfg.max_failure_rate)?;
        groups.push((label, vec![evaluate_run(&artifact, &cfg.ks)?]));
    }
    let table = compare_ablations(&groups)?;
    write_table(&table, &cfg.out.join("sweep_k"), &mut files)?;
    Ok(Outcome { message: table.render_table(), files })
}
