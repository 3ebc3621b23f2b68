//! Library-level stages. The commands wrap these with file IO.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::access::{AccessLog, SplitName, Splits};
use super::config::RunConfig;
use super::PipelineError;
use crate::backend::{train, ModelParams, TrainReport};
use crate::ehr::{build_instances, InstanceMode, Ontology, PredictionInstance};
use crate::eval::{RunArtifact, RunMeta, RunRecord};
use crate::evidence::{
    build_cooccurrence, extract_relations, prioritize_history, propagate_to_icd, select_candidates, CandidateSet,
    CooccurrenceMatrix, Task,
};
use crate::llm::{CompletionRequest, CompletionResult, LlmClient, LlmError};
use crate::prompting::{
    candidate_names, compose_prompt, parse_answer, sc_aggregate, ParsedPrediction, PromptOptions, PromptTemplates,
    Strategy,
};

pub const TRAIN_STAGE: &str = "train";
pub const COOC_STAGE: &str = "cooc";
pub const PREDICT_STAGE: &str = "predict";

pub fn train_stage(
    cfg: &RunConfig,
    splits: &Splits,
    ontology: &Ontology,
    log: &AccessLog,
) -> Result<(ModelParams, TrainReport), PipelineError> {
    let data = splits.read(SplitName::Train, TRAIN_STAGE, log);
    Ok(train(cfg.backend, data, ontology, &cfg.train)?)
}

pub fn cooc_stage(splits: &Splits, log: &AccessLog) -> CooccurrenceMatrix {
    build_cooccurrence(splits.read(SplitName::Train, COOC_STAGE, log))
}

/// Last-visit prediction instances of the test split.
pub fn test_instances(splits: &Splits, log: &AccessLog) -> Vec<PredictionInstance> {
    let test = splits.read(SplitName::Test, PREDICT_STAGE, log);
    build_instances(test, 2, InstanceMode::LastVisit).expect("min_visits 2 is valid")
}

/// Everything needed to turn one instance into a record.
pub struct PredictContext<'a> {
    pub params: &'a ModelParams,
    pub cooccurrence: &'a CooccurrenceMatrix,
    pub ontology: &'a Ontology,
    pub templates: &'a PromptTemplates,
    pub client: &'a LlmClient,
    pub k: usize,
    pub prompt: PromptOptions,
    pub sc_samples: u32,
    pub sc_temperature: f64,
}

impl<'a> PredictContext<'a> {
    pub fn from_config(
        cfg: &RunConfig,
        params: &'a ModelParams,
        cooccurrence: &'a CooccurrenceMatrix,
        ontology: &'a Ontology,
        templates: &'a PromptTemplates,
        client: &'a LlmClient,
    ) -> Self {
        Self {
            params,
            cooccurrence,
            ontology,
            templates,
            client,
            k: cfg.k,
            prompt: cfg.prompt.clone(),
            sc_samples: cfg.sc_samples,
            sc_temperature: cfg.sc_temperature,
        }
    }
}

/// Candidate set for one instance. Without candidate generation the whole
/// vocabulary is offered in code order, so the prompt carries no backend ranking.
fn candidates_for(
    inst: &PredictionInstance,
    logits: &crate::backend::LogitVector,
    ctx: &PredictContext<'_>,
) -> Result<CandidateSet, PipelineError> {
    let task = ctx.prompt.task;
    if ctx.prompt.effective_flags().candidates {
        return Ok(select_candidates(logits, ctx.k, task, &inst.history_ccs)?);
    }
    let mut all = select_candidates(logits, logits.len().max(1), task, &inst.history_ccs)?;
    all.entries.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(all)
}

fn try_predict(inst: &PredictionInstance, ctx: &PredictContext<'_>, rec: &mut RunRecord) -> Result<(), PipelineError> {
    let logits = ctx.params.logits(inst)?;
    let cands = candidates_for(inst, &logits, ctx)?;
    rec.candidates = cands.codes().cloned().collect();
    let flags = ctx.prompt.effective_flags();

    let prioritized = if flags.prioritization {
        // the novel prompt only shows the most recent visit
        let (codes, visits) = match ctx.prompt.task {
            Task::Novel => (&inst.last_input_visit().ccs, std::slice::from_ref(inst.last_input_visit())),
            Task::Overall => (&inst.history_ccs, inst.input_visits.as_slice()),
        };
        let ordered = prioritize_history(codes, &logits)?;
        Some(propagate_to_icd(&ordered, visits, ctx.ontology))
    } else {
        None
    };
    let relations = flags.relations.then(|| extract_relations(&inst.history_ccs, &cands, ctx.cooccurrence));
    let spec = compose_prompt(
        inst,
        prioritized.as_ref(),
        relations.as_ref(),
        &cands,
        ctx.ontology,
        &ctx.prompt,
        ctx.templates,
    )?;
    rec.prompt = spec.text;
    let names = candidate_names(&cands, ctx.ontology);

    let parsed = if ctx.prompt.strategy == Strategy::Sc {
        let mut samples: Vec<ParsedPrediction> = Vec::with_capacity(ctx.sc_samples as usize);
        for s in 0..ctx.sc_samples {
            let req = CompletionRequest {
                id: inst.patient_id.clone(),
                prompt: rec.prompt.clone(),
                temperature: Some(ctx.sc_temperature),
                sample: s,
            };
            let out = complete(ctx.client, &req, rec)?;
            samples.push(parse_answer(&out.text, &names));
        }
        sc_aggregate(&samples)?
    } else {
        let out = complete(ctx.client, &CompletionRequest::new(inst.patient_id.clone(), rec.prompt.clone()), rec)?;
        parse_answer(&out.text, &names)
    };
    rec.raw_text = parsed.raw_text;
    rec.ranked = parsed.ranked;
    rec.matched_count = parsed.matched_count;
    Ok(())
}

/// Calls the LLM and adds the attempts made to the record, failed or not.
fn complete(client: &LlmClient, req: &CompletionRequest, rec: &mut RunRecord) -> Result<CompletionResult, LlmError> {
    match client.complete(req) {
        Ok(out) => {
            rec.attempts += out.attempt_count;
            Ok(out)
        }
        Err(e) => {
            if let LlmError::Transport { attempts, .. } = &e {
                rec.attempts += attempts;
            }
            Err(e)
        }
    }
}

/// Runs the full evidence chain for one instance. Failures are kept on the record.
pub fn predict_instance(inst: &PredictionInstance, ctx: &PredictContext<'_>) -> RunRecord {
    let mut rec = RunRecord::for_instance(inst);
    if let Err(e) = try_predict(inst, ctx, &mut rec) {
        rec.ranked.clear();
        rec.error = Some(e.to_string());
    }
    rec
}

/// Predicts every instance on `workers` threads; output is sorted by
/// (patient id, target day) regardless of completion order.
pub fn predict_all(instances: &[PredictionInstance], ctx: &PredictContext<'_>, workers: usize) -> Vec<RunRecord> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<RunRecord>>> = Mutex::new(vec![None; instances.len()]);
    let workers = workers.clamp(1, instances.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(inst) = instances.get(i) else { break };
                let rec = predict_instance(inst, ctx);
                slots.lock().unwrap()[i] = Some(rec);
            });
        }
    });
    let mut out: Vec<RunRecord> = slots.into_inner().unwrap().into_iter().map(|r| r.expect("every slot filled")).collect();
    out.sort_by(|a, b| a.patient_id.cmp(&b.patient_id).then(a.target_day.cmp(&b.target_day)));
    out
}

pub fn run_meta(cfg: &RunConfig, label: impl Into<String>) -> RunMeta {
    RunMeta { fingerprint: cfg.fingerprint(), seed: cfg.seed, task: cfg.prompt.task, label: label.into() }
}

/// Predicts the test split and checks the failure budget.
pub fn predict_stage(
    cfg: &RunConfig,
    splits: &Splits,
    log: &AccessLog,
    ctx: &PredictContext<'_>,
    label: &str,
) -> Result<RunArtifact, PipelineError> {
    let instances = test_instances(splits, log);
    let records = predict_all(&instances, ctx, cfg.llm.max_in_flight);
    Ok(RunArtifact { meta: run_meta(cfg, label), records })
}

/// Errors when more than `max_rate` of records failed.
pub fn check_failures(artifact: &RunArtifact, max_rate: f64) -> Result<(), PipelineError> {
    let failed = artifact.n_failed();
    let total = artifact.records.len();
    if total > 0 && failed as f64 > max_rate * total as f64 {
        let first = artifact.records.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(PipelineError::TooManyFailures { failed, total, first });
    }
    Ok(())
}
