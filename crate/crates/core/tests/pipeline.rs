//! File-level commands run in temporary directories.

use std::collections::BTreeSet;
use std::path::Path;

use dxrerank::backend::train::init_params;
use dxrerank::backend::{load_params, BackendKind};
use dxrerank::ehr::{load_ontology, DEFAULT_SPLIT};
use dxrerank::eval::RunArtifact;
use dxrerank::pipeline::{
    cmd_ablate, cmd_cooc, cmd_eval, cmd_predict, cmd_sweep_k, cmd_synth, cmd_train, cooc_stage, test_instances,
    train_stage, AccessLog, Overrides, PipelineError, RunConfig, SplitName, Splits, COOC_STAGE, PREDICT_STAGE,
    TRAIN_STAGE,
};
use dxrerank::prompting::{headers, AblationStage};

const SMALL: &str = r#"{
  "synth": {"n_patients": 80, "n_ccs": 20, "visits_range": [2, 4]},
  "train": {"epochs": 2, "d": 4},
  "k": 8,
  "sweep_k": [3, 8],
  "ablate_runs": 2,
  "llm": {"backend": "mock_echo"}
}"#;

fn config(out: &Path, extra: &[(&str, serde_json::Value)]) -> RunConfig {
    let mut v: serde_json::Value = serde_json::from_str(SMALL).unwrap();
    for (k, val) in extra {
        v[*k] = val.clone();
    }
    RunConfig::from_json(&v.to_string())
        .unwrap()
        .resolve(&Overrides { out: Some(out.to_path_buf()), ..Overrides::default() })
        .unwrap()
}

fn prepare(cfg: &RunConfig) {
    cmd_synth(cfg).unwrap();
    cmd_train(cfg).unwrap();
    cmd_cooc(cfg).unwrap();
}

#[test]
fn synth_is_deterministic_and_creates_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let a = config(&dir.path().join("nested/a"), &[]);
    let b = config(&dir.path().join("b"), &[]);
    cmd_synth(&a).unwrap();
    cmd_synth(&b).unwrap();
    for name in ["dataset.jsonl", "ontology.csv"] {
        let x = std::fs::read(a.out.join(name)).unwrap();
        assert_eq!(x, std::fs::read(b.out.join(name)).unwrap(), "{name}");
    }
    assert!(a.out.join("synth.config.json").exists());
}

#[test]
fn unknown_rule_code_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let v: serde_json::Value = serde_json::from_str(
        r#"{"n_patients": 10, "n_ccs": 5, "rules": [{"trigger": "CCS:001", "onset": "CCS:999", "q": 0.5}]}"#,
    )
    .unwrap();
    let mut cfg = config(dir.path(), &[]);
    cfg.synth = serde_json::from_value(v).unwrap();
    let err = cmd_synth(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn zero_epochs_writes_initial_params() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[("train", serde_json::json!({"epochs": 0, "d": 4}))]);
    cmd_synth(&cfg).unwrap();
    cmd_train(&cfg).unwrap();
    let ont = load_ontology(cfg.ontology_path()).unwrap();
    let (params, seed) = load_params(cfg.params_path(), &ont).unwrap();
    assert_eq!(seed, cfg.train.seed);
    assert_eq!(params, init_params(BackendKind::Box, &ont, &cfg.train));
    let loss = std::fs::read_to_string(cfg.out.join("train_loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 2);
}

#[test]
fn training_is_reproducible_and_logs_every_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[]);
    cmd_synth(&cfg).unwrap();
    cmd_train(&cfg).unwrap();
    let first = std::fs::read(cfg.params_path()).unwrap();
    let loss = std::fs::read_to_string(cfg.out.join("train_loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + cfg.train.epochs + 1);
    cmd_train(&cfg).unwrap();
    assert_eq!(first, std::fs::read(cfg.params_path()).unwrap());
}

#[test]
fn echo_predictions_keep_candidate_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), &[]);
    cfg.k = 3;
    prepare(&cfg);
    cmd_predict(&cfg).unwrap();
    let art = RunArtifact::load(cfg.artifact_path()).unwrap();
    assert!(!art.records.is_empty());
    for r in &art.records {
        assert!(r.error.is_none());
        assert!(r.candidates.len() <= 3);
        assert_eq!(r.ranked, r.candidates);
        assert_eq!(r.matched_count, r.candidates.len());
    }
    cmd_eval(&cfg).unwrap();
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cfg.out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["n_instances"].as_u64().unwrap() as usize, art.records.len());
}

#[test]
fn base_stage_prompt_has_no_evidence() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), &[]);
    cfg.prompt.flags = AblationStage::Base.flags();
    prepare(&cfg);
    cmd_predict(&cfg).unwrap();
    let art = RunArtifact::load(cfg.artifact_path()).unwrap();
    for r in &art.records {
        for h in [headers::NOVEL_PRIORITIZED, headers::NOVEL_RELATIONS] {
            assert!(!r.prompt.contains(h), "{h}");
        }
        // whole vocabulary minus history, in id order
        assert_eq!(r.candidates.len(), 20 - r.history_ccs.len());
        assert!(r.candidates.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn train_and_cooc_never_read_the_test_split() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[]);
    cmd_synth(&cfg).unwrap();
    let ont = load_ontology(cfg.ontology_path()).unwrap();
    let ds = dxrerank::ehr::load_dataset(cfg.dataset_path(), &ont).unwrap();
    let splits = Splits::new(&ds, DEFAULT_SPLIT, cfg.seed).unwrap();
    let log = AccessLog::new();
    train_stage(&cfg, &splits, &ont, &log).unwrap();
    cooc_stage(&splits, &log);
    let instances = test_instances(&splits, &log);
    let test_ids: BTreeSet<String> = instances.iter().map(|i| i.patient_id.clone()).collect();
    assert!(!test_ids.is_empty());
    for stage in [TRAIN_STAGE, COOC_STAGE] {
        assert!(log.patients_read_by(stage).is_disjoint(&test_ids), "{stage}");
        assert!(log.events().iter().filter(|e| e.stage == stage).all(|e| e.split == SplitName::Train));
    }
    assert!(log.patients_read_by(PREDICT_STAGE).is_superset(&test_ids));

    // the files written by the commands say the same
    cmd_train(&cfg).unwrap();
    cmd_cooc(&cfg).unwrap();
    for file in ["train.access.csv", "cooc.access.csv"] {
        let text = std::fs::read_to_string(cfg.out.join(file)).unwrap();
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[1], "train", "{file}: {line}");
            assert!(!test_ids.contains(cols[2]));
        }
    }
}

#[test]
fn missing_inputs_and_mismatches_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[]);
    let err = cmd_eval(&cfg).unwrap_err();
    assert!(matches!(err, PipelineError::MissingInput(_)));
    assert_eq!(err.exit_code(), 2);
    assert_eq!(cmd_train(&cfg).unwrap_err().exit_code(), 2);

    prepare(&cfg);
    let mut retain = cfg.clone();
    retain.backend = BackendKind::Retain;
    let err = cmd_predict(&retain).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn unreachable_remote_fails_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        &[(
            "llm",
            serde_json::json!({"backend": "remote", "endpoint_url": "http://127.0.0.1:9/v1/chat/completions",
                "max_retries": 0, "timeout_ms": 2000}),
        )],
    );
    prepare(&cfg);
    let err = cmd_predict(&cfg).unwrap_err();
    assert!(matches!(err, PipelineError::TooManyFailures { .. }), "{err}");
    assert_eq!(err.exit_code(), 1);
    // the artifact is still written, with every record marked failed
    let art = RunArtifact::load(cfg.artifact_path()).unwrap();
    assert_eq!(art.n_failed(), art.records.len());
    assert!(art.records.iter().all(|r| r.attempts == 1 && r.ranked.is_empty()));
}

#[test]
fn ablate_and_sweep_emit_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &[("llm", serde_json::json!({}))]);
    prepare(&cfg);
    cmd_ablate(&cfg).unwrap();
    let csv = std::fs::read_to_string(cfg.out.join("ablation.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, AblationStage::ALL.map(|s| s.label()));
    for run in 0..cfg.ablate_runs {
        for stage in ["base", "candidate", "prioritization", "full"] {
            assert!(cfg.out.join(format!("ablate/run{run}/{stage}.jsonl")).exists());
        }
    }
    cmd_sweep_k(&cfg).unwrap();
    let csv = std::fs::read_to_string(cfg.out.join("sweep_k.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["K=3", "K=8"]);
}
