//! Acceptance checks. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use dxrerank::backend::gradcheck::{check_gradients, DEFAULT_STEP};
use dxrerank::backend::{
    intersection_volume, load_params, BoxEmbed, BoxLmParams, Encoded, RetainParams, VolumeConfig, Vocab,
};
use dxrerank::ehr::{
    build_instances, generate_synthetic, load_dataset, load_ontology, CcsId, Dataset, InstanceMode, PatientRecord,
    SyntheticConfig, Visit,
};
use dxrerank::eval::{evaluate_run, novel_filter, scored_view, KGrid, RunArtifact, RunMeta, RunRecord};
use dxrerank::evidence::{build_cooccurrence, Task};
use dxrerank::pipeline::{
    cmd_ablate, cmd_cooc, cmd_eval, cmd_predict, cmd_sweep_k, cmd_synth, cmd_train, test_instances, AccessLog,
    Overrides, RunConfig, Splits,
};
use dxrerank::prompting::AblationStage;
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn resolved(json: &str, out: &Path) -> RunConfig {
    RunConfig::from_json(json)
        .unwrap()
        .resolve(&Overrides { out: Some(out.to_path_buf()), ..Overrides::default() })
        .unwrap()
}

// ---- 1. metric fixture ---------------------------------------------------

fn ids(s: &str) -> Vec<CcsId> {
    s.split_whitespace().map(CcsId::new).collect()
}

fn record(pid: &str, ranked: &str, overall: &str, history: &str) -> RunRecord {
    let target_overall: BTreeSet<CcsId> = ids(overall).into_iter().collect();
    let history_ccs: BTreeSet<CcsId> = ids(history).into_iter().collect();
    RunRecord {
        patient_id: pid.into(),
        target_day: 0,
        candidates: ids(ranked),
        prompt: String::new(),
        raw_text: String::new(),
        ranked: ids(ranked),
        matched_count: 6,
        target_novel: target_overall.difference(&history_ccs).cloned().collect(),
        target_overall,
        history_ccs,
        attempts: 1,
        error: None,
    }
}

fn metric_fixture() -> Check {
    let start = Instant::now();
    let records = vec![
        record("p01", "a b c d e f", "a d", "a"),
        record("p02", "b a c d e f", "c", ""),
        record("p03", "c d e f a b", "a b e", "e"),
        record("p04", "d c b a f e", "f", "f"),
        record("p05", "e f a b c d", "e f a", ""),
        record("p06", "f e d c b a", "b", "a b"),
        record("p07", "a c e b d f", "c d", "c"),
        record("p08", "b d f a c e", "a b", ""),
        record("p09", "a b c d e f", "x", ""),
        record("p10", "c a b e d f", "d f", "d"),
    ];
    let art = RunArtifact { meta: RunMeta { fingerprint: "f".into(), seed: 0, task: Task::Novel, label: String::new() }, records };
    let r = evaluate_run(&art, &KGrid { novel: vec![1, 3], overall: vec![2, 4] }).map_err(|e| e.to_string())?;
    // evaluated by hand from the fixture rows
    let expected = [
        ("overall P@2", r.overall.precision(2), 0.25),
        ("overall Acc@2", r.overall.accuracy(2), 5.0 / 18.0),
        ("overall P@4", r.overall.precision(4), 29.0 / 60.0),
        ("overall Acc@4", r.overall.accuracy(4), 5.0 / 9.0),
        ("novel P@1", r.novel.precision(1), 0.25),
        ("novel Acc@1", r.novel.accuracy(1), 1.0 / 6.0),
        ("novel P@3", r.novel.precision(3), 0.4375),
        ("novel Acc@3", r.novel.accuracy(3), 0.5),
    ];
    for (name, got, want) in expected {
        let got = got.ok_or_else(|| format!("{name} missing"))?;
        ensure((got - want).abs() < 1e-9, || format!("{name}: {got} != {want}"))?;
    }
    within(start.elapsed(), Duration::from_secs(1))?;
    Ok(format!("8 values exact, {:.2?}", start.elapsed()))
}

// ---- 2. gradients -----------------------------------------------------------

fn random_batch(rng: &mut ChaCha8Rng, n_codes: usize, n: usize) -> Vec<Encoded> {
    (0..n)
        .map(|_| {
            let visits = (0..rng.random_range(1..=3))
                .map(|_| {
                    let v: BTreeSet<usize> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(0..n_codes)).collect();
                    v.into_iter().collect()
                })
                .collect();
            let t: BTreeSet<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(0..n_codes)).collect();
            Encoded { visits, targets: t.into_iter().collect() }
        })
        .collect()
}

fn gradients() -> Check {
    let start = Instant::now();
    let vocab = Vocab::new((0..10).map(|i| CcsId::new(format!("C{i}"))).collect());
    let (mut worst_box, mut worst_retain, mut skipped) = (0.0f64, 0.0f64, 0);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_batch(&mut rng, 10, 4);
        let b = check_gradients(&BoxLmParams::init(vocab.clone(), 4, VolumeConfig::default(), seed), &batch, DEFAULT_STEP, None)
            .map_err(|e| e.to_string())?;
        ensure(b.checked > b.skipped, || format!("box seed {seed}: nothing checked"))?;
        let r = check_gradients(&RetainParams::init(vocab.clone(), 4, seed), &batch, DEFAULT_STEP, None)
            .map_err(|e| e.to_string())?;
        ensure(r.skipped == 0, || format!("retain seed {seed} skipped {}", r.skipped))?;
        worst_box = worst_box.max(b.max_rel_error);
        worst_retain = worst_retain.max(r.max_rel_error);
        skipped += b.skipped;
    }
    ensure(worst_box < 1e-3 && worst_retain < 1e-3, || format!("box {worst_box:e}, retain {worst_retain:e}"))?;
    within(start.elapsed(), Duration::from_secs(30))?;
    Ok(format!(
        "max rel error box {worst_box:.1e}, retain {worst_retain:.1e}, {skipped} box kinks skipped, {:.2?}",
        start.elapsed()
    ))
}

// ---- 3. co-occurrence -------------------------------------------------------

fn cooccurrence() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut pairs = 0usize;
    for case in 0..50 {
        let n = rng.random_range(0..=100);
        let c = rng.random_range(1..=20);
        let code = |i: usize| CcsId::new(format!("C{i:02}"));
        let patients = (0..n)
            .map(|p| PatientRecord {
                patient_id: format!("p{p}"),
                visits: (0..rng.random_range(1..5))
                    .map(|t| Visit {
                        day: t,
                        icd: BTreeSet::new(),
                        ccs: (0..rng.random_range(0..6)).map(|_| code(rng.random_range(0..c))).collect(),
                    })
                    .collect(),
            })
            .collect();
        let ds = Dataset::new(patients, "acceptance");
        let g = build_cooccurrence(&ds);
        for i in 0..c {
            for j in 0..c {
                let mut count = 0u32;
                for p in &ds.patients {
                    let has = |k: usize| p.visits.iter().any(|v| v.ccs.contains(&code(k)));
                    if has(i) && has(j) {
                        count += 1;
                    }
                }
                ensure(g.get(&code(i), &code(j)) == count, || format!("case {case} ({i},{j})"))?;
                pairs += 1;
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    Ok(format!("{pairs} pairs equal over 50 datasets, {:.2?}", start.elapsed()))
}

// ---- 4. box volume ----------------------------------------------------------

fn random_box(rng: &mut ChaCha8Rng, d: usize) -> (Vec<f64>, Vec<f64>) {
    ((0..d).map(|_| rng.random_range(-2.0..2.0)).collect(), (0..d).map(|_| rng.random_range(0.05..2.0)).collect())
}

fn embed(c: &[f64], o: &[f64]) -> BoxEmbed {
    BoxEmbed::from_offsets(Array1::from(c.to_vec()), &Array1::from(o.to_vec()))
}

fn box_volume() -> Check {
    let cfg = VolumeConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..1000 {
        let d = rng.random_range(1..=6);
        let (ca, oa) = random_box(&mut rng, d);
        let (cb, ob) = random_box(&mut rng, d);
        let vol = |c1: &[f64], o1: &[f64], c2: &[f64], o2: &[f64]| intersection_volume(&embed(c1, o1), &embed(c2, o2), &cfg).unwrap();
        let v = vol(&ca, &oa, &cb, &ob);
        ensure(v > 0.0 && v.is_finite(), || format!("pair {i}: volume {v}"))?;

        let k = rng.random_range(0..d);
        let mut wider = oa.clone();
        wider[k] += rng.random_range(0.0..1.5);
        let v2 = vol(&ca, &wider, &cb, &ob);
        ensure(v2 >= v * (1.0 - 1e-12), || format!("pair {i}: widening {v} -> {v2}"))?;

        // b strictly inside a
        let shrink: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..0.9)).collect();
        let inner_o: Vec<f64> = oa.iter().zip(&shrink).map(|(o, s)| o * s).collect();
        let inner_c: Vec<f64> =
            (0..d).map(|j| ca[j] + rng.random_range(-0.95..0.95) * (oa[j] - inner_o[j])).collect();
        let nested = vol(&ca, &oa, &inner_c, &inner_o);
        let own = vol(&inner_c, &inner_o, &inner_c, &inner_o);
        ensure((nested - own).abs() <= 1e-12 * own, || format!("pair {i}: nested {nested} vs own {own}"))?;
    }
    Ok("1000 pairs: positive, monotone under widening, nested identity".into())
}

// ---- 5. ablation trend ------------------------------------------------------

fn ablation_config() -> String {
    let rules: Vec<String> = (0..10)
        .map(|k| format!(r#"{{"trigger":"CCS:{:03}","onset":"CCS:{:03}","q":0.6}}"#, k, 99 - k))
        .collect();
    format!(
        r#"{{
  "seed": 0,
  "synth": {{"n_patients": 500, "n_ccs": 100, "n_clusters": 5, "visits_range": [3, 6], "rules": [{}]}},
  "train": {{"epochs": 1, "learning_rate": 0.004}},
  "llm": {{"max_in_flight": 1}},
  "ablate_runs": 5
}}"#,
        rules.join(",")
    )
}

fn ablation() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = resolved(&ablation_config(), dir.path());
    cmd_synth(&cfg).map_err(|e| e.to_string())?;
    cmd_ablate(&cfg).map_err(|e| e.to_string())?;
    let table: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ablation.json")).unwrap()).unwrap();
    let col = table["columns"].as_array().unwrap().iter().position(|c| c["task"] == "novel" && c["k"] == 10 && c["precision"] == true);
    let col = col.ok_or("no novel P@10 column")?;
    let rows = table["rows"].as_array().unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r["label"].as_str().unwrap()).collect();
    ensure(labels == AblationStage::ALL.map(|s| s.label()), || format!("rows {labels:?}"))?;
    let means: Vec<f64> = rows.iter().map(|r| r["cells"][col]["mean"].as_f64().unwrap()).collect();
    for (i, w) in means.windows(2).enumerate() {
        ensure(w[1] - w[0] > 0.01, || format!("step {} -> {}: {:.4} -> {:.4} ({means:.4?})", labels[i], labels[i + 1], w[0], w[1]))?;
    }
    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(format!("novel P@10 means {}, {:.1?}", means.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join(" < "), start.elapsed()))
}

// ---- 6. K sweep ---------------------------------------------------------------

fn sweep() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let cfg = resolved(r#"{"synth": {"n_patients": 200, "n_ccs": 120}, "train": {"epochs": 2}}"#, dir.path());
    ensure(cfg.k == 50 && RunConfig::default().k == 50, || format!("default K is {}", cfg.k))?;
    ensure(cfg.sweep_k == [10, 25, 50, 100], || format!("sweep grid {:?}", cfg.sweep_k))?;
    for f in [cmd_synth, cmd_train, cmd_cooc, cmd_sweep_k] {
        f(&cfg).map_err(|e| e.to_string())?;
    }
    let csv = std::fs::read_to_string(dir.path().join("sweep_k.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    ensure(labels == ["K=10", "K=25", "K=50", "K=100"], || format!("rows {labels:?}"))?;
    Ok("4 rows (K=10,25,50,100), default K=50".into())
}

// ---- 7. determinism -------------------------------------------------------------

fn determinism() -> Check {
    let config = r#"{"seed": 17, "synth": {"n_patients": 150}, "train": {"epochs": 3}, "llm": {"max_in_flight": 4}}"#;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let cfg = resolved(config, &d.path().join("run"));
        for f in [cmd_synth, cmd_train, cmd_cooc, cmd_predict, cmd_eval] {
            f(&cfg).map_err(|e| e.to_string())?;
        }
    }
    let files = [
        "dataset.jsonl",
        "ontology.csv",
        "params.json",
        "train_loss.csv",
        "cooccurrence.csv",
        "predictions.jsonl",
        "predict.summary.txt",
        "metrics.json",
        "metrics.txt",
    ];
    for f in files {
        let a = std::fs::read(dirs[0].path().join("run").join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join("run").join(f)).unwrap();
        ensure(a == b, || format!("{f} differs"))?;
    }
    Ok(format!("{} files byte-identical across two runs", files.len()))
}

// ---- 8. novel labels -------------------------------------------------------------

fn novel_labels() -> Check {
    let cfg = SyntheticConfig { n_patients: 1000, n_ccs: 40, visits_range: (1, 7), seed: 8, ..SyntheticConfig::default() };
    let (ds, _) = generate_synthetic(&cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    for inst in build_instances(&ds, 2, InstanceMode::AllPrefixes).unwrap() {
        let p = ds.patients.iter().find(|p| p.patient_id == inst.patient_id).unwrap();
        let t = inst.input_visits.len();
        let earlier = |c: &CcsId| p.visits[..t].iter().any(|v| v.ccs.contains(c));
        let novel: BTreeSet<CcsId> = p.visits[t].ccs.iter().filter(|c| !earlier(c)).cloned().collect();
        ensure(inst.target_novel == novel, || format!("{} visit {t}", p.patient_id))?;

        // a random ranking over the vocabulary, filtered
        let mut ranked: Vec<CcsId> = (0..40).map(|k| dxrerank::ehr::synthetic_ccs_id(k, 40)).collect();
        for i in (1..ranked.len()).rev() {
            ranked.swap(i, rng.random_range(0..=i));
        }
        let want: Vec<CcsId> = ranked.iter().filter(|c| !earlier(c)).cloned().collect();
        ensure(novel_filter(&ranked, &inst.history_ccs) == want, || format!("{} filter", p.patient_id))?;
        checked += 1;
    }
    Ok(format!("{checked} instances from 1000 patients"))
}

// ---- 9. echo round trip ----------------------------------------------------------

fn echo_round_trip() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let k = 10;
    let json = format!(
        r#"{{"synth": {{"n_patients": 300}}, "train": {{"epochs": 3}}, "k": {k},
            "prompt": {{"task": "overall"}}, "llm": {{"backend": "mock_echo"}},
            "ks": {{"novel": [{k}], "overall": [{k}]}}}}"#
    );
    let cfg = resolved(&json, dir.path());
    for f in [cmd_synth, cmd_train, cmd_cooc, cmd_predict, cmd_eval] {
        f(&cfg).map_err(|e| e.to_string())?;
    }
    let art = RunArtifact::load(cfg.artifact_path()).unwrap();
    let in_order = art.records.iter().filter(|r| r.error.is_none() && r.ranked == r.candidates).count();
    ensure(in_order == art.records.len(), || format!("{in_order} of {} in candidate order", art.records.len()))?;

    // the backend's own top-K precision, recomputed from the saved params
    let ont = load_ontology(cfg.ontology_path()).unwrap();
    let ds = load_dataset(cfg.dataset_path(), &ont).unwrap();
    let (params, _) = load_params(cfg.params_path(), &ont).unwrap();
    let splits = Splits::new(&ds, cfg.split, cfg.seed).unwrap();
    let mut sum = 0.0;
    let mut n = 0usize;
    for inst in test_instances(&splits, &AccessLog::new()) {
        if inst.target_overall.is_empty() {
            continue;
        }
        let logits = params.logits(&inst).unwrap();
        let mut scored: Vec<(f64, CcsId)> = logits.iter().map(|(c, s)| (s, c.clone())).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        let hits = scored.iter().take(k).filter(|(_, c)| inst.target_overall.contains(c)).count();
        sum += hits as f64 / k.min(inst.target_overall.len()) as f64;
        n += 1;
    }
    let backend = sum / n as f64;
    let eligible = art.records.iter().filter(|r| scored_view(r, Task::Overall).is_some()).count();
    ensure(eligible == n, || format!("{eligible} eligible records, {n} instances"))?;
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    let report = evaluate_run(&art, &cfg.ks).unwrap();
    let pipeline = report.overall.precision(k).unwrap();
    ensure(metrics["overall"].is_object(), || "metrics.json has no overall block".into())?;
    ensure((pipeline - backend).abs() < 1e-12, || format!("pipeline {pipeline} vs backend {backend}"))?;
    Ok(format!("{} of {} records in candidate order; overall P@{k} {pipeline:.4} = backend {backend:.4}", in_order, art.records.len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("metric fixture", metric_fixture),
        ("gradient check", gradients),
        ("co-occurrence oracle", cooccurrence),
        ("box volume properties", box_volume),
        ("ablation trend", ablation),
        ("candidate-size sweep", sweep),
        ("determinism", determinism),
        ("novel labels", novel_labels),
        ("echo round trip", echo_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match result {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
