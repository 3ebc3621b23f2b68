//! Backend checks against hand-rolled reference computations.

use dxrerank::backend::gradcheck::{check_gradients, DEFAULT_STEP};
use dxrerank::backend::train::{init_params, training_examples};
use dxrerank::backend::volume::log_intersection_volume_grad;
use dxrerank::backend::{
    boxlm_logits, infer_logits, intersection_volume, patient_box, retain_logits, train, visit_box, BackendError,
    BackendKind, BoxEmbed, BoxLmParams, Encoded, ModelParams, RetainParams, ScoringModel, TrainConfig, Vocab,
    VolumeConfig,
};
use dxrerank::ehr::{generate_synthetic, synthetic_ccs_id, CcsId, PlantedRule, PredictionInstance, SyntheticConfig, Visit};
use ndarray::{array, Array1};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GAMMA: f64 = 0.5772156649;

fn vocab(n: usize) -> Vocab {
    Vocab::new((0..n).map(|i| CcsId::new(format!("C{i:02}"))).collect())
}

fn instance(visits: &[&[usize]]) -> PredictionInstance {
    let visits: Vec<Visit> = visits
        .iter()
        .enumerate()
        .map(|(t, codes)| Visit {
            day: 10 * t as u32,
            icd: codes.iter().map(|i| format!("I{i:02}").into()).collect(),
            ccs: codes.iter().map(|i| CcsId::new(format!("C{i:02}"))).collect(),
        })
        .collect();
    let history = visits.iter().flat_map(|v| v.ccs.iter().cloned()).collect();
    PredictionInstance {
        patient_id: "p0".into(),
        input_visits: visits,
        target_day: 100,
        target_overall: Default::default(),
        target_novel: Default::default(),
        history_ccs: history,
    }
}

// ---- plain-float reference implementations -------------------------------

fn ref_softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

fn ref_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn ref_softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
    s.iter().map(|x| (x - m).exp() / z).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns (center, effective offset).
fn ref_pool(centers: &[Vec<f64>], offsets: &[Vec<f64>], query: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let scores: Vec<f64> = centers.iter().map(|c| dot(c, query)).collect();
    let w = ref_softmax(&scores);
    let d = query.len();
    let mut center = vec![0.0; d];
    let mut offset = vec![0.0f64; d];
    for (i, c) in centers.iter().enumerate() {
        for k in 0..d {
            center[k] += w[i] * c[k];
            offset[k] = offset[k].max(offsets[i][k]);
        }
    }
    (center, offset)
}

fn ref_volume(ca: &[f64], oa: &[f64], cb: &[f64], ob: &[f64], beta: f64) -> f64 {
    let mut v = 1.0;
    for k in 0..ca.len() {
        let m_max = (ca[k] + oa[k]).min(cb[k] + ob[k]);
        let m_min = (ca[k] - oa[k]).max(cb[k] - ob[k]);
        v *= beta * ref_softplus((m_max - m_min) / beta - 2.0 * GAMMA);
    }
    v
}

fn row(p: &BoxLmParams, i: usize) -> (Vec<f64>, Vec<f64>) {
    let c = p.centers.row(i).to_vec();
    let o = p.offsets_raw.row(i).iter().map(|&x| ref_softplus(x)).collect();
    (c, o)
}

fn mat(m: &ndarray::Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn matvec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|r| dot(r, x)).collect()
}

fn ref_gru(cell: &dxrerank::backend::GruCell, x: &[f64], h: &[f64]) -> Vec<f64> {
    let d = h.len();
    let (wz, uz, wr, ur, wh, uh) =
        (mat(&cell.w_z), mat(&cell.u_z), mat(&cell.w_r), mat(&cell.u_r), mat(&cell.w_h), mat(&cell.u_h));
    let (a, b) = (matvec(&wz, x), matvec(&uz, h));
    let z: Vec<f64> = (0..d).map(|i| ref_sigmoid(a[i] + b[i] + cell.b_z[i])).collect();
    let (a, b) = (matvec(&wr, x), matvec(&ur, h));
    let r: Vec<f64> = (0..d).map(|i| ref_sigmoid(a[i] + b[i] + cell.b_r[i])).collect();
    let rh: Vec<f64> = (0..d).map(|i| r[i] * h[i]).collect();
    let (a, b) = (matvec(&wh, x), matvec(&uh, &rh));
    let hc: Vec<f64> = (0..d).map(|i| (a[i] + b[i] + cell.b_h[i]).tanh()).collect();
    (0..d).map(|i| (1.0 - z[i]) * h[i] + z[i] * hc[i]).collect()
}

fn ref_retain(p: &RetainParams, visits: &[Vec<usize>]) -> Vec<f64> {
    let d = p.dim();
    let embed = mat(&p.embed);
    let v: Vec<Vec<f64>> = visits
        .iter()
        .map(|codes| (0..d).map(|k| codes.iter().map(|&i| embed[k][i]).sum()).collect())
        .collect();
    let n = v.len();
    let mut g = vec![vec![0.0; d]; n];
    let mut hs = vec![vec![0.0; d]; n];
    let (mut ga, mut hb) = (vec![0.0; d], vec![0.0; d]);
    for t in (0..n).rev() {
        ga = ref_gru(&p.rnn_alpha, &v[t], &ga);
        hb = ref_gru(&p.rnn_beta, &v[t], &hb);
        g[t] = ga.clone();
        hs[t] = hb.clone();
    }
    let w_alpha = p.w_alpha.to_vec();
    let alpha = ref_softmax(&g.iter().map(|gt| dot(&w_alpha, gt)).collect::<Vec<_>>());
    let w_beta = mat(&p.w_beta);
    let mut c = vec![0.0; d];
    for t in 0..n {
        let pre = matvec(&w_beta, &hs[t]);
        for k in 0..d {
            c[k] += alpha[t] * (pre[k] + p.b_beta[k]).tanh() * v[t][k];
        }
    }
    let w_o = mat(&p.w_o);
    matvec(&w_o, &c).iter().zip(p.b_o.iter()).map(|(a, b)| a + b).collect()
}

// ---- volume ---------------------------------------------------------------

#[test]
fn unit_overlap_volume_value() {
    let cfg = VolumeConfig::default();
    let a = BoxEmbed::from_offsets(array![0.0], &array![0.5]);
    let v = intersection_volume(&a, &a, &cfg).unwrap();
    let expect = 0.1 * (1.0 + (10.0f64 - 2.0 * GAMMA).exp()).ln();
    assert!((v - expect).abs() < 1e-12);
    assert!((v - 0.88458).abs() < 1e-5, "{v}");
}

#[test]
fn separated_boxes_vanish() {
    let cfg = VolumeConfig::default();
    let a = BoxEmbed::from_offsets(array![0.0], &array![0.5]);
    let b = BoxEmbed::from_offsets(array![11.0], &array![0.5]);
    let v = intersection_volume(&a, &b, &cfg).unwrap();
    assert!(v > 0.0 && v < 1e-40, "{v}");
}

#[test]
fn nested_box_volume_is_its_own() {
    let cfg = VolumeConfig::default();
    let a = BoxEmbed::from_offsets(array![0.0, 1.0], &array![2.0, 3.0]);
    let b = BoxEmbed::from_offsets(array![0.5, 0.0], &array![0.4, 1.0]);
    let ab = intersection_volume(&a, &b, &cfg).unwrap();
    let bb = intersection_volume(&b, &b, &cfg).unwrap();
    assert!((ab - bb).abs() < 1e-12 * bb);
}

#[test]
fn dimension_mismatch_is_an_error() {
    let a = BoxEmbed::from_offsets(array![0.0], &array![1.0]);
    let b = BoxEmbed::from_offsets(array![0.0, 0.0], &array![1.0, 1.0]);
    assert!(matches!(
        intersection_volume(&a, &b, &VolumeConfig::default()),
        Err(BackendError::DimensionMismatch { .. })
    ));
}

#[test]
fn joint_translation_has_zero_gradient() {
    let cfg = VolumeConfig::default();
    let a = BoxEmbed::from_offsets(array![-0.2, 0.3], &array![0.5, 0.7]);
    let b = BoxEmbed::from_offsets(array![0.2, -0.3], &array![0.5, 0.7]);
    let (_, ga, gb) = log_intersection_volume_grad(&a, &b, &cfg).unwrap();
    for k in 0..2 {
        assert!((ga.center[k] + gb.center[k]).abs() < 1e-12);
    }
}

fn arb_box(d: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(-2.0..2.0f64, d), prop::collection::vec(0.05..2.0f64, d))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn widening_never_shrinks_volume(
        (ca, oa) in arb_box(3),
        (cb, ob) in arb_box(3),
        k in 0usize..3,
        extra in 0.0..1.5f64,
        widen_a in any::<bool>(),
    ) {
        let cfg = VolumeConfig::default();
        let a = BoxEmbed::from_offsets(Array1::from(ca.clone()), &Array1::from(oa.clone()));
        let b = BoxEmbed::from_offsets(Array1::from(cb.clone()), &Array1::from(ob.clone()));
        let before = intersection_volume(&a, &b, &cfg).unwrap();
        prop_assert!(before > 0.0);
        let (mut oa2, mut ob2) = (oa, ob);
        if widen_a { oa2[k] += extra } else { ob2[k] += extra }
        let a2 = BoxEmbed::from_offsets(Array1::from(ca), &Array1::from(oa2));
        let b2 = BoxEmbed::from_offsets(Array1::from(cb), &Array1::from(ob2));
        let after = intersection_volume(&a2, &b2, &cfg).unwrap();
        prop_assert!(after >= before * (1.0 - 1e-12), "{} < {}", after, before);
    }
}

// ---- aggregation ----------------------------------------------------------

#[test]
fn visit_and_patient_boxes_match_reference() {
    for seed in 0..5 {
        let p = BoxLmParams::init(vocab(8), 4, VolumeConfig::default(), seed);
        let codes = [0usize, 2, 3, 5, 7];
        let boxes: Vec<BoxEmbed> = codes.iter().map(|&i| p.code_box(i)).collect();
        let out = visit_box(&boxes, &p).unwrap();
        let (cs, os): (Vec<_>, Vec<_>) = codes.iter().map(|&i| row(&p, i)).unzip();
        let (c, o) = ref_pool(&cs, &os, &p.attn_query.to_vec());
        for k in 0..4 {
            assert!((out.center[k] - c[k]).abs() < 1e-12);
            assert!((out.offset()[k] - o[k]).abs() < 1e-12);
        }

        let visits: Vec<BoxEmbed> = (0..3).map(|t| visit_box(&boxes[t..t + 2], &p).unwrap()).collect();
        let out = patient_box(&visits, &p).unwrap();
        let vc: Vec<Vec<f64>> = visits.iter().map(|b| b.center.to_vec()).collect();
        let vo: Vec<Vec<f64>> = visits.iter().map(|b| b.offset().to_vec()).collect();
        let (c, o) = ref_pool(&vc, &vo, &p.visit_weight.to_vec());
        for k in 0..4 {
            assert!((out.center[k] - c[k]).abs() < 1e-12);
            assert!((out.offset()[k] - o[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn box_logits_match_composed_reference() {
    let p = BoxLmParams::init(vocab(3), 2, VolumeConfig::default(), 21);
    let inst = instance(&[&[0, 1], &[1, 2]]);
    let logits = boxlm_logits(&inst, &p).unwrap();
    let visit = |codes: &[usize]| {
        let (cs, os): (Vec<_>, Vec<_>) = codes.iter().map(|&i| row(&p, i)).unzip();
        ref_pool(&cs, &os, &p.attn_query.to_vec())
    };
    let (c1, o1) = visit(&[0, 1]);
    let (c2, o2) = visit(&[1, 2]);
    let (pc, po) = ref_pool(&[c1, c2], &[o1, o2], &p.visit_weight.to_vec());
    for c in 0..3 {
        let (cc, co) = row(&p, c);
        let expect = ref_volume(&pc, &po, &cc, &co, 0.1).max(1e-30).ln();
        let got = logits.get(&format!("C{c:02}")).unwrap();
        assert!((got - expect).abs() < 1e-10, "C{c}: {got} vs {expect}");
    }
}

// ---- sequence model -------------------------------------------------------

#[test]
fn retain_matches_reference() {
    for seed in 0..5 {
        let mut p = RetainParams::init(vocab(10), 4, seed);
        // non-zero biases so every term is exercised
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for b in [&mut p.b_beta, &mut p.rnn_alpha.b_z, &mut p.rnn_beta.b_h] {
            b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        p.b_o.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let visits = vec![vec![0, 3, 4], vec![1], vec![2, 7, 8, 9]];
        let got = p.forward(&visits).unwrap();
        let expect = ref_retain(&p, &visits);
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-10, "{g} vs {e}");
        }
    }
}

// ---- gradients ------------------------------------------------------------

fn random_batch(rng: &mut ChaCha8Rng, n_codes: usize, n: usize) -> Vec<Encoded> {
    (0..n)
        .map(|_| {
            let t = rng.random_range(1..=3);
            let visits = (0..t)
                .map(|_| {
                    let mut v: Vec<usize> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(0..n_codes)).collect();
                    v.sort();
                    v.dedup();
                    v
                })
                .collect();
            let mut targets: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(0..n_codes)).collect();
            targets.sort();
            targets.dedup();
            Encoded { visits, targets }
        })
        .collect()
}

#[test]
fn box_gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, d) = (rng.random_range(3..=20), rng.random_range(1..=8));
        let p = BoxLmParams::init(vocab(c), d, VolumeConfig { beta: 0.5, eps: 1e-30 }, seed);
        let batch = random_batch(&mut rng, c, 3);
        let r = check_gradients(&p, &batch, DEFAULT_STEP, None).unwrap();
        assert!(r.checked > r.skipped, "seed {seed}: {r:?}");
        assert!(r.max_rel_error < 1e-3, "seed {seed}: {r:?}");
    }
}

#[test]
fn box_gradients_at_default_beta() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = BoxLmParams::init(vocab(6), 3, VolumeConfig::default(), seed);
        let batch = random_batch(&mut rng, 6, 2);
        let r = check_gradients(&p, &batch, DEFAULT_STEP, None).unwrap();
        assert!(r.max_rel_error < 1e-3, "seed {seed}: {r:?}");
    }
}

#[test]
fn retain_gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, d) = (rng.random_range(3..=20), rng.random_range(1..=8));
        let p = RetainParams::init(vocab(c), d, seed);
        let batch = random_batch(&mut rng, c, 3);
        let r = check_gradients(&p, &batch, DEFAULT_STEP, None).unwrap();
        assert_eq!(r.skipped, 0);
        assert!(r.max_rel_error < 1e-3, "seed {seed}: {r:?}");
    }
}

#[test]
fn empty_batch_gradient_is_an_error() {
    let p = RetainParams::init(vocab(3), 2, 0);
    assert_eq!(dxrerank::backend::gradients(&p, &[]).unwrap_err(), BackendError::EmptyTrainingSet);
}

// ---- dispatch and training -----------------------------------------------

#[test]
fn dispatch_delegates_and_keys_agree() {
    let (ds, ont) = generate_synthetic(&SyntheticConfig { n_patients: 5, n_ccs: 9, seed: 3, ..Default::default() }).unwrap();
    let cfg = TrainConfig { d: 4, ..Default::default() };
    let boxp = init_params(BackendKind::Box, &ont, &cfg);
    let retp = init_params(BackendKind::Retain, &ont, &cfg);
    let p = &ds.patients[0];
    let inst = PredictionInstance::from_prefix(p, p.visits.len() - 1);
    let a = infer_logits(BackendKind::Box, &boxp, &inst).unwrap();
    let b = infer_logits(BackendKind::Retain, &retp, &inst).unwrap();
    let (ModelParams::Box(bp), ModelParams::Retain(rp)) = (&boxp, &retp) else { unreachable!() };
    assert_eq!(a, boxlm_logits(&inst, bp).unwrap());
    assert_eq!(b, retain_logits(&inst, rp).unwrap());
    assert!(a.scores.keys().eq(b.scores.keys()));
    assert_eq!(a.len(), ont.n_ccs());
    assert!(a.iter().chain(b.iter()).all(|(_, s)| s.is_finite()));
    assert_eq!(infer_logits(BackendKind::Box, &boxp, &inst).unwrap(), a);
    assert!(matches!(infer_logits(BackendKind::Retain, &boxp, &inst), Err(BackendError::KindMismatch { .. })));
}

#[test]
fn training_on_planted_rules_reduces_loss() {
    let n = 60;
    let rules = (0..3)
        .map(|i| PlantedRule { trigger: synthetic_ccs_id(i, n), onset: synthetic_ccs_id(i + 30, n), q: 0.8 })
        .collect();
    let synth = SyntheticConfig { n_patients: 500, n_ccs: n, rules, seed: 1, ..Default::default() };
    let (ds, ont) = generate_synthetic(&synth).unwrap();
    for kind in [BackendKind::Box, BackendKind::Retain] {
        let cfg = TrainConfig { epochs: 20, batch_size: 64, seed: 2, ..Default::default() };
        let (_, report) = train(kind, &ds, &ont, &cfg).unwrap();
        assert_eq!(report.epoch_losses.len(), 21);
        assert!(report.final_loss() < report.initial_loss(), "{kind}: {:?}", report.epoch_losses);
    }
    let vocab = Vocab::from_ontology(&ont);
    assert!(!training_examples(&ds, &vocab).unwrap().is_empty());
}
