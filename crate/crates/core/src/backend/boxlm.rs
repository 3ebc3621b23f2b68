//! Box-embedding scorer.
//!
//! Each CCS code is a box. A visit box has the attention-weighted mean of its
//! codes' centers and their elementwise maximum offset; the patient box pools
//! visit boxes the same way with a second query vector. A candidate's logit is
//! the floored log intersection volume of its box with the patient box.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::volume::{log_softplus, log_softplus_grad, overlap, sigmoid, softplus, softplus_inverse, BoxEmbed, VolumeConfig};
use super::{softmax, softmax_backward, BackendError, Encoded, LogitVector, Parameters, ScoringModel, Vocab};
use crate::ehr::PredictionInstance;

/// Initial effective half-width of every code box.
pub const INITIAL_OFFSET: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct BoxLmParams {
    pub vocab: Vocab,
    /// One row per code.
    pub centers: Array2<f64>,
    pub offsets_raw: Array2<f64>,
    /// Scores codes within a visit.
    pub attn_query: Array1<f64>,
    /// Scores visits within the patient history.
    pub visit_weight: Array1<f64>,
    pub volume: VolumeConfig,
}

impl BoxLmParams {
    /// Seeded initialization: centers ~ N(0, 0.1), half-widths near
    /// [`INITIAL_OFFSET`] with small jitter, query vectors ~ N(0, 0.1).
    pub fn init(vocab: Vocab, d: usize, volume: VolumeConfig, seed: u64) -> Self {
        assert!(d >= 1, "embedding dimension must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let c = vocab.len();
        let raw0 = softplus_inverse(INITIAL_OFFSET);
        let centers = Array2::from_shape_fn((c, d), |_| normal.sample(&mut rng));
        let offsets_raw = Array2::from_shape_fn((c, d), |_| raw0 + 0.1 * normal.sample(&mut rng));
        let attn_query = Array1::from_shape_fn(d, |_| normal.sample(&mut rng));
        let visit_weight = Array1::from_shape_fn(d, |_| normal.sample(&mut rng));
        Self { vocab, centers, offsets_raw, attn_query, visit_weight, volume }
    }

    pub fn dim(&self) -> usize {
        self.attn_query.len()
    }

    pub fn code_box(&self, index: usize) -> BoxEmbed {
        BoxEmbed::new(self.centers.row(index).to_owned(), self.offsets_raw.row(index).to_owned())
    }

    pub fn code_box_by_id(&self, code: &str) -> Result<BoxEmbed, BackendError> {
        let idx = self
            .vocab
            .index_of(code)
            .ok_or_else(|| BackendError::UnseenCode(code.into()))?;
        Ok(self.code_box(idx))
    }

    fn check_shapes(&self) -> Result<(), BackendError> {
        let (c, d) = (self.vocab.len(), self.dim());
        if self.centers.dim() != (c, d) || self.offsets_raw.dim() != (c, d) || self.visit_weight.len() != d {
            return Err(BackendError::Shape("box parameters".into()));
        }
        Ok(())
    }

    /// Patient box from encoded visits plus the intermediate values backward needs.
    fn encode_patient(&self, visits: &[Vec<usize>]) -> Result<PatientTrace, BackendError> {
        if visits.is_empty() {
            return Err(BackendError::NoVisits);
        }
        let d = self.dim();
        let mut trace = PatientTrace {
            code_weights: Vec::with_capacity(visits.len()),
            visit_centers: Vec::with_capacity(visits.len()),
            visit_offset_src: Vec::with_capacity(visits.len()),
            visit_weights: Vec::new(),
            center: Array1::zeros(d),
            offset_raw: Array1::from_elem(d, f64::NEG_INFINITY),
            offset_src_visit: vec![0; d],
        };
        let mut visit_raw = Vec::with_capacity(visits.len());
        for codes in visits {
            if codes.is_empty() {
                return Err(BackendError::EmptyInput);
            }
            let scores: Vec<f64> = codes.iter().map(|&i| self.centers.row(i).dot(&self.attn_query)).collect();
            let alpha = softmax(&scores);
            let mut center = Array1::zeros(d);
            for (&i, &a) in codes.iter().zip(&alpha) {
                center.scaled_add(a, &self.centers.row(i));
            }
            let mut raw = Array1::from_elem(d, f64::NEG_INFINITY);
            let mut src = vec![0usize; d];
            for &i in codes {
                for k in 0..d {
                    if self.offsets_raw[[i, k]] > raw[k] {
                        raw[k] = self.offsets_raw[[i, k]];
                        src[k] = i;
                    }
                }
            }
            trace.code_weights.push(alpha);
            trace.visit_centers.push(center);
            trace.visit_offset_src.push(src);
            visit_raw.push(raw);
        }
        let scores: Vec<f64> = trace.visit_centers.iter().map(|c| c.dot(&self.visit_weight)).collect();
        trace.visit_weights = softmax(&scores);
        for (t, (c, &w)) in trace.visit_centers.iter().zip(&trace.visit_weights).enumerate() {
            trace.center.scaled_add(w, c);
            for k in 0..d {
                if visit_raw[t][k] > trace.offset_raw[k] {
                    trace.offset_raw[k] = visit_raw[t][k];
                    trace.offset_src_visit[k] = t;
                }
            }
        }
        Ok(trace)
    }
}

struct PatientTrace {
    code_weights: Vec<Vec<f64>>,
    visit_centers: Vec<Array1<f64>>,
    /// For each visit and dimension, the code supplying the max offset.
    visit_offset_src: Vec<Vec<usize>>,
    visit_weights: Vec<f64>,
    center: Array1<f64>,
    offset_raw: Array1<f64>,
    offset_src_visit: Vec<usize>,
}

impl Parameters for BoxLmParams {
    fn n_params(&self) -> usize {
        self.centers.len() + self.offsets_raw.len() + self.attn_query.len() + self.visit_weight.len()
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend(self.centers.iter());
        out.extend(self.offsets_raw.iter());
        out.extend(self.attn_query.iter());
        out.extend(self.visit_weight.iter());
        out
    }

    fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "flat parameter length");
        let mut it = flat.iter().copied();
        for x in self
            .centers
            .iter_mut()
            .chain(self.offsets_raw.iter_mut())
            .chain(self.attn_query.iter_mut())
            .chain(self.visit_weight.iter_mut())
        {
            *x = it.next().unwrap();
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            vocab: self.vocab.clone(),
            centers: Array2::zeros(self.centers.dim()),
            offsets_raw: Array2::zeros(self.offsets_raw.dim()),
            attn_query: Array1::zeros(self.attn_query.len()),
            visit_weight: Array1::zeros(self.visit_weight.len()),
            volume: self.volume,
        }
    }
}

impl ScoringModel for BoxLmParams {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn forward(&self, visits: &[Vec<usize>]) -> Result<Vec<f64>, BackendError> {
        self.check_shapes()?;
        let trace = self.encode_patient(visits)?;
        let p_off = trace.offset_raw.mapv(softplus);
        let beta = self.volume.beta;
        let floor = self.volume.log_eps();
        let scores = (0..self.vocab.len())
            .map(|c| {
                let c_off = self.offsets_raw.row(c).mapv(softplus);
                let ov = overlap(&trace.center, &p_off, &self.centers.row(c).to_owned(), &c_off, beta);
                let lv: f64 = ov.softplus_arg.iter().map(|&x| beta.ln() + log_softplus(x)).sum();
                lv.max(floor)
            })
            .collect();
        Ok(scores)
    }

    fn backward(&self, visits: &[Vec<usize>], dlogits: &[f64], grad: &mut Self) -> Result<(), BackendError> {
        self.check_shapes()?;
        let trace = self.encode_patient(visits)?;
        let d = self.dim();
        let beta = self.volume.beta;
        let floor = self.volume.log_eps();
        let p_off = trace.offset_raw.mapv(softplus);

        let mut d_center = Array1::<f64>::zeros(d);
        let mut d_off = Array1::<f64>::zeros(d);
        for (c, &g_out) in dlogits.iter().enumerate() {
            if g_out == 0.0 {
                continue;
            }
            let c_off = self.offsets_raw.row(c).mapv(softplus);
            let ov = overlap(&trace.center, &p_off, &self.centers.row(c).to_owned(), &c_off, beta);
            let lv: f64 = ov.softplus_arg.iter().map(|&x| beta.ln() + log_softplus(x)).sum();
            if lv < floor {
                continue;
            }
            for k in 0..d {
                let g = g_out * log_softplus_grad(ov.softplus_arg[k]) / beta;
                let sig = sigmoid(self.offsets_raw[[c, k]]);
                if ov.upper_from_a[k] {
                    d_center[k] += g;
                    d_off[k] += g;
                } else {
                    grad.centers[[c, k]] += g;
                    grad.offsets_raw[[c, k]] += g * sig;
                }
                if ov.lower_from_a[k] {
                    d_center[k] -= g;
                    d_off[k] += g;
                } else {
                    grad.centers[[c, k]] -= g;
                    grad.offsets_raw[[c, k]] += g * sig;
                }
            }
        }

        // patient offset = softplus(max raw offset) routed back to the source code
        for k in 0..d {
            let src_code = trace.visit_offset_src[trace.offset_src_visit[k]][k];
            grad.offsets_raw[[src_code, k]] += d_off[k] * sigmoid(trace.offset_raw[k]);
        }

        // temporal pooling
        let d_vweights: Vec<f64> = trace.visit_centers.iter().map(|c| c.dot(&d_center)).collect();
        let d_vscores = softmax_backward(&trace.visit_weights, &d_vweights);
        let mut d_visits: Vec<Array1<f64>> = Vec::with_capacity(visits.len());
        for (t, center) in trace.visit_centers.iter().enumerate() {
            grad.visit_weight.scaled_add(d_vscores[t], center);
            let mut dv = &d_center * trace.visit_weights[t];
            dv.scaled_add(d_vscores[t], &self.visit_weight);
            d_visits.push(dv);
        }

        // code attention within each visit
        for (t, codes) in visits.iter().enumerate() {
            let alpha = &trace.code_weights[t];
            let dv = &d_visits[t];
            let d_alpha: Vec<f64> = codes.iter().map(|&i| self.centers.row(i).dot(dv)).collect();
            let d_scores = softmax_backward(alpha, &d_alpha);
            for (j, &i) in codes.iter().enumerate() {
                let mut row = grad.centers.row_mut(i);
                row.scaled_add(alpha[j], dv);
                row.scaled_add(d_scores[j], &self.attn_query);
                grad.attn_query.scaled_add(d_scores[j], &self.centers.row(i));
            }
        }
        Ok(())
    }

    fn branch_signature(&self, visits: &[Vec<usize>]) -> Vec<u32> {
        let Ok(trace) = self.encode_patient(visits) else {
            return Vec::new();
        };
        let mut sig: Vec<u32> = trace.visit_offset_src.iter().flatten().map(|&i| i as u32).collect();
        sig.extend(trace.offset_src_visit.iter().map(|&t| t as u32));
        let p_off = trace.offset_raw.mapv(softplus);
        let beta = self.volume.beta;
        for c in 0..self.vocab.len() {
            let c_off = self.offsets_raw.row(c).mapv(softplus);
            let ov = overlap(&trace.center, &p_off, &self.centers.row(c).to_owned(), &c_off, beta);
            let lv: f64 = ov.softplus_arg.iter().map(|&x| beta.ln() + log_softplus(x)).sum();
            sig.push(u32::from(lv < self.volume.log_eps()));
            sig.extend(ov.upper_from_a.iter().map(|&b| u32::from(b)));
            sig.extend(ov.lower_from_a.iter().map(|&b| u32::from(b)));
        }
        sig
    }
}

fn aggregate(boxes: &[BoxEmbed], query: &Array1<f64>) -> Result<BoxEmbed, BackendError> {
    let first = boxes.first().ok_or(BackendError::EmptyInput)?;
    let d = first.dim();
    for b in boxes {
        if b.dim() != d {
            return Err(BackendError::DimensionMismatch { expected: d, found: b.dim() });
        }
    }
    if query.len() != d {
        return Err(BackendError::DimensionMismatch { expected: d, found: query.len() });
    }
    let scores: Vec<f64> = boxes.iter().map(|b| b.center.dot(query)).collect();
    let weights = softmax(&scores);
    let mut center = Array1::zeros(d);
    let mut offset_raw = Array1::from_elem(d, f64::NEG_INFINITY);
    for (b, &w) in boxes.iter().zip(&weights) {
        center.scaled_add(w, &b.center);
        offset_raw.zip_mut_with(&b.offset_raw, |acc, &x| *acc = acc.max(x));
    }
    Ok(BoxEmbed::new(center, offset_raw))
}

/// Visit box: attention-weighted center (softmax over `⟨attn_query, center_i⟩`)
/// and elementwise maximum offset of the member codes.
pub fn visit_box(code_boxes: &[BoxEmbed], params: &BoxLmParams) -> Result<BoxEmbed, BackendError> {
    aggregate(code_boxes, &params.attn_query)
}

/// Patient box: temporal pooling of visit boxes weighted by softmax over
/// `⟨visit_weight, center_t⟩`, with elementwise maximum offset.
pub fn patient_box(visit_boxes: &[BoxEmbed], params: &BoxLmParams) -> Result<BoxEmbed, BackendError> {
    aggregate(visit_boxes, &params.visit_weight)
}

pub fn boxlm_logits(instance: &PredictionInstance, params: &BoxLmParams) -> Result<LogitVector, BackendError> {
    let encoded = Encoded::from_instance(&params.vocab, instance).or_else(|e| match e {
        // targets may contain codes outside the model; only inputs matter here
        BackendError::UnseenCode(_) => params
            .vocab
            .encode_visits(&instance.input_visits)
            .map(|visits| Encoded { visits, targets: Vec::new() }),
        other => Err(other),
    })?;
    let scores = params.forward(&encoded.visits)?;
    Ok(params.vocab.logits(scores))
}
