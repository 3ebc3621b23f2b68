//! Reverse-time attention sequence scorer.
//!
//! Visits are multi-hot vectors over the CCS vocabulary, embedded linearly.
//! Two GRUs read the embedded visits from most recent to oldest; one yields a
//! scalar attention score per visit, the other a per-dimension gate. The
//! context is the attention- and gate-weighted sum of visit embeddings and
//! the logits are an affine map of it.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::volume::sigmoid;
use super::{softmax, softmax_backward, BackendError, Encoded, LogitVector, Parameters, ScoringModel, Vocab};
use crate::ehr::PredictionInstance;

/// A GRU cell with input and hidden size `d`.
///
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `ĥ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ ĥ`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    pub w_z: Array2<f64>,
    pub u_z: Array2<f64>,
    pub b_z: Array1<f64>,
    pub w_r: Array2<f64>,
    pub u_r: Array2<f64>,
    pub b_r: Array1<f64>,
    pub w_h: Array2<f64>,
    pub u_h: Array2<f64>,
    pub b_h: Array1<f64>,
}

struct GruStep {
    h_prev: Array1<f64>,
    z: Array1<f64>,
    r: Array1<f64>,
    h_cand: Array1<f64>,
    h: Array1<f64>,
}

impl GruCell {
    fn init(d: usize, rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> Self {
        let mut m = || Array2::from_shape_fn((d, d), |_| normal.sample(rng));
        let (w_z, u_z, w_r, u_r, w_h, u_h) = (m(), m(), m(), m(), m(), m());
        Self {
            w_z,
            u_z,
            b_z: Array1::zeros(d),
            w_r,
            u_r,
            b_r: Array1::zeros(d),
            w_h,
            u_h,
            b_h: Array1::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.b_z.len()
    }

    fn zeros(d: usize) -> Self {
        let m = || Array2::zeros((d, d));
        let v = || Array1::zeros(d);
        Self { w_z: m(), u_z: m(), b_z: v(), w_r: m(), u_r: m(), b_r: v(), w_h: m(), u_h: m(), b_h: v() }
    }

    fn matrices(&self) -> [&Array2<f64>; 6] {
        [&self.w_z, &self.u_z, &self.w_r, &self.u_r, &self.w_h, &self.u_h]
    }

    fn vectors(&self) -> [&Array1<f64>; 3] {
        [&self.b_z, &self.b_r, &self.b_h]
    }

    fn shapes_ok(&self, d: usize) -> bool {
        self.matrices().iter().all(|m| m.dim() == (d, d)) && self.vectors().iter().all(|v| v.len() == d)
    }

    fn flat_iter(&self) -> impl Iterator<Item = &f64> {
        self.w_z
            .iter()
            .chain(self.u_z.iter())
            .chain(self.b_z.iter())
            .chain(self.w_r.iter())
            .chain(self.u_r.iter())
            .chain(self.b_r.iter())
            .chain(self.w_h.iter())
            .chain(self.u_h.iter())
            .chain(self.b_h.iter())
    }

    fn flat_iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w_z
            .iter_mut()
            .chain(self.u_z.iter_mut())
            .chain(self.b_z.iter_mut())
            .chain(self.w_r.iter_mut())
            .chain(self.u_r.iter_mut())
            .chain(self.b_r.iter_mut())
            .chain(self.w_h.iter_mut())
            .chain(self.u_h.iter_mut())
            .chain(self.b_h.iter_mut())
    }

    fn n_params(&self) -> usize {
        let d = self.dim();
        6 * d * d + 3 * d
    }

    /// Single step from `h` on input `x`.
    pub fn step(&self, x: &Array1<f64>, h: &Array1<f64>) -> Array1<f64> {
        self.step_traced(x, h).h
    }

    fn step_traced(&self, x: &Array1<f64>, h: &Array1<f64>) -> GruStep {
        let z = (self.w_z.dot(x) + self.u_z.dot(h) + &self.b_z).mapv(sigmoid);
        let r = (self.w_r.dot(x) + self.u_r.dot(h) + &self.b_r).mapv(sigmoid);
        let h_cand = (self.w_h.dot(x) + self.u_h.dot(&(&r * h)) + &self.b_h).mapv(f64::tanh);
        let h_new = (1.0 - &z) * h + &z * &h_cand;
        GruStep { h_prev: h.clone(), z, r, h_cand, h: h_new }
    }

    fn run(&self, inputs: &[&Array1<f64>]) -> Vec<GruStep> {
        let mut h = Array1::zeros(self.dim());
        let mut steps = Vec::with_capacity(inputs.len());
        for x in inputs {
            let s = self.step_traced(x, &h);
            h = s.h.clone();
            steps.push(s);
        }
        steps
    }

    /// Backpropagation through time. `dh_ext[s]` is the loss gradient reaching
    /// the state after step `s`; returns the gradient for each input.
    fn backward(&self, inputs: &[&Array1<f64>], steps: &[GruStep], dh_ext: &[Array1<f64>], grad: &mut GruCell) -> Vec<Array1<f64>> {
        let d = self.dim();
        let mut dxs = vec![Array1::zeros(d); inputs.len()];
        let mut carry = Array1::<f64>::zeros(d);
        for s in (0..steps.len()).rev() {
            let st = &steps[s];
            let x = inputs[s];
            let dh = &dh_ext[s] + &carry;
            let dz = &dh * &(&st.h_cand - &st.h_prev);
            let dh_cand = &dh * &st.z;
            let mut dh_prev = &dh * &(1.0 - &st.z);

            let da_h = &dh_cand * &(1.0 - &st.h_cand * &st.h_cand);
            let rh = &st.r * &st.h_prev;
            outer_add(&mut grad.w_h, &da_h, x);
            outer_add(&mut grad.u_h, &da_h, &rh);
            grad.b_h += &da_h;
            let mut dx = self.w_h.t().dot(&da_h);
            let d_rh = self.u_h.t().dot(&da_h);
            let dr = &d_rh * &st.h_prev;
            dh_prev += &(&d_rh * &st.r);

            let da_z = &dz * &(&st.z * &(1.0 - &st.z));
            outer_add(&mut grad.w_z, &da_z, x);
            outer_add(&mut grad.u_z, &da_z, &st.h_prev);
            grad.b_z += &da_z;
            dx += &self.w_z.t().dot(&da_z);
            dh_prev += &self.u_z.t().dot(&da_z);

            let da_r = &dr * &(&st.r * &(1.0 - &st.r));
            outer_add(&mut grad.w_r, &da_r, x);
            outer_add(&mut grad.u_r, &da_r, &st.h_prev);
            grad.b_r += &da_r;
            dx += &self.w_r.t().dot(&da_r);
            dh_prev += &self.u_r.t().dot(&da_r);

            dxs[s] = dx;
            carry = dh_prev;
        }
        dxs
    }
}

fn outer_add(m: &mut Array2<f64>, a: &Array1<f64>, b: &Array1<f64>) {
    for (i, &ai) in a.iter().enumerate() {
        if ai != 0.0 {
            m.row_mut(i).scaled_add(ai, b);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetainParams {
    pub vocab: Vocab,
    /// `d × C`; column `i` is the embedding of code `i`.
    pub embed: Array2<f64>,
    /// Recurrence feeding the visit-level attention.
    pub rnn_alpha: GruCell,
    /// Recurrence feeding the dimension-level gate.
    pub rnn_beta: GruCell,
    pub w_alpha: Array1<f64>,
    pub w_beta: Array2<f64>,
    pub b_beta: Array1<f64>,
    /// `C × d`.
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
}

/// Intermediate values of one forward pass, indexed by visit in time order.
pub struct RetainTrace {
    pub embedded: Vec<Array1<f64>>,
    pub alpha: Vec<f64>,
    pub beta: Vec<Array1<f64>>,
    pub context: Array1<f64>,
    steps_alpha: Vec<GruStep>,
    steps_beta: Vec<GruStep>,
}

impl RetainParams {
    /// Seeded initialization: weights ~ N(0, 0.1), biases zero.
    pub fn init(vocab: Vocab, d: usize, seed: u64) -> Self {
        assert!(d >= 1, "embedding dimension must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let c = vocab.len();
        let embed = Array2::from_shape_fn((d, c), |_| normal.sample(&mut rng));
        let rnn_alpha = GruCell::init(d, &mut rng, &normal);
        let rnn_beta = GruCell::init(d, &mut rng, &normal);
        let w_alpha = Array1::from_shape_fn(d, |_| normal.sample(&mut rng));
        let w_beta = Array2::from_shape_fn((d, d), |_| normal.sample(&mut rng));
        let w_o = Array2::from_shape_fn((c, d), |_| normal.sample(&mut rng));
        Self {
            vocab,
            embed,
            rnn_alpha,
            rnn_beta,
            w_alpha,
            w_beta,
            b_beta: Array1::zeros(d),
            w_o,
            b_o: Array1::zeros(c),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_alpha.len()
    }

    fn check_shapes(&self) -> Result<(), BackendError> {
        let (c, d) = (self.vocab.len(), self.dim());
        let ok = self.embed.dim() == (d, c)
            && self.rnn_alpha.shapes_ok(d)
            && self.rnn_beta.shapes_ok(d)
            && self.w_beta.dim() == (d, d)
            && self.b_beta.len() == d
            && self.w_o.dim() == (c, d)
            && self.b_o.len() == c;
        if ok {
            Ok(())
        } else {
            Err(BackendError::Shape("retain parameters".into()))
        }
    }

    /// Runs the forward pass and keeps every intermediate.
    pub fn trace(&self, visits: &[Vec<usize>]) -> Result<RetainTrace, BackendError> {
        self.check_shapes()?;
        if visits.is_empty() {
            return Err(BackendError::NoVisits);
        }
        let d = self.dim();
        let c = self.vocab.len();
        let embedded: Vec<Array1<f64>> = visits
            .iter()
            .map(|codes| {
                let mut v = Array1::zeros(d);
                for &i in codes {
                    if i >= c {
                        return Err(BackendError::Shape(format!("code index {i} outside vocabulary of {c}")));
                    }
                    v += &self.embed.column(i);
                }
                Ok(v)
            })
            .collect::<Result<_, _>>()?;

        // most recent visit first
        let reversed: Vec<&Array1<f64>> = embedded.iter().rev().collect();
        let mut steps_alpha = self.rnn_alpha.run(&reversed);
        let mut steps_beta = self.rnn_beta.run(&reversed);
        steps_alpha.reverse();
        steps_beta.reverse();

        let scores: Vec<f64> = steps_alpha.iter().map(|s| self.w_alpha.dot(&s.h)).collect();
        let alpha = softmax(&scores);
        let beta: Vec<Array1<f64>> = steps_beta
            .iter()
            .map(|s| (self.w_beta.dot(&s.h) + &self.b_beta).mapv(f64::tanh))
            .collect();
        let mut context = Array1::zeros(d);
        for t in 0..embedded.len() {
            context.scaled_add(alpha[t], &(&beta[t] * &embedded[t]));
        }
        Ok(RetainTrace { embedded, alpha, beta, context, steps_alpha, steps_beta })
    }

    fn zeros_shaped(&self) -> Self {
        let (c, d) = (self.vocab.len(), self.dim());
        Self {
            vocab: self.vocab.clone(),
            embed: Array2::zeros((d, c)),
            rnn_alpha: GruCell::zeros(d),
            rnn_beta: GruCell::zeros(d),
            w_alpha: Array1::zeros(d),
            w_beta: Array2::zeros((d, d)),
            b_beta: Array1::zeros(d),
            w_o: Array2::zeros((c, d)),
            b_o: Array1::zeros(c),
        }
    }
}

impl Parameters for RetainParams {
    fn n_params(&self) -> usize {
        self.embed.len()
            + self.rnn_alpha.n_params()
            + self.rnn_beta.n_params()
            + self.w_alpha.len()
            + self.w_beta.len()
            + self.b_beta.len()
            + self.w_o.len()
            + self.b_o.len()
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        out.extend(self.embed.iter());
        out.extend(self.rnn_alpha.flat_iter());
        out.extend(self.rnn_beta.flat_iter());
        out.extend(self.w_alpha.iter());
        out.extend(self.w_beta.iter());
        out.extend(self.b_beta.iter());
        out.extend(self.w_o.iter());
        out.extend(self.b_o.iter());
        out
    }

    fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "flat parameter length");
        let mut it = flat.iter().copied();
        for x in self
            .embed
            .iter_mut()
            .chain(self.rnn_alpha.flat_iter_mut())
            .chain(self.rnn_beta.flat_iter_mut())
            .chain(self.w_alpha.iter_mut())
            .chain(self.w_beta.iter_mut())
            .chain(self.b_beta.iter_mut())
            .chain(self.w_o.iter_mut())
            .chain(self.b_o.iter_mut())
        {
            *x = it.next().unwrap();
        }
    }

    fn zeros_like(&self) -> Self {
        self.zeros_shaped()
    }
}

impl ScoringModel for RetainParams {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn forward(&self, visits: &[Vec<usize>]) -> Result<Vec<f64>, BackendError> {
        let tr = self.trace(visits)?;
        Ok((self.w_o.dot(&tr.context) + &self.b_o).to_vec())
    }

    fn backward(&self, visits: &[Vec<usize>], dlogits: &[f64], grad: &mut Self) -> Result<(), BackendError> {
        let tr = self.trace(visits)?;
        let n_visits = visits.len();
        let dl = Array1::from(dlogits.to_vec());
        grad.b_o += &dl;
        outer_add(&mut grad.w_o, &dl, &tr.context);
        let dc = self.w_o.t().dot(&dl);

        let mut dv: Vec<Array1<f64>> = Vec::with_capacity(n_visits);
        let mut d_alpha = Vec::with_capacity(n_visits);
        let mut dg_beta: Vec<Array1<f64>> = Vec::with_capacity(n_visits);
        for t in 0..n_visits {
            let gated = &tr.beta[t] * &tr.embedded[t];
            d_alpha.push(dc.dot(&gated));
            dv.push(&dc * &tr.beta[t] * tr.alpha[t]);
            let d_beta = &dc * &tr.embedded[t] * tr.alpha[t];
            let d_pre = &d_beta * &(1.0 - &tr.beta[t] * &tr.beta[t]);
            outer_add(&mut grad.w_beta, &d_pre, &tr.steps_beta[t].h);
            grad.b_beta += &d_pre;
            dg_beta.push(self.w_beta.t().dot(&d_pre));
        }
        let d_scores = softmax_backward(&tr.alpha, &d_alpha);
        let dg_alpha: Vec<Array1<f64>> = d_scores.iter().map(|&s| &self.w_alpha * s).collect();
        for t in 0..n_visits {
            grad.w_alpha.scaled_add(d_scores[t], &tr.steps_alpha[t].h);
        }

        // the recurrences ran in reverse time; flip everything back into step order
        let inputs: Vec<&Array1<f64>> = tr.embedded.iter().rev().collect();
        let steps_a: Vec<GruStep> = tr.steps_alpha.into_iter().rev().collect();
        let steps_b: Vec<GruStep> = tr.steps_beta.into_iter().rev().collect();
        let ext_a: Vec<Array1<f64>> = dg_alpha.into_iter().rev().collect();
        let ext_b: Vec<Array1<f64>> = dg_beta.into_iter().rev().collect();
        let dx_a = self.rnn_alpha.backward(&inputs, &steps_a, &ext_a, &mut grad.rnn_alpha);
        let dx_b = self.rnn_beta.backward(&inputs, &steps_b, &ext_b, &mut grad.rnn_beta);
        for s in 0..n_visits {
            let t = n_visits - 1 - s;
            dv[t] += &dx_a[s];
            dv[t] += &dx_b[s];
        }

        for (t, codes) in visits.iter().enumerate() {
            for &i in codes {
                grad.embed.column_mut(i).scaled_add(1.0, &dv[t]);
            }
        }
        Ok(())
    }
}

pub fn retain_logits(instance: &PredictionInstance, params: &RetainParams) -> Result<LogitVector, BackendError> {
    let visits = match Encoded::from_instance(&params.vocab, instance) {
        Ok(enc) => enc.visits,
        Err(BackendError::UnseenCode(_)) if !instance.input_visits.is_empty() => {
            params.vocab.encode_visits(&instance.input_visits)?
        }
        Err(e) => return Err(e),
    };
    let scores = params.forward(&visits)?;
    Ok(params.vocab.logits(scores))
}
