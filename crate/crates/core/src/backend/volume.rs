//! Axis-aligned boxes and their Gumbel-softplus intersection volume.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::BackendError;

pub const EULER_GAMMA: f64 = 0.577_215_664_9;

/// Smoothing parameters of the intersection volume.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeConfig {
    /// Gumbel scale.
    pub beta: f64,
    /// Floor applied before taking the log of a volume.
    pub eps: f64,
}

impl VolumeConfig {
    pub const GAMMA: f64 = EULER_GAMMA;

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(BackendError::InvalidConfig(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.eps > 0.0) {
            return Err(BackendError::InvalidConfig(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    pub fn log_eps(&self) -> f64 {
        self.eps.ln()
    }
}

impl Default for VolumeConfig {
    fn default() -> Self {
        Self { beta: 0.1, eps: 1e-30 }
    }
}

/// A box given by its center and a raw offset; the half-width along each
/// dimension is `softplus(offset_raw)`, so it is always positive.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxEmbed {
    pub center: Array1<f64>,
    pub offset_raw: Array1<f64>,
}

impl BoxEmbed {
    pub fn new(center: Array1<f64>, offset_raw: Array1<f64>) -> Self {
        assert_eq!(center.len(), offset_raw.len(), "center/offset dimension mismatch");
        Self { center, offset_raw }
    }

    /// Box with the given center and effective (positive) half-widths.
    pub fn from_offsets(center: Array1<f64>, offset: &Array1<f64>) -> Self {
        let offset_raw = offset.mapv(softplus_inverse);
        Self::new(center, offset_raw)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn offset(&self) -> Array1<f64> {
        self.offset_raw.mapv(softplus)
    }

    pub fn min_corner(&self) -> Array1<f64> {
        &self.center - &self.offset()
    }

    pub fn max_corner(&self) -> Array1<f64> {
        &self.center + &self.offset()
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0, "softplus inverse of non-positive value");
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(softplus(x))`, finite for every finite `x`.
pub(crate) fn log_softplus(x: f64) -> f64 {
    if x < -30.0 {
        x - 0.5 * x.exp()
    } else {
        softplus(x).ln()
    }
}

/// Derivative of [`log_softplus`].
pub(crate) fn log_softplus_grad(x: f64) -> f64 {
    if x < -30.0 {
        1.0 - 0.5 * x.exp()
    } else {
        sigmoid(x) / softplus(x)
    }
}

/// Intersection of two boxes in corner form, one dimension at a time.
/// `upper_from_a[k]` / `lower_from_a[k]` record which box supplied each corner.
#[derive(Clone, Debug)]
pub(crate) struct Overlap {
    pub softplus_arg: Vec<f64>,
    pub upper_from_a: Vec<bool>,
    pub lower_from_a: Vec<bool>,
}

/// Per-dimension softplus argument `(m_max - m_min)/beta - 2*gamma` for boxes given
/// by centers and effective offsets.
pub(crate) fn overlap(
    center_a: &Array1<f64>,
    offset_a: &Array1<f64>,
    center_b: &Array1<f64>,
    offset_b: &Array1<f64>,
    beta: f64,
) -> Overlap {
    let d = center_a.len();
    let mut out = Overlap {
        softplus_arg: Vec::with_capacity(d),
        upper_from_a: Vec::with_capacity(d),
        lower_from_a: Vec::with_capacity(d),
    };
    for k in 0..d {
        let hi_a = center_a[k] + offset_a[k];
        let hi_b = center_b[k] + offset_b[k];
        let lo_a = center_a[k] - offset_a[k];
        let lo_b = center_b[k] - offset_b[k];
        let upper_from_a = hi_a <= hi_b;
        let lower_from_a = lo_a >= lo_b;
        let m_max = if upper_from_a { hi_a } else { hi_b };
        let m_min = if lower_from_a { lo_a } else { lo_b };
        out.softplus_arg.push((m_max - m_min) / beta - 2.0 * EULER_GAMMA);
        out.upper_from_a.push(upper_from_a);
        out.lower_from_a.push(lower_from_a);
    }
    out
}

/// Log of the smoothed intersection volume (no floor applied).
pub fn log_intersection_volume(a: &BoxEmbed, b: &BoxEmbed, cfg: &VolumeConfig) -> Result<f64, BackendError> {
    check_dims(a, b)?;
    let ov = overlap(&a.center, &a.offset(), &b.center, &b.offset(), cfg.beta);
    Ok(ov.softplus_arg.iter().map(|&x| cfg.beta.ln() + log_softplus(x)).sum())
}

/// `∏_k β·softplus((m_max_k − m_min_k)/β − 2γ)` where `m_max` is the lower of the two
/// upper corners and `m_min` the higher of the two lower corners.
pub fn intersection_volume(a: &BoxEmbed, b: &BoxEmbed, cfg: &VolumeConfig) -> Result<f64, BackendError> {
    check_dims(a, b)?;
    let ov = overlap(&a.center, &a.offset(), &b.center, &b.offset(), cfg.beta);
    Ok(ov.softplus_arg.iter().map(|&x| cfg.beta * softplus(x)).product())
}

/// Gradient of a box with respect to its center and raw offset.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxGrad {
    pub center: Array1<f64>,
    pub offset_raw: Array1<f64>,
}

/// Log intersection volume together with its gradient with respect to both boxes.
pub fn log_intersection_volume_grad(
    a: &BoxEmbed,
    b: &BoxEmbed,
    cfg: &VolumeConfig,
) -> Result<(f64, BoxGrad, BoxGrad), BackendError> {
    check_dims(a, b)?;
    let (off_a, off_b) = (a.offset(), b.offset());
    let ov = overlap(&a.center, &off_a, &b.center, &off_b, cfg.beta);
    let d = a.dim();
    let mut ga = BoxGrad { center: Array1::zeros(d), offset_raw: Array1::zeros(d) };
    let mut gb = ga.clone();
    let mut value = 0.0;
    for k in 0..d {
        let x = ov.softplus_arg[k];
        value += cfg.beta.ln() + log_softplus(x);
        let g = log_softplus_grad(x) / cfg.beta;
        // upper corner = center + offset
        if ov.upper_from_a[k] {
            ga.center[k] += g;
            ga.offset_raw[k] += g;
        } else {
            gb.center[k] += g;
            gb.offset_raw[k] += g;
        }
        // d m_min enters with a minus sign: lower corner = center - offset
        if ov.lower_from_a[k] {
            ga.center[k] -= g;
            ga.offset_raw[k] += g;
        } else {
            gb.center[k] -= g;
            gb.offset_raw[k] += g;
        }
    }
    // chain through offset = softplus(offset_raw)
    for k in 0..d {
        ga.offset_raw[k] *= sigmoid(a.offset_raw[k]);
        gb.offset_raw[k] *= sigmoid(b.offset_raw[k]);
    }
    Ok((value, ga, gb))
}

fn check_dims(a: &BoxEmbed, b: &BoxEmbed) -> Result<(), BackendError> {
    if a.dim() != b.dim() {
        return Err(BackendError::DimensionMismatch { expected: a.dim(), found: b.dim() });
    }
    Ok(())
}
