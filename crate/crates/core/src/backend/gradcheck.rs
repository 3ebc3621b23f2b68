//! Central finite-difference checks of the hand-written gradients.

use super::{batch_loss, batch_loss_and_grad, BackendError, Encoded, ScoringModel};

pub const DEFAULT_STEP: f64 = 1e-4;
/// Denominator floor for the relative error, so components whose true
/// gradient is ~0 are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst component.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Components skipped because a max/min selection or floor flipped inside
    /// the finite-difference stencil.
    pub skipped: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn signature<M: ScoringModel>(model: &M, batch: &[Encoded]) -> Vec<u32> {
    batch.iter().flat_map(|e| model.branch_signature(&e.visits)).collect()
}

/// Compares the analytic gradient of the mean batch loss with central
/// differences over every parameter (or the first `limit` ones, if given).
pub fn check_gradients<M: ScoringModel>(
    model: &M,
    batch: &[Encoded],
    step: f64,
    limit: Option<usize>,
) -> Result<GradCheckReport, BackendError> {
    if batch.is_empty() {
        return Err(BackendError::EmptyTrainingSet);
    }
    let (_, grad) = batch_loss_and_grad(model, batch)?;
    let analytic = grad.to_flat();
    let theta = model.to_flat();
    let base_sig = signature(model, batch);
    let mut probe = model.clone();
    let mut flat = theta.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: None, checked: 0, skipped: 0 };
    let n = limit.map_or(theta.len(), |l| l.min(theta.len()));
    for i in 0..n {
        flat[i] = theta[i] + step;
        probe.set_flat(&flat);
        let sig_plus = signature(&probe, batch);
        let plus = batch_loss(&probe, batch)?;
        flat[i] = theta[i] - step;
        probe.set_flat(&flat);
        let sig_minus = signature(&probe, batch);
        let minus = batch_loss(&probe, batch)?;
        flat[i] = theta[i];
        if sig_plus != base_sig || sig_minus != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    probe.set_flat(&theta);
    Ok(report)
}
