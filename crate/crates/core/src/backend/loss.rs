//! Mean multi-label binary cross-entropy with a sigmoid link.

use super::volume::{sigmoid, softplus};

/// `mean_c [softplus(l_c) − y_c·l_c]`, which equals the usual BCE and never
/// overflows. Returns 0 for an empty vector.
pub fn bce_loss(logits: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(logits.len(), targets.len(), "logit/target length");
    if logits.is_empty() {
        return 0.0;
    }
    let total: f64 = logits.iter().zip(targets).map(|(&l, &y)| softplus(l) - y * l).sum();
    total / logits.len() as f64
}

/// Gradient of [`bce_loss`] with respect to each logit: `(σ(l) − y) / C`.
pub fn bce_loss_grad(logits: &[f64], targets: &[f64]) -> Vec<f64> {
    assert_eq!(logits.len(), targets.len(), "logit/target length");
    let n = logits.len() as f64;
    logits.iter().zip(targets).map(|(&l, &y)| (sigmoid(l) - y) / n).collect()
}
