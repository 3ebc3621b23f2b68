use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::Dataset;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SplitError {
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios((f64, f64, f64)),
    #[error("cannot split {0} patients three ways")]
    TooFewPatients(usize),
}

/// Ratios of the default train/validation/test split.
pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.7, 0.1, 0.2);

/// Patient-level partition into (train, validation, test).
///
/// Sizes use largest-remainder rounding so each part is within one patient
/// of `ratio * N`. Patients keep their original relative order inside each part.
pub fn split_patients(
    dataset: &Dataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), SplitError> {
    let parts = [ratios.0, ratios.1, ratios.2];
    if parts.iter().any(|r| !r.is_finite() || *r < 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SplitError::InvalidRatios(ratios));
    }
    let n = dataset.len();
    if n < 3 && parts.iter().all(|r| *r > 0.0) {
        return Err(SplitError::TooFewPatients(n));
    }

    let sizes = apportion(n, &parts);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut out = Vec::with_capacity(3);
    let mut start = 0;
    for size in sizes {
        let mut idx = order[start..start + size].to_vec();
        idx.sort_unstable();
        start += size;
        let patients = idx.into_iter().map(|i| dataset.patients[i].clone()).collect();
        out.push(Dataset::new(patients, dataset.ontology_ref.clone()));
    }
    let test = out.pop().unwrap();
    let val = out.pop().unwrap();
    let train = out.pop().unwrap();
    Ok((train, val, test))
}

fn apportion(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = (e + 1e-9).floor() as usize;
    }
    let mut remaining = n - sizes.iter().sum::<usize>().min(n);
    let mut by_remainder: Vec<usize> = (0..3).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = exact[a] - sizes[a] as f64;
        let rb = exact[b] - sizes[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in by_remainder {
        if remaining == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            sizes[i] += 1;
            remaining -= 1;
        }
    }
    sizes
}
