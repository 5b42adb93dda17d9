//! Small numeric kernels shared across modules.

use ndarray::Array1;

/// Tolerance used when checking that stored feature vectors are unit norm.
pub(crate) const UNIT_NORM_TOL: f64 = 1e-6;

/// Pairwise (cascade) summation. The reduction tree depends only on the
/// slice length, so results are reproducible across runs and thread counts.
pub(crate) fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 8;
    if values.len() <= BLOCK {
        let mut acc = 0.0;
        for &v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// L2-normalizes `v`, mapping the zero vector to `e_1`.
///
/// Returns the normalized vector and the pre-normalization norm (0 for the
/// degenerate case).
pub(crate) fn normalize_or_e1(v: Array1<f64>) -> (Array1<f64>, f64) {
    let norm = v.dot(&v).sqrt();
    if norm > 0.0 && norm.is_finite() {
        (v / norm, norm)
    } else {
        let mut e1 = Array1::zeros(v.len());
        if !e1.is_empty() {
            e1[0] = 1.0;
        }
        (e1, 0.0)
    }
}

/// `log(sum(exp(x)))` with max subtraction. Returns `-inf` for an empty input.
pub(crate) fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let shifted: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    max + pairwise_sum(&shifted).ln()
}

/// Index of the first maximum (lowest index wins ties).
pub(crate) fn argmax_first(values: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}
