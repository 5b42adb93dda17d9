//! Training objectives.
//!
//! All losses are evaluated in log space. Forced logits are `s_f / tau`;
//! original logits are `s_o / tau + ln K`, and are dropped entirely when
//! `K = 0` so that FCE-K collapses to plain cross-entropy operation for
//! operation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, pairwise_sum};

/// Default training temperature.
pub const DEFAULT_TAU: f64 = 1.0;

/// Cosine slack accepted beyond `[-1, 1]` (rounding of unit-vector dot products).
const COSINE_SLACK: f64 = 1e-9;

/// Similarities of one image against the forced (`s^f`) and original
/// (`s^o`) text features, with the ground-truth class.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityPair {
    pub forced: Vec<f64>,
    pub original: Vec<f64>,
    pub label: usize,
}

impl SimilarityPair {
    pub fn new(forced: Vec<f64>, original: Vec<f64>, label: usize) -> Result<Self> {
        if forced.len() != original.len() {
            return Err(Error::Dimension {
                what: "original similarities",
                expected: forced.len(),
                actual: original.len(),
            });
        }
        if forced.is_empty() {
            return Err(Error::Validation("similarity vectors are empty".into()));
        }
        if label >= forced.len() {
            return Err(Error::Index {
                index: label,
                len: forced.len(),
            });
        }
        if let Some(bad) = forced
            .iter()
            .chain(original.iter())
            .find(|v| v.is_nan() || v.abs() > 1.0 + COSINE_SLACK)
        {
            return Err(Error::Validation(format!(
                "similarity {bad} is not a cosine in [-1, 1]"
            )));
        }
        Ok(Self {
            forced,
            original,
            label,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.forced.len()
    }
}

/// Which loss drives training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// Softmax cross-entropy over the forced prompt only (CoOp).
    CrossEntropy,
    /// Forced cross-entropy with coefficient `k`.
    FceK { k: f64 },
}

impl Objective {
    pub fn loss_and_grad(&self, pair: &SimilarityPair, tau: f64) -> Result<(f64, Vec<f64>)> {
        check_tau(tau)?;
        check_label(pair)?;
        Ok(match *self {
            Objective::CrossEntropy => softmax_terms(&pair.forced, None, pair.label, tau),
            Objective::FceK { k } => {
                check_k(k)?;
                softmax_terms(&pair.forced, reference(&pair.original, k), pair.label, tau)
            }
        })
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

fn check_k(k: f64) -> Result<()> {
    if k >= 0.0 && k.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "forced coefficient K must be non-negative, got {k}"
        )))
    }
}

fn check_label(pair: &SimilarityPair) -> Result<()> {
    if pair.label >= pair.forced.len() {
        return Err(Error::Index {
            index: pair.label,
            len: pair.forced.len(),
        });
    }
    if pair.original.len() != pair.forced.len() {
        return Err(Error::Dimension {
            what: "original similarities",
            expected: pair.forced.len(),
            actual: pair.original.len(),
        });
    }
    Ok(())
}

fn reference(original: &[f64], k: f64) -> Option<(&[f64], f64)> {
    (k > 0.0).then_some((original, k))
}

/// Loss `lse(all logits) - forced_logit[label]` and its gradient with respect
/// to the forced similarities.
fn softmax_terms(
    forced: &[f64],
    reference: Option<(&[f64], f64)>,
    label: usize,
    tau: f64,
) -> (f64, Vec<f64>) {
    let mut logits: Vec<f64> = forced.iter().map(|s| s / tau).collect();
    if let Some((original, k)) = reference {
        let log_k = k.ln();
        logits.extend(original.iter().map(|s| s / tau + log_k));
    }
    let lse = log_sum_exp(&logits);
    let loss = lse - logits[label];
    let grad = forced
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let p = (s / tau - lse).exp();
            let indicator = if j == label { 1.0 } else { 0.0 };
            (p - indicator) / tau
        })
        .collect();
    (loss, grad)
}

/// Softmax of `sims / tau` (classification probability).
pub fn class_probabilities(sims: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
    let lse = log_sum_exp(&logits);
    Ok(logits.iter().map(|l| (l - lse).exp()).collect())
}

/// Plain softmax cross-entropy over forced similarities.
pub fn cross_entropy_loss(pair: &SimilarityPair, tau: f64) -> Result<f64> {
    Ok(Objective::CrossEntropy.loss_and_grad(pair, tau)?.0)
}

/// Forced cross-entropy: FCE-K with `K = 1`.
pub fn fce_loss(pair: &SimilarityPair, tau: f64) -> Result<f64> {
    fce_k_loss(pair, tau, 1.0)
}

pub fn fce_k_loss(pair: &SimilarityPair, tau: f64, k: f64) -> Result<f64> {
    Ok(Objective::FceK { k }.loss_and_grad(pair, tau)?.0)
}

/// Mean FCE-K loss over a batch, reduced by pairwise summation.
pub fn batch_loss(pairs: &[SimilarityPair], tau: f64, k: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Validation("batch is empty".into()));
    }
    let losses = pairs
        .iter()
        .map(|p| fce_k_loss(p, tau, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairwise_sum(&losses) / pairs.len() as f64)
}
