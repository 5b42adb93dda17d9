//! Threshold detector and evaluation metrics.
//!
//! Scores are oriented so that higher means more in-distribution; the
//! detector accepts a sample as ID when `score >= mu`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{ScoredSample, Truth};

/// Default true-positive rate for FPR@TPR.
pub const DEFAULT_TPR: f64 = 0.95;

/// `1` (ID) when `score >= mu`, else `0` (OOD).
pub fn detect(score: f64, mu: f64) -> u8 {
    u8::from(score >= mu)
}

pub fn detect_all(scores: &[f64], mu: f64) -> Vec<u8> {
    scores.iter().map(|&s| detect(s, mu)).collect()
}

/// Detector decisions for a fixed threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub threshold_mu: f64,
    pub id_decisions: Vec<u8>,
    pub ood_decisions: Vec<u8>,
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
}

impl DetectionOutcome {
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>, mu: f64) -> Self {
        Self {
            threshold_mu: mu,
            id_decisions: detect_all(&id_scores, mu),
            ood_decisions: detect_all(&ood_scores, mu),
            id_scores,
            ood_scores,
        }
    }

    pub fn tpr(&self) -> f64 {
        mean_u8(&self.id_decisions)
    }

    pub fn fpr(&self) -> f64 {
        mean_u8(&self.ood_decisions)
    }
}

fn mean_u8(v: &[u8]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().map(|&d| d as usize).sum::<usize>() as f64 / v.len() as f64
}

fn check_scores(what: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Validation(format!("{what} scores are empty")));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Validation(format!(
            "{what} score {bad} is not finite"
        )));
    }
    Ok(())
}

/// Largest threshold that keeps at least `tpr` of the ID scores at or above it.
pub fn threshold_at_tpr(id_scores: &[f64], tpr: f64) -> Result<f64> {
    check_scores("ID", id_scores)?;
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::Parameter(format!(
            "tpr must be in (0, 1], got {tpr}"
        )));
    }
    let n = id_scores.len();
    let nf = n as f64;
    // Smallest count r with r / n >= tpr.
    let mut required = ((tpr * nf).ceil() as usize).clamp(1, n);
    while required > 1 && (required - 1) as f64 / nf >= tpr {
        required -= 1;
    }
    while required < n && (required as f64 / nf) < tpr {
        required += 1;
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[required - 1])
}

/// False-positive rate at the threshold chosen by [`threshold_at_tpr`].
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr: f64) -> Result<f64> {
    check_scores("OOD", ood_scores)?;
    let mu = threshold_at_tpr(id_scores, tpr)?;
    let accepted = ood_scores.iter().filter(|&&s| s >= mu).count();
    Ok(accepted as f64 / ood_scores.len() as f64)
}

/// Area under the ROC curve as the Mann-Whitney statistic with midranks.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores("ID", id_scores)?;
    check_scores("OOD", ood_scores)?;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Twice the rank sum of the ID scores, kept integral.
    let mut id_rank2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1..=j share the midrank (i + 1 + j) / 2.
        let rank2 = (i + 1 + j) as u128;
        let ids = all[i..j].iter().filter(|e| e.1).count() as u128;
        id_rank2 += rank2 * ids;
        i = j;
    }
    let n = id_scores.len() as u128;
    let m = ood_scores.len() as u128;
    let u2 = id_rank2 - n * (n + 1);
    Ok(u2 as f64 / (2 * n * m) as f64)
}

pub fn id_top1_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Validation("no predictions".into()));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub name: String,
    pub fpr95: f64,
    pub auroc: f64,
}

/// Per-dataset FPR95 / AUROC with unweighted averages, plus metrics over
/// all OOD samples pooled and ID top-1 accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fpr95: f64,
    pub auroc: f64,
    pub id_top1: f64,
    pub per_dataset: Vec<DatasetMetrics>,
    pub average_fpr95: f64,
    pub average_auroc: f64,
}

/// Scored samples of one named dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDataset {
    pub name: String,
    pub samples: Vec<ScoredSample>,
}

impl ScoredDataset {
    pub fn scores(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.score).collect()
    }
}

/// Builds the report. OOD datasets keep the order given (the benchmark's
/// column order).
pub fn build_report(id: &ScoredDataset, ood: &[ScoredDataset]) -> Result<MetricsReport> {
    if ood.is_empty() {
        return Err(Error::Validation(
            "at least one OOD dataset is required".into(),
        ));
    }
    if id.samples.is_empty() {
        return Err(Error::Validation(format!(
            "ID dataset `{}` has no scores",
            id.name
        )));
    }
    let mut predictions = Vec::with_capacity(id.samples.len());
    let mut labels = Vec::with_capacity(id.samples.len());
    for s in &id.samples {
        match s.truth {
            Truth::Id(label) => {
                predictions.push(s.predicted_class);
                labels.push(label);
            }
            Truth::Ood => {
                return Err(Error::Validation(format!(
                    "ID dataset `{}` contains an OOD-tagged sample",
                    id.name
                )))
            }
        }
    }
    let id_scores = id.scores();
    let mut per_dataset = Vec::with_capacity(ood.len());
    let mut pooled = Vec::new();
    for set in ood {
        if set.samples.iter().any(|s| s.truth != Truth::Ood) {
            return Err(Error::Validation(format!(
                "OOD dataset `{}` contains an ID-tagged sample",
                set.name
            )));
        }
        let scores = set.scores();
        per_dataset.push(DatasetMetrics {
            name: set.name.clone(),
            fpr95: fpr_at_tpr(&id_scores, &scores, DEFAULT_TPR)?,
            auroc: auroc(&id_scores, &scores)?,
        });
        pooled.extend(scores);
    }
    let count = per_dataset.len() as f64;
    Ok(MetricsReport {
        fpr95: fpr_at_tpr(&id_scores, &pooled, DEFAULT_TPR)?,
        auroc: auroc(&id_scores, &pooled)?,
        id_top1: id_top1_accuracy(&predictions, &labels)?,
        average_fpr95: per_dataset.iter().map(|d| d.fpr95).sum::<f64>() / count,
        average_auroc: per_dataset.iter().map(|d| d.auroc).sum::<f64>() / count,
        per_dataset,
    })
}

impl MetricsReport {
    /// `dataset,fpr95,auroc` rows in benchmark order, then an `Average` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,fpr95,auroc\n");
        for d in &self.per_dataset {
            writeln!(out, "{},{:.6},{:.6}", d.name, d.fpr95, d.auroc).expect("string write");
        }
        writeln!(
            out,
            "Average,{:.6},{:.6}",
            self.average_fpr95, self.average_auroc
        )
        .expect("string write");
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
