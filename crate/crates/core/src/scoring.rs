//! Inference-time OOD scores over the dual prompt bank.
//!
//! Every candidate (forced class `c` with weight 1, original class `c` with
//! weight `K`) competes in one softmax whose denominator is
//! `sum_j e^{s^f_j/tau0} + K sum_j e^{s^o_j/tau0}`. MCM is the largest
//! candidate mass for the global feature, L-MCM the largest over all local
//! features, and GL-MCM their sum. Higher scores mean "more in-distribution".

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::{ImageFeatures, TextFeatureSet};
use crate::error::{Error, Result};
use crate::numeric::{argmax_first, log_sum_exp};

/// Default inference temperature.
pub const DEFAULT_TAU0: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Mcm,
    GlMcm,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 2] = [ScoreKind::Mcm, ScoreKind::GlMcm];
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreKind::Mcm => "mcm",
            ScoreKind::GlMcm => "glmcm",
        })
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcm" => Ok(ScoreKind::Mcm),
            "glmcm" | "gl-mcm" | "gl_mcm" => Ok(ScoreKind::GlMcm),
            other => Err(Error::Config(format!(
                "unknown score `{other}` (expected mcm or glmcm)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub tau0: f64,
    pub k: f64,
    pub kind: ScoreKind,
    /// Weight an original-family winner by `K` in the numerator.
    pub numerator_k_weighting: bool,
    /// Restrict the max to forced candidates (the denominator is unchanged).
    pub forced_only_max: bool,
}

impl ScoreConfig {
    pub fn new(k: f64, kind: ScoreKind) -> Self {
        Self {
            tau0: DEFAULT_TAU0,
            k,
            kind,
            numerator_k_weighting: true,
            forced_only_max: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 > 0.0 && self.tau0.is_finite()) {
            return Err(Error::Parameter(format!(
                "tau0 must be positive, got {}",
                self.tau0
            )));
        }
        if !(self.k >= 0.0 && self.k.is_finite()) {
            return Err(Error::Parameter(format!(
                "K must be non-negative, got {}",
                self.k
            )));
        }
        Ok(())
    }
}

/// Ground truth attached to a scored sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Id(usize),
    Ood,
}

impl Truth {
    /// Manifest encoding: class index, or `-1` for OOD.
    pub fn from_label(label: i64) -> Result<Self> {
        match label {
            -1 => Ok(Truth::Ood),
            l if l >= 0 => Ok(Truth::Id(l as usize)),
            l => Err(Error::Validation(format!(
                "label {l} is neither a class nor -1"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub predicted_class: usize,
    pub truth: Truth,
}

/// MCM from precomputed cosines `cos(z, t^f_j)` and `cos(z, t^o_j)`.
pub fn mcm_from_cosines(forced: &[f64], original: &[f64], cfg: &ScoreConfig) -> f64 {
    let forced_logits: Vec<f64> = forced.iter().map(|c| c / cfg.tau0).collect();
    let mut denominator = forced_logits.clone();
    let mut best = forced_logits
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if cfg.k > 0.0 {
        let log_k = cfg.k.ln();
        for &c in original {
            let raw = c / cfg.tau0;
            let weighted = raw + log_k;
            denominator.push(weighted);
            if !cfg.forced_only_max {
                let numerator = if cfg.numerator_k_weighting {
                    weighted
                } else {
                    raw
                };
                best = best.max(numerator);
            }
        }
    }
    (best - log_sum_exp(&denominator)).exp()
}

fn check_family(tf: &TextFeatureSet, to: &TextFeatureSet) -> Result<()> {
    if tf.num_classes() != to.num_classes() {
        return Err(Error::Dimension {
            what: "original text features",
            expected: tf.num_classes(),
            actual: to.num_classes(),
        });
    }
    if tf.dim() != to.dim() {
        return Err(Error::Dimension {
            what: "original text feature width",
            expected: tf.dim(),
            actual: to.dim(),
        });
    }
    if tf.num_classes() == 0 {
        return Err(Error::Validation("no classes in text feature set".into()));
    }
    Ok(())
}

pub fn mcm_score(
    z_g: ArrayView1<'_, f64>,
    tf: &TextFeatureSet,
    to: &TextFeatureSet,
    cfg: &ScoreConfig,
) -> Result<f64> {
    cfg.validate()?;
    check_family(tf, to)?;
    let cf = tf.cosines(z_g)?;
    let co = to.cosines(z_g)?;
    Ok(mcm_from_cosines(
        cf.as_slice().expect("contiguous"),
        co.as_slice().expect("contiguous"),
        cfg,
    ))
}

pub fn lmcm_score(
    locals: ArrayView2<'_, f64>,
    tf: &TextFeatureSet,
    to: &TextFeatureSet,
    cfg: &ScoreConfig,
) -> Result<f64> {
    if locals.nrows() == 0 {
        return Err(Error::Config(
            "L-MCM needs local features but the backend provides none (N = 0); use MCM scoring"
                .into(),
        ));
    }
    let mut best = f64::NEG_INFINITY;
    for local in locals.axis_iter(Axis(0)) {
        best = best.max(mcm_score(local, tf, to, cfg)?);
    }
    Ok(best)
}

pub fn glmcm_score(
    img: &ImageFeatures,
    tf: &TextFeatureSet,
    to: &TextFeatureSet,
    cfg: &ScoreConfig,
) -> Result<f64> {
    let local = lmcm_score(img.locals.view(), tf, to, cfg)?;
    Ok(mcm_score(img.global.view(), tf, to, cfg)? + local)
}

/// ID classification with the forced prompt only; ties go to the lowest index.
pub fn predict_class(z_g: ArrayView1<'_, f64>, tf: &TextFeatureSet) -> Result<usize> {
    let cos = tf.cosines(z_g)?;
    argmax_first(cos.iter().copied())
        .ok_or_else(|| Error::Validation("no classes in text feature set".into()))
}

/// Scores one image according to `cfg.kind`.
pub fn score_image(
    img: &ImageFeatures,
    tf: &TextFeatureSet,
    to: &TextFeatureSet,
    cfg: &ScoreConfig,
    truth: Truth,
) -> Result<ScoredSample> {
    let score = match cfg.kind {
        ScoreKind::Mcm => mcm_score(img.global.view(), tf, to, cfg)?,
        ScoreKind::GlMcm => glmcm_score(img, tf, to, cfg)?,
    };
    Ok(ScoredSample {
        score,
        predicted_class: predict_class(img.global.view(), tf)?,
        truth,
    })
}
