//! Few-shot sampling and the forced-prompt optimization loop.
//!
//! Only the forced context is optimized (SGD with momentum and weight decay,
//! cosine learning-rate schedule, one step per mini-batch). Original-prompt
//! similarities are computed once up front because that prompt is frozen.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use ndarray::{s, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::manifest::{DatasetManifest, SPLIT_TRAIN};
use crate::encoder::{DifferentiableTextEncoder, ImageFeatures};
use crate::error::{Error, Result};
use crate::numeric::pairwise_sum;
use crate::objective::{self, Objective, SimilarityPair};
use crate::prompt::DualPromptBank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
}

/// Which loss trains the forced prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// FCE-K with the configured `k`.
    FceK,
    /// Plain cross-entropy over the forced prompt.
    CrossEntropy,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::FceK => "fce_k",
            LossKind::CrossEntropy => "ce",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub shots: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub k: f64,
    pub tau: f64,
    pub seed: u64,
    pub schedule: Schedule,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            shots: 16,
            epochs: default_epochs(16, true),
            lr: 2e-3,
            batch_size: 160,
            momentum: 0.9,
            weight_decay: 5e-4,
            k: 3.0,
            tau: objective::DEFAULT_TAU,
            seed: 0,
            schedule: Schedule::Cosine,
            loss: LossKind::FceK,
        }
    }
}

/// Epoch budget: 30 (1-shot) / 50 (more shots) for large-vocabulary ID sets
/// such as ImageNet-1k, 200 otherwise.
pub fn default_epochs(shots: usize, large_id_set: bool) -> usize {
    match (large_id_set, shots) {
        (true, 1) => 30,
        (true, _) => 50,
        (false, _) => 200,
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.shots == 0 {
            return bad("shots must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(self.k >= 0.0 && self.k.is_finite()) {
            return bad(format!("K must be non-negative, got {}", self.k));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        match self.loss {
            LossKind::FceK => Objective::FceK { k: self.k },
            LossKind::CrossEntropy => Objective::CrossEntropy,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    /// Mean over training samples of `s^f_y - s^o_y` (similarity to the
    /// ground-truth class under the forced vs the original prompt).
    pub similarity_gap: f64,
}

impl TrainLog {
    /// `epoch,mean_loss,lr` rows. Wall time is left out so the file is
    /// reproducible.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,lr\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{}\n", e.epoch, e.mean_loss, e.lr));
        }
        out
    }
}

/// Cosine annealing from `base_lr` towards 0 over `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Parameter(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// One few-shot training example: a manifest entry and its class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSample {
    pub entry: usize,
    pub label: usize,
}

/// Draws exactly `shots` training entries per class without replacement.
///
/// Candidates are the manifest's `train` split. Output is grouped by class
/// and kept in manifest order within a class.
pub fn sample_few_shot(
    manifest: &DatasetManifest,
    shots: usize,
    seed: u64,
) -> Result<Vec<FewShotSample>> {
    if shots == 0 {
        return Err(Error::Config("shots must be positive".into()));
    }
    if manifest.is_ood() {
        return Err(Error::Data(format!(
            "{}: cannot sample training shots from an OOD manifest",
            manifest.name
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = (0..manifest.num_classes())
        .map(|c| (c, Vec::new()))
        .collect();
    for i in manifest.split_indices(SPLIT_TRAIN) {
        by_class
            .get_mut(&(manifest.entries[i].label as usize))
            .expect("labels validated")
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(shots * manifest.num_classes());
    for (class, entries) in by_class {
        if entries.len() < shots {
            return Err(Error::Data(format!(
                "{}: class `{}` has {} training examples, {shots} shots requested",
                manifest.name,
                manifest.class_names[class],
                entries.len()
            )));
        }
        let mut picked = rand::seq::index::sample(&mut rng, entries.len(), shots).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|p| FewShotSample {
            entry: entries[p],
            label: class,
        }));
    }
    Ok(out)
}

/// The training objective as a function of the forced context.
///
/// `context` is an f64 copy of the forced context (`groups x L x token_dim`).
pub struct PromptObjective<'a, E: ?Sized> {
    encoder: &'a E,
    bank: &'a DualPromptBank,
    images: Array2<f64>,
    labels: Vec<usize>,
    original_sims: Array2<f64>,
    objective: Objective,
    tau: f64,
}

impl<'a, E: DifferentiableTextEncoder + ?Sized> PromptObjective<'a, E> {
    pub fn new(
        encoder: &'a E,
        bank: &'a DualPromptBank,
        data: &[(ImageFeatures, usize)],
        objective: Objective,
        tau: f64,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("no training samples".into()));
        }
        bank.check_compatible(encoder.spec())?;
        let d = encoder.spec().embed_dim;
        let c = bank.num_classes();
        let mut images = Array2::zeros((data.len(), d));
        let mut labels = Vec::with_capacity(data.len());
        for (i, (img, label)) in data.iter().enumerate() {
            if img.dim() != d {
                return Err(Error::Dimension {
                    what: "training image feature",
                    expected: d,
                    actual: img.dim(),
                });
            }
            if *label >= c {
                return Err(Error::Index {
                    index: *label,
                    len: c,
                });
            }
            images.row_mut(i).assign(&img.global);
            labels.push(*label);
        }
        let original = encoder.encode_text(&bank.original)?;
        let original_sims = images.dot(&original.as_array().t());
        Ok(Self {
            encoder,
            bank,
            images,
            labels,
            original_sims,
            objective,
            tau,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn initial_context(&self) -> Array3<f64> {
        self.bank.forced.context().mapv(f64::from)
    }

    fn forced_features(&self, context: &Array3<f64>) -> Result<Array2<f64>> {
        let c = self.bank.num_classes();
        let mut features = Array2::zeros((c, self.encoder.spec().embed_dim));
        for class in 0..c {
            let tokens = self.bank.forced.prompt_tokens_with(class, context.view());
            features
                .row_mut(class)
                .assign(&self.encoder.encode_tokens(tokens.view())?);
        }
        Ok(features)
    }

    fn pair(&self, i: usize, forced_sims: &Array2<f64>) -> SimilarityPair {
        SimilarityPair {
            forced: forced_sims.row(i).to_vec(),
            original: self.original_sims.row(i).to_vec(),
            label: self.labels[i],
        }
    }

    /// Mean loss over the samples in `batch`, evaluated through the public
    /// loss functions (no gradient bookkeeping).
    pub fn loss(&self, context: &Array3<f64>, batch: &[usize]) -> Result<f64> {
        let features = self.forced_features(context)?;
        let sims = self.images.dot(&features.t());
        let pairs: Vec<SimilarityPair> = batch.iter().map(|&i| self.pair(i, &sims)).collect();
        match self.objective {
            Objective::FceK { k } => objective::batch_loss(&pairs, self.tau, k),
            Objective::CrossEntropy => {
                let losses = pairs
                    .iter()
                    .map(|p| objective::cross_entropy_loss(p, self.tau))
                    .collect::<Result<Vec<_>>>()?;
                Ok(pairwise_sum(&losses) / losses.len() as f64)
            }
        }
    }

    /// Mean loss over `batch` and its gradient with respect to `context`.
    pub fn loss_and_grad(
        &self,
        context: &Array3<f64>,
        batch: &[usize],
    ) -> Result<(f64, Array3<f64>)> {
        if batch.is_empty() {
            return Err(Error::Validation("batch is empty".into()));
        }
        let features = self.forced_features(context)?;
        let c = self.bank.num_classes();
        let d = features.ncols();
        let scale = 1.0 / batch.len() as f64;
        let mut losses = Vec::with_capacity(batch.len());
        let mut grad_features = Array2::<f64>::zeros((c, d));
        for &i in batch {
            let z = self.images.row(i);
            let forced_sims = features.dot(&z);
            let pair = SimilarityPair {
                forced: forced_sims.to_vec(),
                original: self.original_sims.row(i).to_vec(),
                label: self.labels[i],
            };
            let (loss, grad_sims) = self.objective.loss_and_grad(&pair, self.tau)?;
            losses.push(loss);
            for (class, g) in grad_sims.iter().enumerate() {
                grad_features.row_mut(class).scaled_add(g * scale, &z);
            }
        }
        let mut grad = Array3::zeros(context.raw_dim());
        let len = self.bank.forced.context_len();
        for class in 0..c {
            let tokens = self.bank.forced.prompt_tokens_with(class, context.view());
            let (_, token_grad) = self
                .encoder
                .encode_tokens_vjp(tokens.view(), grad_features.row(class))?;
            let group = self.bank.forced.group_of(class);
            let mut target = grad.index_axis_mut(Axis(0), group);
            target += &token_grad.slice(s![..len, ..]);
        }
        Ok((pairwise_sum(&losses) * scale, grad))
    }

    /// Mean `s^f_y - s^o_y` over all samples for `context`.
    pub fn similarity_gap(&self, context: &Array3<f64>) -> Result<f64> {
        let features = self.forced_features(context)?;
        let gaps: Vec<f64> = (0..self.len())
            .map(|i| {
                let y = self.labels[i];
                features.row(y).dot(&self.images.row(i)) - self.original_sims[[i, y]]
            })
            .collect();
        Ok(pairwise_sum(&gaps) / gaps.len() as f64)
    }
}

/// SGD with momentum and L2 weight decay (heavy-ball form, no dampening).
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Option<Array3<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut Array3<f64>, grad: &Array3<f64>, lr: f64) {
        let mut g = grad.clone();
        if self.weight_decay != 0.0 {
            g.scaled_add(self.weight_decay, params);
        }
        let v = match self.velocity.take() {
            Some(mut v) => {
                v.mapv_inplace(|x| x * self.momentum);
                v += &g;
                v
            }
            None => g,
        };
        params.scaled_add(-lr, &v);
        self.velocity = Some(v);
    }
}

/// Trains the forced prompt of `bank` on `data` (global image features with
/// class labels) and returns the updated bank with its log.
pub fn train<E: DifferentiableTextEncoder + ?Sized>(
    cfg: &TrainConfig,
    bank: DualPromptBank,
    encoder: &E,
    data: &[(ImageFeatures, usize)],
) -> Result<(DualPromptBank, TrainLog)> {
    cfg.validate()?;
    if bank.k() != cfg.k {
        return Err(Error::Config(format!(
            "bank was built with K = {} but training uses K = {}",
            bank.k(),
            cfg.k
        )));
    }
    let problem = PromptObjective::new(encoder, &bank, data, cfg.objective(), cfg.tau)?;
    let mut context = problem.initial_context();
    let mut log = TrainLog::default();
    if cfg.epochs > 0 {
        let n = problem.len();
        let steps_per_epoch = n.div_ceil(cfg.batch_size);
        let total = cfg.epochs * steps_per_epoch;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
        let mut order: Vec<usize> = (0..n).collect();
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            let started = Instant::now();
            order.shuffle(&mut rng);
            let epoch_lr = cosine_lr(step, total, cfg.lr)?;
            let mut batch_losses = Vec::with_capacity(steps_per_epoch);
            for batch in order.chunks(cfg.batch_size) {
                let lr = cosine_lr(step, total, cfg.lr)?;
                let (loss, grad) = problem.loss_and_grad(&context, batch)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite { step, value: loss });
                }
                sgd.step(&mut context, &grad, lr);
                batch_losses.push(loss);
                step += 1;
            }
            let record = EpochRecord {
                epoch,
                mean_loss: pairwise_sum(&batch_losses) / batch_losses.len() as f64,
                lr: epoch_lr,
                wall_time_secs: started.elapsed().as_secs_f64(),
            };
            log::debug!(
                "epoch {epoch}: loss {:.6} lr {:.3e}",
                record.mean_loss,
                record.lr
            );
            log.epochs.push(record);
        }
        log.steps = step;
    }
    let trained_context = context.mapv(|v| v as f32);
    let final_context = trained_context.mapv(f64::from);
    log.similarity_gap = problem.similarity_gap(&final_context)?;
    drop(problem);

    let mut bank = bank;
    if cfg.epochs > 0 {
        bank.trainable_parameters().assign(&trained_context);
    }
    Ok((bank, log))
}

/// Global features and labels of the sampled few-shot entries.
pub fn few_shot_features(
    dataset: &crate::data::Dataset,
    samples: &[FewShotSample],
) -> Result<Vec<(ImageFeatures, usize)>> {
    samples
        .iter()
        .map(|s| Ok((dataset.features(s.entry)?, s.label)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::{ManifestEntry, MANIFEST_SCHEMA_VERSION};

    fn manifest(classes: usize, per_class: usize) -> DatasetManifest {
        let mut entries = Vec::new();
        for i in 0..classes * per_class {
            entries.push(ManifestEntry {
                row: Some(i),
                path: None,
                label: (i % classes) as i64,
                split: SPLIT_TRAIN.into(),
            });
        }
        DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            name: "m".into(),
            class_names: (0..classes).map(|c| format!("c{c}")).collect(),
            cache: None,
            entries,
        }
    }

    #[test]
    fn paper_defaults() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr, 2e-3);
        assert_eq!(cfg.batch_size, 160);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weight_decay, 5e-4);
        assert_eq!(cfg.k, 3.0);
        assert_eq!(cfg.tau, 1.0);
        assert_eq!(default_epochs(1, true), 30);
        assert_eq!(default_epochs(16, true), 50);
        assert_eq!(default_epochs(16, false), 200);
    }

    #[test]
    fn config_validation_and_hash() {
        let cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        assert!(TrainConfig {
            k: -1.0,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert_eq!(cfg.config_hash(), TrainConfig::default().config_hash());
        assert_ne!(
            cfg.config_hash(),
            TrainConfig {
                seed: 1,
                ..cfg.clone()
            }
            .config_hash()
        );
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 2e-3).unwrap(), 2e-3);
        assert!((cosine_lr(5, 10, 2e-3).unwrap() - 1e-3).abs() < 1e-18);
        assert!(cosine_lr(10, 10, 2e-3).is_err());
    }

    #[test]
    fn few_shot_sampling_rules() {
        let m = manifest(10, 4);
        let one = sample_few_shot(&m, 1, 3).unwrap();
        assert_eq!(one.len(), 10);
        for (c, s) in one.iter().enumerate() {
            assert_eq!(s.label, c);
        }
        assert_eq!(one, sample_few_shot(&m, 1, 3).unwrap());
        let all = sample_few_shot(&m, 4, 3).unwrap();
        let class0: Vec<usize> = all
            .iter()
            .filter(|s| s.label == 0)
            .map(|s| s.entry)
            .collect();
        assert_eq!(class0, vec![0, 10, 20, 30]);
        let err = sample_few_shot(&m, 5, 0).unwrap_err();
        assert!(
            matches!(err, Error::Data(ref msg) if msg.contains("c0")),
            "{err}"
        );
    }

    #[test]
    fn sgd_matches_reference_updates() {
        let mut p = Array3::from_elem((1, 1, 1), 1.0);
        let g = Array3::from_elem((1, 1, 1), 0.5);
        let mut sgd = Sgd::new(0.9, 0.1);
        sgd.step(&mut p, &g, 0.1);
        // v = 0.5 + 0.1 * 1.0 = 0.6
        assert!((p[[0, 0, 0]] - 0.94).abs() < 1e-15);
        sgd.step(&mut p, &g, 0.1);
        // v = 0.9 * 0.6 + 0.5 + 0.1 * 0.94 = 1.134
        assert!((p[[0, 0, 0]] - (0.94 - 0.1134)).abs() < 1e-15);
    }
}
