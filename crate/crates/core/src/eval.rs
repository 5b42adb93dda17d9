//! Scoring whole datasets and running train + evaluate end to end.

use serde::{Deserialize, Serialize};

use crate::data::manifest::SPLIT_TEST;
use crate::data::{Benchmark, Dataset};
use crate::encoder::{DifferentiableTextEncoder, ImageFeatures, TextEncoder, TextFeatureSet};
use crate::error::{Error, Result};
use crate::metrics::{build_report, MetricsReport, ScoredDataset};
use crate::prompt::{BankOptions, DualPromptBank};
use crate::scoring::{score_image, ScoreConfig, Truth};
use crate::train::{few_shot_features, sample_few_shot, train, TrainConfig, TrainLog};

/// Scores the ID test split and every OOD entry of a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub id: ScoredDataset,
    pub ood: Vec<ScoredDataset>,
}

/// Scores the given entries of `dataset`.
pub fn score_entries(
    dataset: &Dataset,
    entries: &[usize],
    tf: &TextFeatureSet,
    to: &TextFeatureSet,
    cfg: &ScoreConfig,
) -> Result<ScoredDataset> {
    let samples = entries
        .iter()
        .map(|&i| {
            let truth = Truth::from_label(dataset.manifest.entries[i].label)?;
            score_image(&dataset.features(i)?, tf, to, cfg, truth)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoredDataset {
        name: dataset.name().to_string(),
        samples,
    })
}

/// Evaluation entries: the test split for ID sets, everything for OOD sets.
pub fn eval_entries(dataset: &Dataset) -> Result<Vec<usize>> {
    if dataset.manifest.is_ood() {
        return Ok((0..dataset.len()).collect());
    }
    let entries = dataset.manifest.split_indices(SPLIT_TEST);
    if entries.is_empty() {
        return Err(Error::Data(format!(
            "{}: no `{SPLIT_TEST}` entries to evaluate",
            dataset.name()
        )));
    }
    Ok(entries)
}

pub fn evaluate<E: TextEncoder + ?Sized>(
    bank: &DualPromptBank,
    encoder: &E,
    bench: &Benchmark,
    cfg: &ScoreConfig,
) -> Result<Evaluation> {
    cfg.validate()?;
    let (tf, to) = bank.text_features(encoder)?;
    let id = score_entries(&bench.id, &eval_entries(&bench.id)?, &tf, &to, cfg)?;
    let ood = bench
        .ood
        .iter()
        .map(|set| score_entries(set, &eval_entries(set)?, &tf, &to, cfg))
        .collect::<Result<Vec<_>>>()?;
    let report = build_report(&id, &ood)?;
    Ok(Evaluation { report, id, ood })
}

/// Few-shot training set for `bench` (`shots` per class, drawn with `seed`).
pub fn training_data(
    bench: &Benchmark,
    shots: usize,
    seed: u64,
) -> Result<Vec<(ImageFeatures, usize)>> {
    let samples = sample_few_shot(&bench.id.manifest, shots, seed)?;
    few_shot_features(&bench.id, &samples)
}

/// A trained bank and its training log.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub bank: DualPromptBank,
    pub log: TrainLog,
}

/// Builds a bank for the benchmark's classes and trains it.
pub fn train_on_benchmark<E: DifferentiableTextEncoder + ?Sized>(
    bench: &Benchmark,
    encoder: &E,
    opts: BankOptions,
    cfg: &TrainConfig,
) -> Result<TrainedRun> {
    let bank = DualPromptBank::build(&bench.id.manifest.class_names, encoder.spec(), opts)?;
    let data = training_data(bench, cfg.shots, cfg.seed)?;
    let (bank, log) = train(cfg, bank, encoder, &data)?;
    Ok(TrainedRun { bank, log })
}
