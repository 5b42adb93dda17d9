use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fa_ood_core::ablation::{run_ablation, AblationConfig, AblationTable, Suite};
use fa_ood_core::data::cache::{cache_embeddings, read_raw_f32};
use fa_ood_core::data::load_manifest;
use fa_ood_core::data::registry::{
    data_root_from_env, resolve_benchmark, Benchmark, Registry, DEFAULT_MAX_CONTEXT,
    DEFAULT_TOKEN_DIM,
};
use fa_ood_core::eval::{evaluate, train_on_benchmark, Evaluation};
use fa_ood_core::metrics::MetricsReport;
use fa_ood_core::prompt::BankOptions;
use fa_ood_core::scoring::Truth;
use fa_ood_core::train::{default_epochs, TrainConfig, TrainLog};
use fa_ood_core::{DualPromptBank, EncoderSpec, Error, Result, ScoreConfig, ScoreKind, ToyEncoder};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::plot;
use crate::{
    AblateArgs, Backend, CacheArgs, CommonArgs, EvalArgs, ScoreParams, SweepArgs, TrainArgs,
    TrainParams,
};

pub const BANK_FILE: &str = "bank.fabank";
pub const TRAIN_LOG_CSV: &str = "train_log.csv";
pub const RUN_MANIFEST: &str = "run.json";
pub const REPORT_CSV: &str = "report.csv";
const REPORT_JSON: &str = "report.json";
const SCORES_CSV: &str = "scores.csv";
const SWEEP_CSV: &str = "k_sweep.csv";

/// Large-vocabulary ID sets (ImageNet-1k) get the short epoch budget.
const LARGE_ID_SET: usize = 1000;

/// First 16 hex digits of the SHA-256 of `value`'s JSON form.
pub fn run_id<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("run config serializes");
    hex::encode(&Sha256::digest(json)[..8])
}

fn check_backend(backend: Backend) -> Result<()> {
    match backend {
        Backend::Toy | Backend::Cache => Ok(()),
        Backend::ClipAdapter => Err(Error::Config(
            "the clip-adapter backend is not built into this binary; encode images elsewhere \
             into FAEMB1 caches and use `--backend cache`"
                .into(),
        )),
    }
}

fn load_benchmark(common: &CommonArgs) -> Result<Benchmark> {
    check_backend(common.backend)?;
    let registry = match &common.registry {
        Some(path) => Registry::load(path)?,
        None => Registry::bundled(),
    };
    let root = common.data_root.clone().unwrap_or_else(data_root_from_env);
    let spec = resolve_benchmark(&common.benchmark, &registry, &root)?;
    Benchmark::load(&spec)
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn train_config(params: &TrainParams, seed: u64, num_classes: usize) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        shots: params.shots,
        epochs: params
            .epochs
            .unwrap_or_else(|| default_epochs(params.shots, num_classes >= LARGE_ID_SET)),
        lr: params.lr,
        batch_size: params.batch_size,
        k: params.k,
        tau: params.tau,
        seed,
        loss: params.loss.into(),
        ..TrainConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn bank_options(params: &TrainParams, seed: u64) -> BankOptions {
    BankOptions {
        forced_init: params.init.into(),
        original_init: params.original_init.into(),
        shared: !params.per_class,
        k: params.k,
        seed,
    }
}

fn score_config(params: &ScoreParams, k: f64) -> Result<ScoreConfig> {
    let cfg = ScoreConfig {
        tau0: params.tau0,
        ..ScoreConfig::new(k, params.score.into())
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    run_id: &'a str,
    tool_version: &'a str,
    benchmark: &'a str,
    backend: String,
    train: &'a TrainConfig,
    config_hash: String,
    bank: &'a BankOptions,
    num_classes: usize,
    trainable_parameters: usize,
    local_features: &'a str,
    steps: usize,
    similarity_gap: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_id: String,
    pub bank: DualPromptBank,
    pub log: TrainLog,
    pub bank_path: PathBuf,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let bench = load_benchmark(&args.common)?;
    let seed = args.common.seed;
    let cfg = train_config(&args.train, seed, bench.id.manifest.num_classes())?;
    let opts = bank_options(&args.train, seed);
    let id = run_id(&(&args.common.benchmark, &cfg, &opts));
    log::info!("run {id}: {} epochs on `{}`", cfg.epochs, bench.name);
    let run = train_on_benchmark(&bench, &bench.encoder, opts, &cfg)?;

    let out = &args.common.out;
    create_out(out)?;
    let bank_path = out.join(BANK_FILE);
    run.bank.save(&bank_path)?;
    write(&out.join(TRAIN_LOG_CSV), run.log.to_csv())?;
    let manifest = RunManifest {
        run_id: &id,
        tool_version: env!("CARGO_PKG_VERSION"),
        benchmark: &bench.name,
        backend: format!("{:?}", args.common.backend).to_lowercase(),
        train: &cfg,
        config_hash: cfg.config_hash(),
        bank: &opts,
        num_classes: run.bank.num_classes(),
        trainable_parameters: run.bank.num_trainable(),
        local_features: "disjoint input slices (toy) / projected patch tokens (checkpoint caches)",
        steps: run.log.steps,
        similarity_gap: run.log.similarity_gap,
    };
    write(
        &out.join(RUN_MANIFEST),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    if args.common.plots {
        plot::loss_curve(&run.log, &out.join("train_loss.svg"))?;
    }
    Ok(TrainOutcome {
        run_id: id,
        bank: run.bank,
        log: run.log,
        bank_path,
    })
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub evaluation: Evaluation,
    pub report_path: PathBuf,
}

fn evaluate_bank(args: &EvalArgs) -> Result<(Evaluation, ScoreKind)> {
    let bench = load_benchmark(&args.common)?;
    let bank_path = args
        .bank
        .clone()
        .unwrap_or_else(|| args.common.out.join(BANK_FILE));
    let bank = DualPromptBank::load(&bank_path)?;
    if bank.class_names != bench.id.manifest.class_names {
        return Err(Error::Config(format!(
            "bank {} was trained on different classes than benchmark `{}`",
            bank_path.display(),
            bench.name
        )));
    }
    let cfg = score_config(&args.scoring, bank.k())?;
    Ok((evaluate(&bank, &bench.encoder, &bench, &cfg)?, cfg.kind))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalOutcome> {
    let (evaluation, kind) = evaluate_bank(args)?;
    let out = &args.common.out;
    create_out(out)?;
    let report_path = out.join(REPORT_CSV);
    write(&report_path, evaluation.report.to_csv())?;
    write(&out.join(REPORT_JSON), evaluation.report.to_json())?;
    if args.common.plots {
        plot::score_histogram(&evaluation, kind, &out.join("scores.svg"))?;
    }
    Ok(EvalOutcome {
        report: evaluation.report.clone(),
        evaluation,
        report_path,
    })
}

pub fn cmd_score(args: &EvalArgs) -> Result<PathBuf> {
    let (evaluation, _) = evaluate_bank(args)?;
    let mut csv = String::from("dataset,index,truth,predicted_class,score\n");
    for set in std::iter::once(&evaluation.id).chain(&evaluation.ood) {
        for (i, s) in set.samples.iter().enumerate() {
            let truth = match s.truth {
                Truth::Id(c) => c.to_string(),
                Truth::Ood => "ood".into(),
            };
            writeln!(
                csv,
                "{},{i},{truth},{},{}",
                set.name, s.predicted_class, s.score
            )
            .expect("string write");
        }
    }
    create_out(&args.common.out)?;
    let path = args.common.out.join(SCORES_CSV);
    write(&path, csv)?;
    Ok(path)
}

/// Parses `a..b` (inclusive) or `a,b,c`.
pub fn parse_k_list(text: &str) -> Result<Vec<f64>> {
    let bad = || {
        Error::Config(format!(
            "invalid K list `{text}` (use e.g. `0..6` or `0,1,3`)"
        ))
    };
    let values: Vec<f64> = if let Some((lo, hi)) = text.split_once("..") {
        let lo: u32 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u32 = hi.trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        (lo..=hi).map(f64::from).collect()
    } else {
        text.split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if values.is_empty() || values.iter().any(|k| !(*k >= 0.0 && k.is_finite())) {
        return Err(Error::Config(format!(
            "K values must be non-negative, got `{text}`"
        )));
    }
    Ok(values)
}

fn ablation_config(
    params: &TrainParams,
    scoring: &ScoreParams,
    seed: u64,
    k_list: &str,
    num_classes: usize,
) -> Result<AblationConfig> {
    // Validate the score settings once, independent of K.
    score_config(scoring, params.k)?;
    Ok(AblationConfig {
        train: train_config(params, seed, num_classes)?,
        score: scoring.score.into(),
        tau0: scoring.tau0,
        k_list: parse_k_list(k_list)?,
        seeds: vec![seed],
    })
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub table: AblationTable,
    pub csv_path: PathBuf,
    pub plot_path: Option<PathBuf>,
}

pub fn cmd_sweep_k(args: &SweepArgs) -> Result<SweepOutcome> {
    let bench = load_benchmark(&args.common)?;
    let cfg = ablation_config(
        &args.train,
        &args.scoring,
        args.common.seed,
        &args.k_list,
        bench.id.manifest.num_classes(),
    )?;
    let table = run_ablation(Suite::KSweep, &bench, &bench.encoder, &cfg)?;
    let out = &args.common.out;
    create_out(out)?;
    let csv_path = out.join(SWEEP_CSV);
    write(&csv_path, table.to_csv())?;
    let plot_path = if args.common.plots {
        let path = out.join("k_sweep.svg");
        plot::k_sweep(&table, &path)?;
        Some(path)
    } else {
        None
    };
    Ok(SweepOutcome {
        table,
        csv_path,
        plot_path,
    })
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<AblationTable> {
    let suite: Suite = args.suite.parse()?;
    let bench = load_benchmark(&args.common)?;
    let cfg = ablation_config(
        &args.train,
        &args.scoring,
        args.common.seed,
        &args.k_list,
        bench.id.manifest.num_classes(),
    )?;
    let table = run_ablation(suite, &bench, &bench.encoder, &cfg)?;
    let out = &args.common.out;
    create_out(out)?;
    write(&out.join(format!("ablation_{suite}.csv")), table.to_csv())?;
    Ok(table)
}

/// Encodes every entry of a manifest with the toy image encoder.
pub fn cmd_cache(args: &CacheArgs) -> Result<usize> {
    check_backend(args.backend)?;
    if args.backend == Backend::Cache {
        return Err(Error::Config(
            "the cache backend replays existing caches and cannot encode new inputs".into(),
        ));
    }
    let manifest = load_manifest(&args.manifest)?;
    let spec = EncoderSpec::for_classes(
        &manifest.class_names,
        args.embed_dim,
        DEFAULT_TOKEN_DIM,
        args.num_locals,
        DEFAULT_MAX_CONTEXT,
        args.seed,
    )?;
    let encoder = ToyEncoder::new(args.seed, spec);
    log::info!(
        "encoding {} inputs of width {}",
        manifest.entries.len(),
        fa_ood_core::ImageEncoder::input_dim(&encoder)
    );
    let base = args
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let (cache, _) = cache_embeddings(
        &manifest,
        &encoder,
        |p| read_raw_f32(&base.join(p)),
        &args.out,
    )?;
    Ok(cache.len())
}
