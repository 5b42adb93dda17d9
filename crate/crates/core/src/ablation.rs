//! Ablation suites: FCE-K vs CE, prompt initialisation, shared vs
//! per-class context, and the sweep over `K`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Benchmark;
use crate::encoder::DifferentiableTextEncoder;
use crate::error::{Error, Result};
use crate::eval::{evaluate, train_on_benchmark};
use crate::prompt::{BankOptions, InitMode};
use crate::scoring::{ScoreConfig, ScoreKind};
use crate::train::{LossKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    FceVsCe,
    InitModes,
    SharedVector,
    KSweep,
}

impl Suite {
    pub const ALL: [Suite; 4] = [
        Suite::FceVsCe,
        Suite::InitModes,
        Suite::SharedVector,
        Suite::KSweep,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Suite::FceVsCe => "fce_vs_ce",
            Suite::InitModes => "init_modes",
            Suite::SharedVector => "shared_vector",
            Suite::KSweep => "k_sweep",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Suite::ALL.iter().map(Suite::as_str).collect();
                Error::Config(format!(
                    "unknown ablation suite `{s}` (expected one of: {})",
                    names.join(", ")
                ))
            })
    }
}

/// Label of the `K = 0` row, which reduces to ordinary prompt learning.
pub const BASELINE_LABEL: &str = "baseline (K=0)";

/// Settings shared by every arm of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub score: ScoreKind,
    pub tau0: f64,
    /// Values of `K` for the sweep.
    pub k_list: Vec<f64>,
    /// Seeds to average over; each seed drives bank init, sampling and
    /// shuffling.
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            score: ScoreKind::GlMcm,
            tau0: crate::scoring::DEFAULT_TAU0,
            k_list: (0..=6).map(f64::from).collect(),
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub suite: Suite,
    pub arm: String,
    pub k: f64,
    pub loss: LossKind,
    pub score: ScoreKind,
    pub forced_init: InitMode,
    pub original_init: InitMode,
    pub shared: bool,
    pub fpr95: f64,
    pub auroc: f64,
    pub id_top1: f64,
    pub similarity_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: Suite,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "suite,arm,k,loss,score,forced_init,original_init,shared,fpr95,auroc,id_top1,similarity_gap\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.suite,
                r.arm,
                r.k,
                r.loss,
                r.score,
                r.forced_init,
                r.original_init,
                r.shared,
                r.fpr95,
                r.auroc,
                r.id_top1,
                r.similarity_gap
            ));
        }
        out
    }
}

struct Arm {
    label: String,
    k: f64,
    loss: LossKind,
    score: ScoreKind,
    forced_init: InitMode,
    original_init: InitMode,
    shared: bool,
}

fn arms(suite: Suite, cfg: &AblationConfig) -> Vec<Arm> {
    let base_k = cfg.train.k;
    let arm = |label: String, k, loss, score, forced_init, original_init, shared| Arm {
        label,
        k,
        loss,
        score,
        forced_init,
        original_init,
        shared,
    };
    use InitMode::{Manual, Random};
    match suite {
        Suite::FceVsCe => {
            let mut out = Vec::new();
            for score in ScoreKind::ALL {
                for (label, loss) in [("FA", LossKind::FceK), ("FA_CE", LossKind::CrossEntropy)] {
                    out.push(arm(
                        format!("{label}/{score}"),
                        base_k,
                        loss,
                        score,
                        Manual,
                        Manual,
                        true,
                    ));
                }
            }
            out
        }
        Suite::InitModes => [
            (Manual, Manual),
            (Manual, Random),
            (Random, Manual),
            (Random, Random),
        ]
        .into_iter()
        .map(|(f, o)| {
            arm(
                format!("forced={f}/original={o}"),
                base_k,
                LossKind::FceK,
                cfg.score,
                f,
                o,
                true,
            )
        })
        .collect(),
        Suite::SharedVector => [
            (true, Manual),
            (true, Random),
            (false, Manual),
            (false, Random),
        ]
        .into_iter()
        .map(|(shared, init)| {
            let ctx = if shared { "shared" } else { "per-class" };
            arm(
                format!("{ctx}/{init}"),
                base_k,
                LossKind::FceK,
                cfg.score,
                init,
                Manual,
                shared,
            )
        })
        .collect(),
        Suite::KSweep => cfg
            .k_list
            .iter()
            .map(|&k| {
                let label = if k == 0.0 {
                    BASELINE_LABEL.to_string()
                } else {
                    format!("K={k}")
                };
                arm(label, k, LossKind::FceK, cfg.score, Manual, Manual, true)
            })
            .collect(),
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Runs every arm of `suite` and averages metrics over `cfg.seeds`.
pub fn run_ablation<E: DifferentiableTextEncoder + ?Sized>(
    suite: Suite,
    bench: &Benchmark,
    encoder: &E,
    cfg: &AblationConfig,
) -> Result<AblationTable> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    if suite == Suite::KSweep && cfg.k_list.is_empty() {
        return Err(Error::Config("K sweep needs at least one K value".into()));
    }
    let mut rows = Vec::new();
    for arm in arms(suite, cfg) {
        let (mut fpr, mut auc, mut acc, mut gap) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &seed in &cfg.seeds {
            let train_cfg = TrainConfig {
                k: arm.k,
                loss: arm.loss,
                seed,
                ..cfg.train.clone()
            };
            let opts = BankOptions {
                forced_init: arm.forced_init,
                original_init: arm.original_init,
                shared: arm.shared,
                k: arm.k,
                seed,
            };
            let run = train_on_benchmark(bench, encoder, opts, &train_cfg)?;
            let score_cfg = ScoreConfig {
                tau0: cfg.tau0,
                ..ScoreConfig::new(arm.k, arm.score)
            };
            let report = evaluate(&run.bank, encoder, bench, &score_cfg)?.report;
            fpr.push(report.average_fpr95);
            auc.push(report.average_auroc);
            acc.push(report.id_top1);
            gap.push(run.log.similarity_gap);
        }
        log::info!("{suite} {}: auroc {:.4}", arm.label, mean(&auc));
        rows.push(AblationRow {
            suite,
            arm: arm.label,
            k: arm.k,
            loss: arm.loss,
            score: arm.score,
            forced_init: arm.forced_init,
            original_init: arm.original_init,
            shared: arm.shared,
            fpr95: mean(&fpr),
            auroc: mean(&auc),
            id_top1: mean(&acc),
            similarity_gap: mean(&gap),
        });
    }
    Ok(AblationTable { suite, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.as_str().parse::<Suite>().unwrap(), s);
        }
        let err = "bogus".parse::<Suite>().unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("k_sweep")));
    }

    #[test]
    fn fixed_suites_have_four_arms() {
        let cfg = AblationConfig::default();
        for s in [Suite::FceVsCe, Suite::InitModes, Suite::SharedVector] {
            assert_eq!(arms(s, &cfg).len(), 4, "{s}");
        }
        let sweep = arms(Suite::KSweep, &cfg);
        assert_eq!(sweep.len(), 7);
        assert_eq!(sweep[0].label, BASELINE_LABEL);
    }
}
