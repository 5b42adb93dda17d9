//! SVG figures: training loss, score distributions and the K sweep.

use std::path::Path;

use fa_ood_core::ablation::AblationTable;
use fa_ood_core::eval::Evaluation;
use fa_ood_core::train::TrainLog;
use fa_ood_core::{Error, Result, ScoreKind};
use plotters::prelude::*;

const SIZE: (u32, u32) = (720, 480);
const BINS: usize = 40;

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

pub fn loss_curve(log: &TrainLog, path: &Path) -> Result<()> {
    let points: Vec<(f64, f64)> = log
        .epochs
        .iter()
        .map(|e| (e.epoch as f64, e.mean_loss))
        .collect();
    let (lo, hi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.1), hi.max(p.1))
        });
    let (lo, hi) = if points.is_empty() {
        (0.0, 1.0)
    } else {
        padded(lo, hi)
    };
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(0f64..(points.len().max(1) as f64), lo..hi)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("mean loss")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(LineSeries::new(points, &BLUE))
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Overlaid ID / OOD score histograms (frequencies, so set sizes may differ).
pub fn score_histogram(eval: &Evaluation, kind: ScoreKind, path: &Path) -> Result<()> {
    let id = eval.id.scores();
    let ood: Vec<f64> = eval.ood.iter().flat_map(|s| s.scores()).collect();
    let (lo, hi) = id
        .iter()
        .chain(&ood)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let (lo, hi) = padded(lo, hi);
    let width = (hi - lo) / BINS as f64;
    let freq = |values: &[f64]| -> Vec<(f64, f64)> {
        let mut counts = vec![0usize; BINS];
        for &v in values {
            let bin = (((v - lo) / width) as usize).min(BINS - 1);
            counts[bin] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                (
                    lo + width * (i as f64 + 0.5),
                    c as f64 / values.len().max(1) as f64,
                )
            })
            .collect()
    };
    let (id_freq, ood_freq) = (freq(&id), freq(&ood));
    let top = id_freq
        .iter()
        .chain(&ood_freq)
        .map(|p| p.1)
        .fold(0.0, f64::max)
        .max(1e-3)
        * 1.1;

    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{kind} scores"), ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(lo..hi, 0f64..top)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("score")
        .y_desc("fraction")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (series, color, label) in [(id_freq, BLUE, "ID"), (ood_freq, RED, "OOD")] {
        chart
            .draw_series(series.into_iter().map(|(x, y)| {
                Rectangle::new(
                    [(x - width / 2.0, 0.0), (x + width / 2.0, y)],
                    color.mix(0.4).filled(),
                )
            }))
            .map_err(|e| plot_err(path, e))?
            .label(label)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// AUROC and FPR95 against K.
pub fn k_sweep(table: &AblationTable, path: &Path) -> Result<()> {
    let auroc: Vec<(f64, f64)> = table.rows.iter().map(|r| (r.k, r.auroc)).collect();
    let fpr: Vec<(f64, f64)> = table.rows.iter().map(|r| (r.k, r.fpr95)).collect();
    let k_max = table.rows.iter().map(|r| r.k).fold(1.0, f64::max);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("sensitivity to K", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(-0.2f64..k_max + 0.2, 0f64..1.05)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("K")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (series, color, label) in [(auroc, BLUE, "AUROC"), (fpr, RED, "FPR95")] {
        chart
            .draw_series(LineSeries::new(series.clone(), color))
            .map_err(|e| plot_err(path, e))?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 15, y)], color));
        chart
            .draw_series(
                series
                    .into_iter()
                    .map(|p| Circle::new(p, 3, color.filled())),
            )
            .map_err(|e| plot_err(path, e))?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}
