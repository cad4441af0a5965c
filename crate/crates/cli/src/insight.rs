//! Scatter-data extraction from a records CSV: how dilation counts and
//! retained-pixel ratios move with prediction size.

use std::path::Path;

use anyhow::Context;
use misure_core::io::{ensure_parent_dir, write_gray_png};
use misure_core::records::{SaliencyRecord, SCHEMA_VERSION};
use ndarray::Array2;

/// Emits `dilations_vs_size.csv` and `ratio_vs_size.csv`, one point per
/// record, plus scatter PNGs when `plot` is set.
pub fn write_insights(records: &[SaliencyRecord], out: &Path, plot: bool) -> anyhow::Result<()> {
    if records.is_empty() {
        anyhow::bail!("records file has no rows");
    }
    ensure_parent_dir(&out.join("x"))?;

    let mut dil = String::from("schema,prediction_size_px,n_dilations\n");
    let mut ratio = String::from("schema,prediction_size_px,perturbation_ratio\n");
    for r in records {
        dil.push_str(&format!(
            "{},{},{}\n",
            SCHEMA_VERSION, r.prediction_size_px, r.n_dilations
        ));
        ratio.push_str(&format!(
            "{},{},{}\n",
            SCHEMA_VERSION, r.prediction_size_px, r.perturbation_ratio
        ));
    }
    let dil_path = out.join("dilations_vs_size.csv");
    let ratio_path = out.join("ratio_vs_size.csv");
    std::fs::write(&dil_path, &dil).with_context(|| format!("writing {}", dil_path.display()))?;
    std::fs::write(&ratio_path, &ratio)
        .with_context(|| format!("writing {}", ratio_path.display()))?;

    if plot {
        let dil_points: Vec<(f64, f64)> = records
            .iter()
            .map(|r| (r.prediction_size_px as f64, r.n_dilations as f64))
            .collect();
        let ratio_points: Vec<(f64, f64)> = records
            .iter()
            .map(|r| (r.prediction_size_px as f64, r.perturbation_ratio))
            .collect();
        write_gray_png(&out.join("dilations_vs_size.png"), &scatter(&dil_points))?;
        write_gray_png(&out.join("ratio_vs_size.png"), &scatter(&ratio_points))?;
    }
    Ok(())
}

const PLOT_SIDE: usize = 256;
const MARGIN: usize = 24;

/// Minimal scatter raster: white canvas, gray axes, 2x2 black points.
fn scatter(points: &[(f64, f64)]) -> Array2<f64> {
    let mut canvas = Array2::from_elem((PLOT_SIDE, PLOT_SIDE), 1.0);
    for i in MARGIN..PLOT_SIDE - MARGIN {
        canvas[[PLOT_SIDE - MARGIN, i]] = 0.5;
        canvas[[i, MARGIN]] = 0.5;
    }
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    let span = (PLOT_SIDE - 2 * MARGIN - 1) as f64;
    let sx = if x_hi > x_lo { span / (x_hi - x_lo) } else { 0.0 };
    let sy = if y_hi > y_lo { span / (y_hi - y_lo) } else { 0.0 };
    for &(x, y) in points {
        let px = MARGIN + ((x - x_lo) * sx).round() as usize;
        let py = PLOT_SIDE - MARGIN - ((y - y_lo) * sy).round() as usize;
        for dy in 0..2 {
            for dx in 0..2 {
                let (r, c) = (py.saturating_sub(dy), px + dx);
                if r < PLOT_SIDE && c < PLOT_SIDE {
                    canvas[[r, c]] = 0.0;
                }
            }
        }
    }
    canvas
}
