//! SVG figures for the score diagnostics.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};
use plotters::prelude::*;

use crate::report::FigureSource;

fn plot_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow!("plotting failed: {e:?}")
}

/// Score of each train sample against its shortcut indicator, jittered.
pub fn score_scatter(path: &Path, src: &FigureSource) -> Result<()> {
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let max_s = src.points.iter().map(|p| p.score).fold(0.0f64, f64::max).max(1e-3) * 1.05;
    let caption = match src.pearson_r {
        Some(r) => format!("shortcut score vs indicator (Pearson r = {r:.3})"),
        None => "shortcut score vs indicator (r undefined)".to_string(),
    };
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(-0.5f64..1.5f64, 0.0..max_s)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("shortcut-consistent").y_desc("S").draw().map_err(plot_err)?;
    chart
        .draw_series(src.points.iter().map(|p| {
            // deterministic jitter from the sample index
            let j = ((p.sample_index * 2654435761) % 1000) as f64 / 1000.0 * 0.4 - 0.2;
            let x = p.shortcut_consistent as u8 as f64 + j;
            let color = if p.shortcut_consistent { RED.mix(0.4) } else { BLUE.mix(0.4) };
            Circle::new((x, p.score), 2, color.filled())
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Alignment histograms of the two classes.
pub fn alignment_histograms(path: &Path, src: &FigureSource) -> Result<()> {
    const BINS: usize = 40;
    let bin = |a: f64| (((a + 1.0) / 2.0 * BINS as f64).floor() as usize).min(BINS - 1);
    let mut counts = [[0u32; BINS]; 2];
    for p in &src.points {
        counts[p.shortcut_consistent as usize][bin(p.alignment)] += 1;
    }
    let max_c = counts.iter().flatten().copied().max().unwrap_or(1).max(1);
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("alignment with the validation gradient", ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(-1.0f64..1.0f64, 0u32..max_c + 1)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("A").y_desc("samples").draw().map_err(plot_err)?;
    let width = 2.0 / BINS as f64;
    for (class, color, label) in [(0usize, BLUE, "other"), (1, RED, "shortcut-consistent")] {
        chart
            .draw_series(counts[class].iter().enumerate().map(|(i, &c)| {
                let x0 = -1.0 + i as f64 * width;
                Rectangle::new([(x0, 0), (x0 + width, c)], color.mix(0.35).filled())
            }))
            .map_err(plot_err)?
            .label(label)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.mix(0.35).filled()));
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// The reweighting curve `w(S)`.
pub fn weight_curve(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("w = exp(-{} S)", crate::report::CURVE_LAMBDA), ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0f64..2.0f64, 0.0f64..1.05f64)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("S").y_desc("w").draw().map_err(plot_err)?;
    chart.draw_series(LineSeries::new(curve.iter().copied(), &BLACK)).map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Writes every available figure, returning the paths written.
pub fn render_all(out: &Path, src: Option<&FigureSource>, curve: &[(f64, f64)]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    if let Some(src) = src {
        let a = out.join("fig5a_score_vs_shortcut.svg");
        score_scatter(&a, src)?;
        let b = out.join("fig5b_alignment_by_class.svg");
        alignment_histograms(&b, src)?;
        files.extend([a, b]);
    }
    let c = out.join("fig5c_weight_curve.svg");
    weight_curve(&c, curve)?;
    files.push(c);
    Ok(files)
}
