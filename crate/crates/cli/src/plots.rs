//! SVG accuracy-vs-resolution and ROC plots, rendered from report files only.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};
use octuplet::VerificationReport;
use plotters::prelude::*;

const SIZE: (u32, u32) = (720, 480);

fn colour(i: usize) -> RGBColor {
    let (r, g, b) = Palette99::pick(i).to_rgba().rgb();
    RGBColor(r, g, b)
}

/// Writes `<prefix>_accuracy.svg` and one `<prefix>_roc_<r>.svg` per
/// resolution. Returns the written paths.
pub fn render(reports: &[(String, VerificationReport)], out: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut resolutions: Vec<u32> = reports
        .iter()
        .flat_map(|(_, r)| r.results.iter().map(|x| x.resolution))
        .collect();
    resolutions.sort_unstable();
    resolutions.dedup();

    let mut written = vec![accuracy_bars(reports, &resolutions, &out.join(format!("{prefix}_accuracy.svg")))?];
    for &r in &resolutions {
        written.push(roc(reports, r, &out.join(format!("{prefix}_roc_{r}.svg")))?);
    }
    Ok(written)
}

fn accuracy_bars(reports: &[(String, VerificationReport)], resolutions: &[u32], path: &Path) -> Result<PathBuf> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let groups = resolutions.len().max(1);
    let n = reports.len().max(1);
    let lowest = reports
        .iter()
        .flat_map(|(_, r)| r.results.iter().map(|x| x.accuracy))
        .fold(1.0f64, f64::min);
    let y_min = ((lowest * 100.0 - 5.0) / 10.0).floor().clamp(0.0, 10.0) * 10.0;
    let mut chart = ChartBuilder::on(&root)
        .caption("Verification accuracy by probe resolution", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..groups as f64, y_min..100.0)
        .map_err(|e| anyhow!("{e}"))?;
    let labels: Vec<String> = resolutions.iter().map(|r| format!("{r} px")).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(groups)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 1e-9 {
                labels.get(i).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc("accuracy [%]")
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    let width = 0.8 / n as f64;
    for (k, (label, report)) in reports.iter().enumerate() {
        let c = colour(k);
        let bars = resolutions.iter().enumerate().filter_map(|(g, &r)| {
            let acc = report.accuracy(r)? * 100.0;
            let x0 = g as f64 + 0.1 + k as f64 * width;
            Some(Rectangle::new([(x0, y_min), (x0 + width, acc)], c.filled()))
        });
        chart
            .draw_series(bars)
            .map_err(|e| anyhow!("{e}"))?
            .label(label.as_str())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], c.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(path.to_path_buf())
}

fn roc(reports: &[(String, VerificationReport)], resolution: u32, path: &Path) -> Result<PathBuf> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("ROC at {resolution} px"), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..1.0, 0.0..1.0)
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .configure_mesh()
        .x_desc("false accept rate")
        .y_desc("true accept rate")
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .draw_series(LineSeries::new([(0.0, 1.0), (1.0, 0.0)], BLACK.mix(0.3)))
        .map_err(|e| anyhow!("{e}"))?;
    for (k, (label, report)) in reports.iter().enumerate() {
        let Some(result) = report.result(resolution) else { continue };
        let c = colour(k);
        chart
            .draw_series(LineSeries::new(result.roc.iter().map(|p| (p[0], p[1])), c.stroke_width(2)))
            .map_err(|e| anyhow!("{e}"))?
            .label(format!("{label} (EER {:.3})", result.eer))
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], c.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(path.to_path_buf())
}
