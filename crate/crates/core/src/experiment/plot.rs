//! Probe-accuracy curves as SVG plus a CSV of the plotted points.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Serialize;

use super::metrics::read_metrics;
use crate::error::{Error, Result};
use crate::orchestrator::IterationReport;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub records: Vec<IterationReport>,
}

impl Series {
    /// Step-0 accuracy, or the earliest record when the stream has no baseline.
    pub fn baseline(&self) -> Option<f64> {
        self.records.first().map(|r| r.probe_accuracy)
    }
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    series: &'a str,
    step: usize,
    probe_accuracy: f64,
    mean_reward_solver: Option<f64>,
    mean_w_s: Option<f64>,
    mean_sampled_p: Option<f64>,
}

/// `runs/a/metrics.jsonl` is labelled `a`; any other file by its stem.
fn label_for(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    if stem == "metrics" {
        if let Some(dir) = path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
            return dir.to_string();
        }
    }
    stem.to_string()
}

/// Loads one series per path. Malformed lines are skipped; a path with no
/// valid record is dropped with a warning. Fails only when nothing is left.
pub fn load_series(paths: &[PathBuf]) -> Result<Vec<Series>> {
    let mut series = Vec::new();
    let mut seen = HashSet::new();
    for path in paths {
        let log = read_metrics(path)?;
        if log.records.is_empty() {
            log::warn!("{}: no valid records", path.display());
            continue;
        }
        let mut label = label_for(path);
        let mut n = 2;
        while !seen.insert(label.clone()) {
            label = format!("{}#{n}", label_for(path));
            n += 1;
        }
        series.push(Series {
            label,
            records: log.records,
        });
    }
    if series.is_empty() {
        let names: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::NoMetrics(names.join(", ")));
    }
    Ok(series)
}

/// Writes every plotted point; returns the row count.
pub fn write_csv(series: &[Series], path: &Path) -> Result<usize> {
    let mut out = csv::Writer::from_path(path)?;
    let mut rows = 0;
    for s in series {
        for r in &s.records {
            out.serialize(CsvRow {
                series: &s.label,
                step: r.step,
                probe_accuracy: r.probe_accuracy,
                mean_reward_solver: r.mean_reward_solver,
                mean_w_s: r.mean_w_s,
                mean_sampled_p: r.mean_sampled_p,
            })?;
            rows += 1;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

/// Accuracy against step, one line per series; each series' starting
/// accuracy is drawn as a dashed horizontal reference.
pub fn render_svg(series: &[Series], path: &Path) -> Result<()> {
    let max_step = series
        .iter()
        .flat_map(|s| s.records.iter().map(|r| r.step))
        .max()
        .unwrap_or(0)
        .max(1);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("probe accuracy", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0usize..max_step, 0.0f64..1.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc("accuracy")
        .draw()
        .map_err(plot_err)?;

    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(
                s.records.iter().map(|r| (r.step, r.probe_accuracy)),
                color.stroke_width(2),
            ))
            .map_err(plot_err)?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], color.stroke_width(2)));
        if let Some(base) = s.baseline() {
            chart
                .draw_series(DashedLineSeries::new(
                    [(0, base), (max_step, base)],
                    6,
                    4,
                    color.stroke_width(1),
                ))
                .map_err(plot_err)?;
        }
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
