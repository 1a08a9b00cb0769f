//! The `run`, `ablate`, `sweep`, `plot` and `trace` commands.

use std::fmt::{self, Write as _};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use super::config::RunConfig;
use super::metrics::{baseline_record, read_metrics, MetricsWriter};
use super::plot;
use crate::confidence::SignalKind;
use crate::error::{Error, Result};
use crate::orchestrator::{self, AblationMode, Orchestrator, SampleTrace};
use crate::world;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BUFFER_FILE: &str = "buffer.tsv";
pub const POLICY_FILE: &str = "policy.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const PROBE_FILE: &str = "probe.tsv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const FAULT_FILE: &str = "fault.json";

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub steps_completed: usize,
    /// Set when the run stopped early; `fault.json` holds the details.
    pub fault: Option<String>,
}

#[derive(Serialize)]
struct FaultReport<'a> {
    steps_completed: usize,
    error: &'a str,
}

fn write_fault(dir: &Path, steps_completed: usize, error: &str) -> Result<()> {
    let path = dir.join(FAULT_FILE);
    let text = serde_json::to_string_pretty(&FaultReport {
        steps_completed,
        error,
    })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_policy(orch: &Orchestrator, path: &Path) -> Result<()> {
    let value = serde_json::json!({
        "proposer": orch.proposer(),
        "solver": orch.solver(),
    });
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, &value)?;
    writeln!(out).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

/// Executes one run and writes its artifacts to `config.out_dir`.
///
/// The directory always ends up holding either the resolved config, metrics,
/// buffer snapshot and policy, or a `fault.json` (usually alongside them).
pub fn cmd_run(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let dir = config.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let config_path = dir.join(CONFIG_FILE);
    fs::write(&config_path, config.to_toml_string()?).map_err(|e| Error::io(&config_path, e))?;
    // a stale fault report from an earlier run in the same directory would mislead
    let _ = fs::remove_file(dir.join(FAULT_FILE));

    match execute(config, &dir) {
        Ok(summary) => {
            if let Some(fault) = &summary.fault {
                write_fault(&dir, summary.steps_completed, fault)?;
            }
            Ok(summary)
        }
        Err(e) => {
            write_fault(&dir, 0, &e.to_string())?;
            Err(e)
        }
    }
}

fn execute(config: &RunConfig, dir: &Path) -> Result<RunSummary> {
    let setup = config.setup();
    let fresh = Orchestrator::new(setup)?;
    let probe_path = dir.join(PROBE_FILE);
    let mut probe_out = create(&probe_path)?;
    world::write_probe_set(fresh.probe(), &mut probe_out)?;
    probe_out.flush().map_err(|e| Error::io(&probe_path, e))?;

    let mut metrics = MetricsWriter::create(&dir.join(METRICS_FILE))?;
    metrics.write(&baseline_record(fresh.probe_accuracy(), fresh.buffer().len()))?;
    drop(fresh);

    let timings_path = dir.join(TIMINGS_FILE);
    let mut timings = csv::Writer::from_path(&timings_path)?;
    timings.write_record(["step", "wall_time_ms"])?;
    let traces_path = dir.join(TRACES_FILE);
    let mut traces = if config.trace_samples {
        Some(create(&traces_path)?)
    } else {
        let _ = fs::remove_file(&traces_path);
        None
    };

    let outcome = orchestrator::run_with(setup, config.trace_samples, |report, samples| {
        metrics.write(report)?;
        timings.write_record([report.step.to_string(), format!("{:.3}", report.wall_time_ms)])?;
        if let Some(out) = traces.as_mut() {
            for s in samples {
                serde_json::to_writer(&mut *out, s)?;
                writeln!(out).map_err(|e| Error::io(&traces_path, e))?;
            }
        }
        Ok(())
    })?;
    timings.flush().map_err(|e| Error::io(&timings_path, e))?;
    if let Some(mut out) = traces {
        out.flush().map_err(|e| Error::io(&traces_path, e))?;
    }

    let orch = &outcome.orchestrator;
    let buffer_path = dir.join(BUFFER_FILE);
    let mut snapshot = create(&buffer_path)?;
    orch.buffer().write_snapshot(&mut snapshot)?;
    snapshot.flush().map_err(|e| Error::io(&buffer_path, e))?;
    write_policy(orch, &dir.join(POLICY_FILE))?;

    Ok(RunSummary {
        out_dir: dir.to_path_buf(),
        initial_accuracy: outcome.initial_accuracy,
        final_accuracy: outcome.final_accuracy,
        steps_completed: outcome.reports.len(),
        fault: outcome.fault,
    })
}

/// One run's outcome inside a comparison grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    /// Mean solve rate of the questions the Solver replayed.
    pub mean_sampled_p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub runs: Vec<RunResult>,
    /// `(seed, error)` for every run that did not finish.
    pub failures: Vec<(u64, String)>,
}

impl TableRow {
    pub fn failed(&self) -> bool {
        !self.failures.is_empty()
    }

    pub fn median_final(&self) -> Option<f64> {
        median(self.runs.iter().map(|r| r.final_accuracy).collect())
    }

    pub fn median_initial(&self) -> Option<f64> {
        median(self.runs.iter().map(|r| r.initial_accuracy).collect())
    }

    pub fn mean_sampled_p(&self) -> Option<f64> {
        let ps: Vec<f64> = self.runs.iter().filter_map(|r| r.mean_sampled_p).collect();
        (!ps.is_empty()).then(|| ps.iter().sum::<f64>() / ps.len() as f64)
    }
}

/// Median final probe accuracy per row, over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub axis: String,
    pub rows: Vec<TableRow>,
}

impl ComparisonTable {
    pub fn row(&self, label: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = csv::Writer::from_path(path)?;
        out.write_record([
            self.axis.as_str(),
            "seeds",
            "failed",
            "median_initial_accuracy",
            "median_final_accuracy",
            "mean_sampled_p",
        ])?;
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        for row in &self.rows {
            out.write_record([
                row.label.clone(),
                (row.runs.len() + row.failures.len()).to_string(),
                row.failures.len().to_string(),
                opt(row.median_initial()),
                opt(row.median_final()),
                opt(row.mean_sampled_p()),
            ])?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for ComparisonTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        writeln!(f, "| {} | seeds | initial | final (median) | mean p(q) | status |", self.axis)?;
        writeln!(f, "|---|---|---|---|---|---|")?;
        for row in &self.rows {
            let status = if row.failed() {
                format!("failed ({}/{})", row.failures.len(), row.runs.len() + row.failures.len())
            } else {
                "ok".into()
            };
            writeln!(
                f,
                "| {} | {} | {} | {} | {} | {} |",
                row.label,
                row.runs.len() + row.failures.len(),
                opt(row.median_initial()),
                opt(row.median_final()),
                opt(row.mean_sampled_p()),
                status
            )?;
        }
        Ok(())
    }
}

pub fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    })
}

fn run_in_memory(config: &RunConfig) -> std::result::Result<RunResult, String> {
    let outcome = orchestrator::run(config.setup()).map_err(|e| e.to_string())?;
    if let Some(fault) = outcome.fault {
        return Err(fault);
    }
    let ps: Vec<f64> = outcome.reports.iter().filter_map(|r| r.mean_sampled_p).collect();
    Ok(RunResult {
        seed: config.seed,
        initial_accuracy: outcome.initial_accuracy,
        final_accuracy: outcome.final_accuracy,
        mean_sampled_p: (!ps.is_empty()).then(|| ps.iter().sum::<f64>() / ps.len() as f64),
    })
}

/// Runs every `(label, config)` under every seed, in parallel; the table
/// keeps input order.
fn run_grid(axis: &str, variants: Vec<(String, RunConfig)>, seeds: &[u64]) -> ComparisonTable {
    let jobs: Vec<(usize, RunConfig)> = variants
        .iter()
        .enumerate()
        .flat_map(|(i, (_, base))| {
            seeds.iter().map(move |&seed| (i, RunConfig { seed, ..base.clone() }))
        })
        .collect();
    let results: Vec<(usize, u64, std::result::Result<RunResult, String>)> = jobs
        .par_iter()
        .map(|(i, cfg)| (*i, cfg.seed, run_in_memory(cfg)))
        .collect();
    let mut rows: Vec<TableRow> = variants
        .into_iter()
        .map(|(label, _)| TableRow {
            label,
            runs: Vec::new(),
            failures: Vec::new(),
        })
        .collect();
    for (i, seed, result) in results {
        match result {
            Ok(run) => rows[i].runs.push(run),
            Err(e) => {
                log::warn!("{} seed {seed} failed: {e}", rows[i].label);
                rows[i].failures.push((seed, e));
            }
        }
    }
    ComparisonTable {
        axis: axis.to_string(),
        rows,
    }
}

/// Ablation table: each variant under each seed.
pub fn cmd_ablate(
    config: &RunConfig,
    variants: &[AblationMode],
    seeds: &[u64],
) -> Result<ComparisonTable> {
    config.validate()?;
    if seeds.len() < 2 {
        return Err(Error::config("seeds", "ablation needs at least two seeds"));
    }
    if variants.is_empty() {
        return Err(Error::config("variants", "at least one variant is required"));
    }
    let grid = variants
        .iter()
        .map(|&mode| {
            let mut c = config.clone();
            c.looping.ablation = mode;
            (mode.to_string(), c)
        })
        .collect();
    Ok(run_grid("variant", grid, seeds))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    BatchSize,
    SignalKind,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::SignalKind => "signal_kind",
        }
    }

    /// The config for one sweep value.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut c = base.clone();
        match self {
            SweepAxis::BatchSize => {
                let b: usize = value
                    .parse()
                    .map_err(|_| Error::config("batch_size", format!("`{value}` is not a count")))?;
                c.looping.solver_batch_size = b;
            }
            SweepAxis::SignalKind => c.signal = SignalKind::from_str(value)?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch_size" => Ok(SweepAxis::BatchSize),
            "signal_kind" => Ok(SweepAxis::SignalKind),
            other => Err(Error::InvalidInput(format!(
                "unknown sweep axis `{other}` (expected batch_size or signal_kind)"
            ))),
        }
    }
}

/// One row per value; every value is checked before anything runs.
pub fn cmd_sweep(
    config: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    seeds: &[u64],
) -> Result<ComparisonTable> {
    if values.is_empty() {
        return Err(Error::config("values", "at least one value is required"));
    }
    if seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }
    let grid = values
        .iter()
        .map(|v| Ok((v.clone(), axis.apply(config, v)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(run_grid(axis.as_str(), grid, seeds))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSummary {
    pub series: Vec<(String, usize)>,
    pub csv_rows: usize,
}

/// Writes `<stem>.svg` and `<stem>.csv` from one or more metrics streams.
pub fn cmd_plot(metrics: &[PathBuf], svg: &Path, csv: &Path) -> Result<PlotSummary> {
    let series = plot::load_series(metrics)?;
    plot::render_svg(&series, svg)?;
    let csv_rows = plot::write_csv(&series, csv)?;
    Ok(PlotSummary {
        series: series
            .iter()
            .map(|s| (s.label.clone(), s.records.len()))
            .collect(),
        csv_rows,
    })
}

/// Per-sample traces for one step of a persisted run.
pub fn cmd_trace(run_dir: &Path, step: usize) -> Result<Vec<SampleTrace>> {
    let traces_path = run_dir.join(TRACES_FILE);
    if !traces_path.exists() {
        return Err(Error::TracingDisabled(run_dir.to_path_buf()));
    }
    let last = read_metrics(&run_dir.join(METRICS_FILE))?
        .records
        .last()
        .map_or(0, |r| r.step);
    if step == 0 || step > last {
        return Err(Error::Range(format!(
            "step {step} is outside the run's steps 1..={last}"
        )));
    }
    let file = File::open(&traces_path).map_err(|e| Error::io(&traces_path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&traces_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: SampleTrace = serde_json::from_str(&line)?;
        if t.step == step {
            out.push(t);
        }
    }
    Ok(out)
}

pub fn format_traces(traces: &[SampleTrace]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<9} {:>8} {:>7} {:>7} {:>7} {:>7} {:>7} {:>6} {:>8} {:>9}",
        "role", "question", "v", "c_V", "c_J", "w", "reward", "valid", "correct", "fb_error"
    );
    for t in traces {
        let c_j = t.c_j.map_or("-".into(), |c| format!("{c:.4}"));
        let correct = t.correct.map_or("-".into(), |c| c.to_string());
        let _ = writeln!(
            s,
            "{:<9} {:>8} {:>7.4} {:>7.4} {:>7} {:>7.4} {:>7.4} {:>6} {:>8} {:>9}",
            t.role.to_string(),
            t.question_id,
            t.v,
            t.c_v,
            c_j,
            t.weight,
            t.reward,
            t.valid,
            correct,
            t.feedback_error
        );
    }
    s
}
