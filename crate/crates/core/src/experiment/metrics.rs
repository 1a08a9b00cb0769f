//! Line-delimited JSON metrics.
//!
//! Each line is one [`IterationReport`] with floats cut to six significant
//! digits. The first line is a step-0 baseline holding the untrained probe
//! accuracy. Lines are flushed as they are written, so a crashed run leaves a
//! readable prefix.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{Error, Result};
use crate::orchestrator::IterationReport;

pub const SIGNIFICANT_DIGITS: usize = 6;

pub fn round_significant(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x)
        .parse()
        .unwrap_or(x)
}

fn round_value(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(x) = n.as_f64() {
                if let Some(r) = serde_json::Number::from_f64(round_significant(x)) {
                    *n = r;
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

/// One metrics line, without the trailing newline.
pub fn format_record(report: &IterationReport) -> Result<String> {
    let mut value = serde_json::to_value(report)?;
    round_value(&mut value);
    Ok(serde_json::to_string(&value)?)
}

/// The step-0 record: nothing proposed or solved yet.
pub fn baseline_record(probe_accuracy: f64, buffer_size: usize) -> IterationReport {
    IterationReport {
        step: 0,
        proposed: 0,
        accepted: 0,
        accepted_invalid: 0,
        solved: 0,
        mean_v: None,
        mean_c_v: None,
        mean_c_j: None,
        mean_w_p: None,
        mean_w_s: None,
        mean_reward_proposer: None,
        mean_reward_solver: None,
        mean_sampled_p: None,
        judge_error_rate: None,
        buffer_size,
        probe_accuracy,
        proposer_tokens_optimized: 0,
        solver_tokens_optimized: 0,
        feedback_tokens_optimized: 0,
        warnings: Vec::new(),
        wall_time_ms: 0.0,
    }
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    last_step: Option<usize>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            last_step: None,
        })
    }

    pub fn write(&mut self, report: &IterationReport) -> Result<()> {
        if self.last_step.is_some_and(|s| report.step <= s) {
            return Err(Error::InvalidInput(format!(
                "metrics step {} does not follow step {}",
                report.step,
                self.last_step.unwrap_or_default()
            )));
        }
        let line = format_record(report)?;
        let io = |e| Error::io(&self.path, e);
        writeln!(self.out, "{line}").map_err(io)?;
        self.out.flush().map_err(io)?;
        self.last_step = Some(report.step);
        Ok(())
    }
}

/// Records parsed from a metrics stream plus the count of skipped lines.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<IterationReport>,
    pub skipped: usize,
}

/// Reads a metrics stream, skipping blank, malformed and out-of-order lines.
pub fn read_metrics(path: &Path) -> Result<MetricsLog> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut log = MetricsLog {
        records: Vec::new(),
        skipped: 0,
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<IterationReport>(&line) {
            Ok(r) if log.records.last().is_none_or(|prev| prev.step < r.step) => {
                log.records.push(r)
            }
            Ok(r) => {
                log::warn!("{}:{}: step {} out of order, skipped", path.display(), i + 1, r.step);
                log.skipped += 1;
            }
            Err(e) => {
                log::warn!("{}:{}: malformed record skipped: {e}", path.display(), i + 1);
                log.skipped += 1;
            }
        }
    }
    Ok(log)
}
