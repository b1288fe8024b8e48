//! Per-run and aggregate metric CSV files.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use icq_core::learners::MetricRecord;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// One row of a per-run metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRow {
    pub step: usize,
    pub q_estimate: Option<f64>,
    pub critic_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub eval_return: f64,
    pub policy_value: f64,
    pub diverged: bool,
    /// Monte-Carlo value of the optimal policy; the divergence reference.
    pub true_value: f64,
    pub alpha: f64,
}

impl MetricRow {
    pub fn from_record(rec: &MetricRecord, true_value: f64, alpha: f64) -> Self {
        Self {
            step: rec.step,
            q_estimate: rec.q_estimate,
            critic_loss: rec.critic_loss,
            policy_loss: rec.policy_loss,
            eval_return: rec.eval_return,
            policy_value: rec.policy_value,
            diverged: rec.diverged,
            true_value,
            alpha,
        }
    }
}

/// Streams rows to disk, flushing after each so an interrupted run leaves a valid file.
pub struct MetricsWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| LabError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner: csv::Writer::from_writer(file),
        })
    }

    pub fn write(&mut self, row: &MetricRow) -> Result<()> {
        self.inner
            .serialize(row)
            .map_err(|e| LabError::csv(&self.path, e))?;
        self.inner.flush().map_err(|e| LabError::io(&self.path, e))
    }
}

/// Parses a per-run metrics document.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>, csv::Error> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    parse_metrics_csv(&text).map_err(|e| LabError::csv(path, e))
}

/// Mean and spread across seeds at one logged step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub environment: String,
    pub learner: String,
    pub step: usize,
    pub runs: usize,
    pub q_mean: Option<f64>,
    pub q_std: Option<f64>,
    pub return_mean: f64,
    pub return_std: f64,
    pub policy_value_mean: f64,
    pub policy_value_std: f64,
    pub diverged_runs: usize,
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates runs of one (environment, learner) cell step by step. Runs that
/// stopped early contribute only to the steps they reached.
pub fn aggregate(environment: &str, learner: &str, runs: &[Vec<MetricRow>]) -> Vec<AggregateRow> {
    let mut steps: Vec<usize> = runs.iter().flatten().map(|r| r.step).collect();
    steps.sort_unstable();
    steps.dedup();
    steps
        .into_iter()
        .map(|step| {
            let rows: Vec<&MetricRow> = runs
                .iter()
                .filter_map(|r| r.iter().find(|x| x.step == step))
                .collect();
            let qs: Vec<f64> = rows.iter().filter_map(|r| r.q_estimate).collect();
            let (q_mean, q_std) = if qs.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&qs);
                (Some(m), Some(s))
            };
            let returns: Vec<f64> = rows.iter().map(|r| r.eval_return).collect();
            let values: Vec<f64> = rows.iter().map(|r| r.policy_value).collect();
            let (return_mean, return_std) = mean_std(&returns);
            let (policy_value_mean, policy_value_std) = mean_std(&values);
            AggregateRow {
                environment: environment.to_string(),
                learner: learner.to_string(),
                step,
                runs: rows.len(),
                q_mean,
                q_std,
                return_mean,
                return_std,
                policy_value_mean,
                policy_value_std,
                diverged_runs: rows.iter().filter(|r| r.diverged).count(),
            }
        })
        .collect()
}

pub fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| LabError::csv(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| LabError::csv(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

pub fn read_aggregate(path: &Path) -> Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| LabError::csv(path, e))?;
    r.deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| LabError::csv(path, e))
}

/// Writes `series,x,y` rows.
pub fn write_series(path: &Path, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let mut out = String::from("series,x,y\n");
    for (name, points) in series {
        for (x, y) in points {
            out.push_str(&format!("{},{x},{y}\n", csv_field(name)));
        }
    }
    let mut f = File::create(path).map_err(|e| LabError::io(path, e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| LabError::io(path, e))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
