//! Summaries of finished runs. Inputs are only read.

use std::path::{Path, PathBuf};

use mlirl_core::irl::DiagnosticsRecord;
use serde::{Deserialize, Serialize};

use crate::commands::{read_diagnostics, DIAGNOSTICS_FILE};
use crate::error::{CliError, Result};
use crate::output::OutputDir;

pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";

/// Mean of the first or last quarter of `values` (at least one entry).
pub fn quartile_mean(values: &[f64], last: bool) -> f64 {
    let n = (values.len() / 4).max(1);
    let slice = if last {
        &values[values.len() - n..]
    } else {
        &values[..n]
    };
    slice.iter().sum::<f64>() / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub rows: usize,
    pub final_k: usize,
    pub policy_log_gap_first_quartile: f64,
    pub policy_log_gap_last_quartile: f64,
    pub grad_norm_sq_first_quartile: f64,
    pub grad_norm_sq_last_quartile: f64,
    pub final_likelihood: f64,
    pub final_saddle_gap: f64,
}

impl RunSummary {
    const METRICS: [&'static str; 6] = [
        "policy_log_gap_first_quartile",
        "policy_log_gap_last_quartile",
        "grad_norm_sq_first_quartile",
        "grad_norm_sq_last_quartile",
        "final_likelihood",
        "final_saddle_gap",
    ];

    fn metrics(&self) -> [f64; 6] {
        [
            self.policy_log_gap_first_quartile,
            self.policy_log_gap_last_quartile,
            self.grad_norm_sq_first_quartile,
            self.grad_norm_sq_last_quartile,
            self.final_likelihood,
            self.final_saddle_gap,
        ]
    }

    pub fn from_records(run: String, records: &[DiagnosticsRecord]) -> Option<Self> {
        let last = records.last()?;
        let gaps: Vec<f64> = records.iter().map(|r| r.policy_log_gap).collect();
        let grads: Vec<f64> = records.iter().map(|r| r.grad_norm_sq).collect();
        Some(Self {
            run,
            rows: records.len(),
            final_k: last.k,
            policy_log_gap_first_quartile: quartile_mean(&gaps, false),
            policy_log_gap_last_quartile: quartile_mean(&gaps, true),
            grad_norm_sq_first_quartile: quartile_mean(&grads, false),
            grad_norm_sq_last_quartile: quartile_mean(&grads, true),
            final_likelihood: last.likelihood,
            final_saddle_gap: last.saddle_gap,
        })
    }
}

/// Mean and sample standard deviation of one metric across runs. The
/// deviation is absent for a single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub metric: String,
    pub runs: usize,
    pub mean: f64,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<RunSummary>,
    pub aggregate: Vec<Aggregate>,
}

fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1.0)).sqrt()
    });
    (mean, std)
}

pub fn summarize(run_dirs: &[PathBuf]) -> Result<Report> {
    if run_dirs.is_empty() {
        return Err(CliError::Config("report needs at least one run directory".into()));
    }
    let runs = run_dirs
        .iter()
        .map(|dir| {
            let path = dir.join(DIAGNOSTICS_FILE);
            let records = read_diagnostics(&path)?;
            RunSummary::from_records(dir.display().to_string(), &records).ok_or_else(|| CliError::Input {
                path,
                reason: "no diagnostics rows".into(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let aggregate = RunSummary::METRICS
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let values: Vec<f64> = runs.iter().map(|r| r.metrics()[i]).collect();
            let (mean, std) = mean_std(&values);
            Aggregate {
                metric: name.to_string(),
                runs: values.len(),
                mean,
                std,
            }
        })
        .collect();
    Ok(Report { runs, aggregate })
}

fn to_csv<T: Serialize>(rows: &[T], name: &Path) -> Result<Vec<u8>> {
    let err = |source| CliError::Csv {
        path: name.to_path_buf(),
        source,
    };
    let mut writer = csv::Writer::from_writer(Vec::new());
    for r in rows {
        writer.serialize(r).map_err(err)?;
    }
    writer.into_inner().map_err(|e| CliError::Io {
        path: name.to_path_buf(),
        source: e.into_error(),
    })
}

/// Writes `summary.json`, `summary.csv` (one row per run) and `aggregate.csv`.
pub fn write_report(report: &Report, out: &OutputDir) -> Result<()> {
    out.write_json(SUMMARY_JSON, report)?;
    out.write_atomic(SUMMARY_CSV, &to_csv(&report.runs, Path::new(SUMMARY_CSV))?)?;
    out.write_atomic(AGGREGATE_CSV, &to_csv(&report.aggregate, Path::new(AGGREGATE_CSV))?)?;
    Ok(())
}
