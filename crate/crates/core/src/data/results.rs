//! Result files: long-form accuracy matrix CSV, per-run summary CSV and a
//! JSON report holding both. Output is a pure function of the records, so
//! a rerun overwrites with identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{AccuracyMatrix, ComplexityReport, ScenarioResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub method: String,
    pub seed: u64,
    pub task_k: usize,
    pub task_j: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub seed: u64,
    #[serde(rename = "A_T")]
    pub a_t: f64,
    #[serde(rename = "A_bar")]
    pub a_bar: f64,
    /// Undefined for single-task runs (empty cell).
    #[serde(rename = "F_T")]
    pub f_t: Option<f64>,
    #[serde(rename = "delta_P")]
    pub delta_p: u64,
    #[serde(rename = "delta_M_mb")]
    pub delta_m_mb: f64,
}

/// One finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub seed: u64,
    pub matrix: Vec<Vec<f64>>,
    pub selection: Option<Vec<Vec<f64>>>,
    pub valid: bool,
    pub error: Option<String>,
    pub complexity: ComplexityReport,
}

impl RunRecord {
    pub fn new(seed: u64, result: &ScenarioResult, complexity: ComplexityReport) -> Self {
        Self {
            method: result.method.clone(),
            seed,
            matrix: result.matrix.rows().to_vec(),
            selection: result.selection.as_ref().map(|s| s.rows().to_vec()),
            valid: result.valid,
            error: result.error.clone(),
            complexity,
        }
    }

    pub fn accuracy_matrix(&self) -> Result<AccuracyMatrix> {
        AccuracyMatrix::new(self.matrix.clone())
    }

    pub fn summary(&self) -> Result<SummaryRow> {
        let m = self.accuracy_matrix()?;
        Ok(SummaryRow {
            method: self.method.clone(),
            seed: self.seed,
            a_t: m.avg_accuracy()?,
            a_bar: m.avg_incremental_accuracy()?,
            f_t: if m.tasks() >= 2 { Some(m.forgetting()?) } else { None },
            delta_p: self.complexity.delta_p,
            delta_m_mb: self.complexity.delta_m_mb,
        })
    }

    pub fn matrix_rows(&self) -> Vec<MatrixRow> {
        self.matrix
            .iter()
            .enumerate()
            .flat_map(|(k, row)| {
                row.iter().enumerate().map(move |(j, &a)| MatrixRow {
                    method: self.method.clone(),
                    seed: self.seed,
                    task_k: k,
                    task_j: j,
                    accuracy: a,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultPaths {
    pub matrix: PathBuf,
    pub summary: PathBuf,
    pub report: PathBuf,
}

impl ResultPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            matrix: dir.join("matrix.csv"),
            summary: dir.join("summary.csv"),
            report: dir.join("report.json"),
        }
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    if rows.is_empty() {
        w.write_record(header)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::domain(format!("{}: {other:?}", path.display())),
    }
}

pub const MATRIX_HEADER: [&str; 5] = ["method", "seed", "task_k", "task_j", "accuracy"];
pub const SUMMARY_HEADER: [&str; 7] = ["method", "seed", "A_T", "A_bar", "F_T", "delta_P", "delta_M_mb"];

/// Writes matrix.csv, summary.csv and report.json into `dir`.
pub fn write_results(dir: &Path, runs: &[RunRecord]) -> Result<ResultPaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = ResultPaths::in_dir(dir);
    let matrix: Vec<MatrixRow> = runs.iter().flat_map(RunRecord::matrix_rows).collect();
    let summary: Vec<SummaryRow> = runs.iter().map(RunRecord::summary).collect::<Result<_>>()?;
    write_csv(&paths.matrix, &matrix, &MATRIX_HEADER)?;
    write_csv(&paths.summary, &summary, &SUMMARY_HEADER)?;
    let report = Report {
        runs: runs.to_vec(),
        summary,
    };
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(&paths.report, json + "\n").map_err(|e| Error::io(&paths.report, e))?;
    Ok(paths)
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_matrix_csv(path: &Path) -> Result<Vec<MatrixRow>> {
    read_csv(path)
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    read_csv(path)
}

pub fn read_report(path: &Path) -> Result<Report> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Rebuilds per-run accuracy matrices from long-form rows.
pub fn matrices_from_rows(rows: &[MatrixRow]) -> Result<BTreeMap<(String, u64), AccuracyMatrix>> {
    let mut grouped: BTreeMap<(String, u64), Vec<Vec<f64>>> = BTreeMap::new();
    for r in rows {
        let m = grouped.entry((r.method.clone(), r.seed)).or_default();
        if m.len() <= r.task_k {
            m.resize_with(r.task_k + 1, Vec::new);
        }
        let row = &mut m[r.task_k];
        if row.len() != r.task_j {
            return Err(Error::domain(format!(
                "matrix rows for {} seed {} are out of order at ({}, {})",
                r.method, r.seed, r.task_k, r.task_j
            )));
        }
        row.push(r.accuracy);
    }
    grouped
        .into_iter()
        .map(|(key, rows)| AccuracyMatrix::new(rows).map(|m| (key, m)))
        .collect()
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub seeds: usize,
    pub a_t: (f64, f64),
    pub a_bar: (f64, f64),
    pub f_t: Option<(f64, f64)>,
    pub delta_p: u64,
    pub delta_m_mb: f64,
}

/// Groups summary rows by method (first-appearance order) into mean ± std.
pub fn aggregate(rows: &[SummaryRow]) -> Vec<MethodSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.method.as_str()) {
            order.push(&r.method);
        }
    }
    order
        .into_iter()
        .map(|method| {
            let group: Vec<&SummaryRow> = rows.iter().filter(|r| r.method == method).collect();
            let col = |f: fn(&SummaryRow) -> f64| mean_std(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
            let f_t: Option<Vec<f64>> = group.iter().map(|r| r.f_t).collect();
            MethodSummary {
                method: method.to_string(),
                seeds: group.len(),
                a_t: col(|r| r.a_t),
                a_bar: col(|r| r.a_bar),
                f_t: f_t.map(|v| mean_std(&v)),
                delta_p: group[0].delta_p,
                delta_m_mb: group[0].delta_m_mb,
            }
        })
        .collect()
}

/// Text table of [`aggregate`] output, accuracies in percent.
pub fn format_summary_table(summaries: &[MethodSummary]) -> String {
    let pct = |(m, s): (f64, f64)| format!("{:.2}±{:.2}", m * 100.0, s * 100.0);
    let mut out = format!(
        "{:<24} {:>5} {:>14} {:>14} {:>14} {:>10} {:>10}\n",
        "method", "seeds", "A_T", "A_bar", "F_T", "delta_P", "delta_M"
    );
    for s in summaries {
        out += &format!(
            "{:<24} {:>5} {:>14} {:>14} {:>14} {:>10} {:>10.3}\n",
            s.method,
            s.seeds,
            pct(s.a_t),
            pct(s.a_bar),
            s.f_t.map(pct).unwrap_or_else(|| "n/a".into()),
            s.delta_p,
            s.delta_m_mb
        );
    }
    out
}
