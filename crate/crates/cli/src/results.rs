//! Raw and aggregate result tables and their CSV/JSON serialization.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clta_core::distill::TeacherKind;
use clta_core::harness::RunResult;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed results file {path}: {msg}")]
    Malformed { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub config_id: String,
    pub strategy: TeacherKind,
    pub severity: u8,
    pub seed: u64,
    pub wall_s: f64,
    pub status: RunStatus,
    pub result: Option<RunResult>,
}

impl RunRow {
    /// `acc_inc, acc_final, forg_inc, forg_final, wall_s, A_1..A_n`; NaN for failed runs.
    fn values(&self, n_tasks: usize) -> Vec<f64> {
        let mut v = vec![f64::NAN; 5 + n_tasks];
        v[4] = self.wall_s;
        if let Some(r) = &self.result {
            let rep = &r.report;
            v[..4].copy_from_slice(&[rep.acc_inc, rep.acc_final, rep.forg_inc, rep.forg_final]);
            for (slot, a) in v[5..].iter_mut().zip(&rep.a) {
                *slot = *a;
            }
        } else {
            v[4] = f64::NAN;
        }
        v
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<RunRow>,
}

/// Mean and sample standard deviation per column over the successful seeds of one config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub config_id: String,
    pub n_ok: usize,
    pub n_failed: usize,
    /// `(mean, std)` in raw-CSV column order.
    pub stats: Vec<(f64, f64)>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

impl ResultsTable {
    pub fn n_tasks(&self) -> usize {
        self.rows.iter().filter_map(|r| r.result.as_ref()).map(|r| r.report.a.len()).max().unwrap_or(0)
    }

    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| r.status != RunStatus::Ok)
    }

    fn column_names(&self) -> Vec<String> {
        let mut cols: Vec<String> = ["acc_inc", "acc_final", "forg_inc", "forg_final", "wall_s"].map(String::from).into();
        cols.extend((1..=self.n_tasks()).map(|k| format!("a_k_{k}")));
        cols
    }

    /// Config ids in order of first appearance.
    pub fn config_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !ids.contains(&r.config_id.as_str()) {
                ids.push(&r.config_id);
            }
        }
        ids
    }

    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let n_tasks = self.n_tasks();
        self.config_ids()
            .into_iter()
            .map(|id| {
                let rows: Vec<&RunRow> = self.rows.iter().filter(|r| r.config_id == id).collect();
                let ok: Vec<Vec<f64>> = rows.iter().filter(|r| r.result.is_some()).map(|r| r.values(n_tasks)).collect();
                let stats = (0..5 + n_tasks)
                    .map(|c| {
                        let col: Vec<f64> = ok.iter().map(|v| v[c]).filter(|x| !x.is_nan()).collect();
                        mean_std(&col)
                    })
                    .collect();
                AggregateRow { config_id: id.to_string(), n_ok: ok.len(), n_failed: rows.len() - ok.len(), stats }
            })
            .collect()
    }

    pub fn raw_csv(&self) -> String {
        let n_tasks = self.n_tasks();
        let mut out = format!("config_id,seed,{}\n", self.column_names().join(","));
        for r in &self.rows {
            let cells: Vec<String> = r.values(n_tasks).into_iter().map(fmt_g).collect();
            let _ = writeln!(out, "{},{},{}", r.config_id, r.seed, cells.join(","));
        }
        out
    }

    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from("config_id,n_ok,n_failed");
        for c in self.column_names() {
            let _ = write!(out, ",{c}_mean,{c}_std");
        }
        out.push('\n');
        for a in self.aggregate() {
            let _ = write!(out, "{},{},{}", a.config_id, a.n_ok, a.n_failed);
            for (m, s) in &a.stats {
                let _ = write!(out, ",{},{}", fmt_g(*m), fmt_g(*s));
            }
            out.push('\n');
        }
        out
    }

    pub fn json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            rows: &'a [RunRow],
            aggregate: Vec<AggregateRow>,
        }
        let mut s = serde_json::to_string_pretty(&Doc { rows: &self.rows, aggregate: self.aggregate() })
            .expect("results serialize");
        s.push('\n');
        s
    }

    /// Human-readable aggregate table.
    pub fn report(&self) -> String {
        let mut out = format!("{:<32} {:>4} {:>6}  {:<22} {:<22} {:<22} {:<22}\n", "config_id", "ok", "failed", "acc_inc", "acc_final", "forg_inc", "forg_final");
        for a in self.aggregate() {
            let cell = |i: usize| format!("{} ± {}", fmt_g(a.stats[i].0), fmt_g(a.stats[i].1));
            let _ = writeln!(
                out,
                "{:<32} {:>4} {:>6}  {:<22} {:<22} {:<22} {:<22}",
                a.config_id,
                a.n_ok,
                a.n_failed,
                cell(0),
                cell(1),
                cell(2),
                cell(3)
            );
        }
        out
    }
}

pub const RAW_CSV: &str = "results.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const RESULTS_JSON: &str = "results.json";

fn write_file(path: PathBuf, contents: &str) -> Result<(), ResultsError> {
    std::fs::write(&path, contents).map_err(|source| ResultsError::Io { path, source })
}

pub fn write_results(table: &ResultsTable, dir: &Path) -> Result<(), ResultsError> {
    std::fs::create_dir_all(dir).map_err(|source| ResultsError::Io { path: dir.into(), source })?;
    write_file(dir.join(RAW_CSV), &table.raw_csv())?;
    write_file(dir.join(AGGREGATE_CSV), &table.aggregate_csv())?;
    write_file(dir.join(RESULTS_JSON), &table.json())
}

pub fn read_results(dir: &Path) -> Result<ResultsTable, ResultsError> {
    #[derive(Deserialize)]
    struct Doc {
        rows: Vec<RunRow>,
    }
    let path = dir.join(RESULTS_JSON);
    let text = std::fs::read_to_string(&path).map_err(|source| ResultsError::Io { path: path.clone(), source })?;
    let doc: Doc = serde_json::from_str(&text).map_err(|e| ResultsError::Malformed { path, msg: e.to_string() })?;
    Ok(ResultsTable { rows: doc.rows })
}

/// `%g`-style formatting with 6 significant digits.
pub fn fmt_g(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    trim_zeros(&format!("{x:.*}", (5 - exp) as usize)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clta_core::harness::TaskTrace;
    use clta_core::metrics::{report, AccuracyMatrix};

    pub(crate) fn row(id: &str, seed: u64, rows: Vec<Vec<f64>>) -> RunRow {
        let m = AccuracyMatrix::from_rows(rows).unwrap();
        let n = m.n();
        RunRow {
            config_id: id.into(),
            strategy: TeacherKind::Frozen,
            severity: 0,
            seed,
            wall_s: 0.0,
            status: RunStatus::Ok,
            result: Some(RunResult {
                seed,
                report: report(&m),
                accuracy_matrix: m,
                traces: vec![TaskTrace::default(); n],
                final_bn_kld: vec![None; n],
                confusion: Vec::new(),
                elapsed_s: 0.0,
            }),
        }
    }

    #[test]
    fn g_format() {
        let cases = [
            (0.725, "0.725"),
            (0.65, "0.65"),
            (1.0 / 3.0, "0.333333"),
            (2.0 / 3.0, "0.666667"),
            (123456.0, "123456"),
            (1234567.0, "1.23457e+06"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (-2.5, "-2.5"),
            (9.999999, "10"),
            (0.0, "0"),
        ];
        for (x, want) in cases {
            assert_eq!(fmt_g(x), want, "{x}");
        }
    }

    #[test]
    fn hand_report_csv_fixture() {
        let table = ResultsTable { rows: vec![row("hand", 0, vec![vec![0.8], vec![0.6, 0.7]])] };
        assert_eq!(
            table.raw_csv(),
            "config_id,seed,acc_inc,acc_final,forg_inc,forg_final,wall_s,a_k_1,a_k_2\nhand,0,0.725,0.65,0.2,0.2,0,0.8,0.65\n"
        );
    }

    #[test]
    fn failures_are_nan_rows() {
        let mut bad = row("x", 1, vec![vec![0.5]]);
        bad.result = None;
        bad.status = RunStatus::Failed("boom".into());
        let table = ResultsTable { rows: vec![row("x", 0, vec![vec![0.5]]), bad] };
        assert!(table.raw_csv().ends_with("x,1,NaN,NaN,NaN,NaN,NaN,NaN\n"));
        let agg = table.aggregate();
        assert_eq!((agg[0].n_ok, agg[0].n_failed), (1, 1));
        assert_eq!(agg[0].stats[0], (0.5, 0.0));
        assert!(table.any_failed());
    }

    #[test]
    fn aggregate_uses_sample_std() {
        let table = ResultsTable {
            rows: vec![row("a", 0, vec![vec![0.2]]), row("a", 1, vec![vec![0.4]]), row("b", 0, vec![vec![1.0]])],
        };
        let agg = table.aggregate();
        assert_eq!(agg.len(), 2);
        assert!((agg[0].stats[0].0 - 0.3).abs() < 1e-15);
        assert!((agg[0].stats[0].1 - 0.02f64.sqrt()).abs() < 1e-15);
        assert!(table.aggregate_csv().starts_with("config_id,n_ok,n_failed,acc_inc_mean,acc_inc_std,"));
    }

    #[test]
    fn json_round_trips_and_files_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let table = ResultsTable { rows: vec![row("a", 0, vec![vec![0.9], vec![0.7, 0.8]])] };
        write_results(&table, dir.path()).unwrap();
        let first = std::fs::read(dir.path().join(RAW_CSV)).unwrap();
        write_results(&table, dir.path()).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join(RAW_CSV)).unwrap());
        assert_eq!(read_results(dir.path()).unwrap(), table);
        for f in [RAW_CSV, AGGREGATE_CSV, RESULTS_JSON] {
            assert!(std::fs::read_to_string(dir.path().join(f)).unwrap().ends_with('\n'));
        }
    }
}
