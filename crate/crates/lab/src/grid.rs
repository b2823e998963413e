//! Grid execution and the aggregate results table.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use iib_core::objectives::Method;
use iib_core::parallel::{self, Execution};
use iib_core::trainer::TrainData;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data;
use crate::error::{LabError, Result};
use crate::runs::{self, Cell};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub hash: String,
    pub dataset: String,
    pub method: Method,
    pub lambda: f64,
    pub beta: f64,
    pub seed: u64,
    pub validation: Option<f64>,
    pub test: Option<f64>,
    pub group_gap: Option<f64>,
    /// Error message of a failed run.
    pub failed: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub median: f64,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { median, mean, std })
    }
}

/// Seeds of one `(dataset, method, λ, β)` combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dataset: String,
    pub method: Method,
    pub lambda: f64,
    pub beta: f64,
    pub runs: usize,
    pub failed: usize,
    pub validation: Option<Stats>,
    pub test: Option<Stats>,
    pub group_gap: Option<Stats>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<Row>,
    pub aggregates: Vec<Aggregate>,
}

fn row_key(r: &Row) -> (String, Method, u64, u64, u64, String) {
    (r.dataset.clone(), r.method, r.lambda.to_bits(), r.beta.to_bits(), r.seed, r.hash.clone())
}

impl ResultsTable {
    pub fn from_rows(mut rows: Vec<Row>) -> Self {
        rows.sort_by_key(row_key);
        let mut groups: BTreeMap<(String, Method, u64, u64), Vec<&Row>> = BTreeMap::new();
        for r in &rows {
            groups
                .entry((r.dataset.clone(), r.method, r.lambda.to_bits(), r.beta.to_bits()))
                .or_default()
                .push(r);
        }
        let aggregates = groups
            .into_iter()
            .map(|((dataset, method, l, b), rs)| {
                let ok: Vec<&&Row> = rs.iter().filter(|r| r.failed.is_none()).collect();
                let col = |f: fn(&Row) -> Option<f64>| Stats::of(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
                Aggregate {
                    dataset,
                    method,
                    lambda: f64::from_bits(l),
                    beta: f64::from_bits(b),
                    runs: ok.len(),
                    failed: rs.len() - ok.len(),
                    validation: col(|r| r.validation),
                    test: col(|r| r.test),
                    group_gap: col(|r| r.group_gap),
                }
            })
            .collect();
        Self { rows, aggregates }
    }

    pub fn aggregate(&self, dataset: &str, method: Method, lambda: f64, beta: f64) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.dataset == dataset && a.method == method && a.lambda == lambda && a.beta == beta)
    }

    /// Tab-separated aggregate table.
    pub fn to_text(&self) -> String {
        let mut out = String::from("dataset\tmethod\tlambda\tbeta\truns\tfailed\ttest_median\ttest_mean\ttest_std\tval_median\tgroup_gap_median\n");
        let f = |s: &Option<Stats>, g: fn(&Stats) -> f64| s.as_ref().map(|s| format!("{:.4}", g(s))).unwrap_or_else(|| "-".into());
        for a in &self.aggregates {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                a.dataset,
                a.method,
                a.lambda,
                a.beta,
                a.runs,
                a.failed,
                f(&a.test, |s| s.median),
                f(&a.test, |s| s.mean),
                f(&a.test, |s| s.std),
                f(&a.validation, |s| s.median),
                f(&a.group_gap, |s| s.median),
            ));
        }
        out
    }
}

fn row_for(cell: &Cell, hash: String) -> Row {
    Row {
        hash,
        dataset: cell.dataset.name().to_string(),
        method: cell.spec.method,
        lambda: cell.spec.lambda,
        beta: cell.spec.beta,
        seed: cell.seed,
        validation: None,
        test: None,
        group_gap: None,
        failed: None,
    }
}

fn unreadable_row(hash: &str, error: String) -> Row {
    Row {
        hash: hash.to_string(),
        dataset: "?".into(),
        method: Method::Erm,
        lambda: 0.0,
        beta: 0.0,
        seed: 0,
        validation: None,
        test: None,
        group_gap: None,
        failed: Some(error),
    }
}

/// Rebuilds the table from the files under `<out>/runs/`. A run file that
/// does not parse becomes a failed row rather than an error.
pub fn collect(out: &Path) -> Result<ResultsTable> {
    let dir = runs::runs_dir(out);
    let mut rows = Vec::new();
    let entries = match fs::read_dir(&dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(ResultsTable::default()),
        Err(e) => return Err(LabError::io(&dir, e)),
    };
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    paths.sort();
    let mut complete = std::collections::BTreeSet::new();
    let mut failures = Vec::new();
    for path in paths {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
        if name.starts_with('.') {
            continue;
        }
        if name.ends_with(".failed.json") {
            failures.push(path);
        } else if name.ends_with(".jsonl") {
            match runs::read_run(&path) {
                Ok(run) => {
                    let mut row = row_for(&run.cell, run.hash.clone());
                    match run.summary {
                        Some(s) => {
                            row.validation = Some(s.validation_acc);
                            row.test = Some(s.test_acc);
                            row.group_gap = s.group_gap;
                            complete.insert(run.hash);
                        }
                        None => row.failed = Some("run file has no summary".into()),
                    }
                    rows.push(row);
                }
                // Unreadable files still show up: under their cell when the
                // header survived, otherwise keyed by file name.
                Err(e) => {
                    let hash = name.trim_end_matches(".jsonl");
                    rows.push(match runs::read_header(&path) {
                        Some(cell) => Row {
                            failed: Some(e.to_string()),
                            ..row_for(&cell, hash.to_string())
                        },
                        None => unreadable_row(hash, e.to_string()),
                    });
                }
            }
        }
    }
    for path in failures {
        let rec = match runs::read_failure(&path) {
            Ok(r) => r,
            Err(e) => {
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
                rows.push(unreadable_row(name.trim_end_matches(".failed.json"), e.to_string()));
                continue;
            }
        };
        if complete.contains(&rec.hash) {
            continue;
        }
        rows.retain(|r| r.hash != rec.hash);
        let mut row = row_for(&rec.cell, rec.hash);
        row.failed = Some(rec.error);
        rows.push(row);
    }
    Ok(ResultsTable::from_rows(rows))
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub table: ResultsTable,
    pub cells: usize,
    pub ran: usize,
    pub skipped: usize,
    pub failed: usize,
}

pub const RESULTS_JSON: &str = "results.json";
pub const RESULTS_TEXT: &str = "results.tsv";

pub fn write_table(out: &Path, table: &ResultsTable) -> Result<()> {
    let json = serde_json::to_vec_pretty(table).expect("tables serialize");
    runs::write_atomic(&out.join(RESULTS_JSON), &json)?;
    runs::write_atomic(&out.join(RESULTS_TEXT), table.to_text().as_bytes())
}

/// Runs every incomplete cell of `cells`, at most `jobs` at a time.
///
/// Data is generated once per seed and shared read-only between cells.
pub fn run_cells(out: &Path, cells: &[Cell], jobs: usize, force: bool) -> Result<(usize, usize)> {
    let pending: Vec<&Cell> = cells.iter().filter(|c| force || !runs::is_complete(out, c)).collect();
    let mut datasets: BTreeMap<(String, u64), std::result::Result<TrainData, String>> = BTreeMap::new();
    for c in &pending {
        let key = (serde_json::to_string(&c.dataset).expect("datasets serialize"), c.seed);
        datasets
            .entry(key)
            .or_insert_with(|| data::build(&c.dataset, c.seed).map_err(|e| e.to_string()));
    }
    let results = parallel::with_threads(jobs, || {
        parallel::map(Execution::default(), &pending, |c| {
            let key = (serde_json::to_string(&c.dataset).expect("datasets serialize"), c.seed);
            match &datasets[&key] {
                Ok(d) => runs::run_cell(out, c, d).map(|_| ()),
                Err(e) => Err(runs::record_failure(out, c, format!("data generation: {e}"))),
            }
        })
    });
    let failed = results.iter().filter(|r| r.is_err()).count();
    Ok((pending.len(), failed))
}

pub fn run_grid(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<GridOutcome> {
    let cells = runs::enumerate_cells(cfg);
    if cells.is_empty() {
        return Err(LabError::Config("empty grid".into()));
    }
    fs::create_dir_all(runs::runs_dir(out)).map_err(|e| LabError::io(out, e))?;
    let (ran, failed) = run_cells(out, &cells, jobs, false)?;
    let table = collect(out)?;
    write_table(out, &table)?;
    Ok(GridOutcome {
        table,
        cells: cells.len(),
        ran,
        skipped: cells.len() - ran,
        failed,
    })
}
