//! Vertical-line accuracy as a function of the test offset `B`.

use std::path::Path;

use iib_core::objectives::Method;
use iib_core::parallel::Execution;
use iib_core::trainer::evaluate;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, ExperimentConfig};
use crate::data;
use crate::error::{LabError, Result};
use crate::grid::{self, Stats};
use crate::runs::{self, Cell};

pub const SWEEP_B: [f64; 5] = [-4.0, -2.0, 0.0, 2.0, 4.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedPoint {
    pub method: Method,
    pub lambda: f64,
    pub beta: f64,
    pub seed: u64,
    pub b: f64,
    pub accuracy: f64,
}

/// One long-format row: median over seeds at one `B`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub lambda: f64,
    pub beta: f64,
    pub b: f64,
    pub median: f64,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepExport {
    pub rows: Vec<SweepRow>,
    pub points: Vec<SeedPoint>,
}

impl SweepExport {
    /// Best minus worst median accuracy across `B`.
    pub fn drop(&self, method: Method, lambda: f64, beta: f64) -> Option<f64> {
        let curve: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.lambda == lambda && r.beta == beta)
            .map(|r| r.median)
            .collect();
        if curve.is_empty() {
            return None;
        }
        let hi = curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = curve.iter().copied().fold(f64::INFINITY, f64::min);
        Some(hi - lo)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("method\tlambda\tbeta\tB\tmedian\tmean\tstd\tseeds\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}\n",
                r.method, r.lambda, r.beta, r.b, r.median, r.mean, r.std, r.seeds
            ));
        }
        out
    }
}

pub const SWEEP_JSON: &str = "sweep_vertical_line.json";
pub const SWEEP_TEXT: &str = "sweep_vertical_line.tsv";

/// Evaluates the selected model of every cell at each `B` in [`SWEEP_B`].
///
/// Cells without a saved model are trained first when
/// `cfg.sweep_train_inline` is set, otherwise the sweep fails.
pub fn sweep_vertical_line(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<SweepExport> {
    if !matches!(cfg.dataset, DatasetConfig::VerticalLine { .. }) {
        return Err(LabError::Config(format!(
            "sweep needs dataset.name = vertical_line, got {}",
            cfg.dataset.name()
        )));
    }
    let cells = runs::enumerate_cells(cfg);
    let missing: Vec<Cell> = cells
        .iter()
        .filter(|c| !runs::model_path(out, &c.hash()).exists() || !runs::is_complete(out, c))
        .cloned()
        .collect();
    if !missing.is_empty() {
        if !cfg.sweep_train_inline {
            return Err(LabError::Missing(format!(
                "{} of {} checkpoints missing (first: {}) and sweep.train_inline = false",
                missing.len(),
                cells.len(),
                runs::model_path(out, &missing[0].hash()).display()
            )));
        }
        let (_, failed) = grid::run_cells(out, &missing, jobs, true)?;
        if failed > 0 {
            return Err(LabError::CellsFailed {
                failed,
                total: missing.len(),
            });
        }
        grid::write_table(out, &grid::collect(out)?)?;
    }
    let mut points = Vec::new();
    for c in &cells {
        let train = data::build(&cfg.dataset, c.seed)?;
        let model = runs::load_model(out, c, &train)?;
        for &b in &SWEEP_B {
            let ds = data::vertical_line_test(&cfg.dataset, b, c.seed)?;
            let acc = evaluate(&model, &ds, Execution::Sequential, None)?.acc;
            points.push(SeedPoint {
                method: c.spec.method,
                lambda: c.spec.lambda,
                beta: c.spec.beta,
                seed: c.seed,
                b,
                accuracy: acc,
            });
        }
    }
    let mut rows = Vec::new();
    let mut keys: Vec<(Method, u64, u64)> = points
        .iter()
        .map(|p| (p.method, p.lambda.to_bits(), p.beta.to_bits()))
        .collect();
    keys.sort();
    keys.dedup();
    for (method, l, bt) in keys {
        for &b in &SWEEP_B {
            let accs: Vec<f64> = points
                .iter()
                .filter(|p| p.method == method && p.lambda.to_bits() == l && p.beta.to_bits() == bt && p.b == b)
                .map(|p| p.accuracy)
                .collect();
            let s = Stats::of(&accs).expect("one point per seed");
            rows.push(SweepRow {
                method,
                lambda: f64::from_bits(l),
                beta: f64::from_bits(bt),
                b,
                median: s.median,
                mean: s.mean,
                std: s.std,
                seeds: accs.len(),
            });
        }
    }
    let export = SweepExport { rows, points };
    let json = serde_json::to_vec_pretty(&export).expect("sweeps serialize");
    runs::write_atomic(&out.join(SWEEP_JSON), &json)?;
    runs::write_atomic(&out.join(SWEEP_TEXT), export.to_tsv().as_bytes())?;
    Ok(export)
}
