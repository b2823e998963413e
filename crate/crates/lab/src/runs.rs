//! Grid cells and their per-run files.
//!
//! A cell is `(dataset, objective, training config, seed)`. Its content hash
//! names every file it owns under `<out>/runs/`:
//!
//! - `<hash>.jsonl`: header, one line per iteration, one per checkpoint and a
//!   closing summary. Each line starts with `schema_version`.
//! - `<hash>.timing.json`: wall-clock seconds, kept apart so run files are
//!   reproducible byte for byte.
//! - `<hash>.iibp`: parameters at the selected checkpoint.
//! - `<hash>.failed.json`: written instead of the above when a run fails.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use iib_core::models::{read_params, write_params, Model, ModelConfig};
use iib_core::objectives::{LossBreakdown, Method, ObjectiveSpec};
use iib_core::trainer::{run_training, Checkpoint, RunOutput, Selection, TrainConfig, TrainData};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DatasetConfig, ExperimentConfig};
use crate::error::{LabError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub dataset: DatasetConfig,
    pub spec: ObjectiveSpec,
    /// Training options with `seed` left at 0; the run seed is derived from
    /// the hash.
    pub train: TrainConfig,
    /// Data seed.
    pub seed: u64,
}

impl Cell {
    fn digest(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("cells serialize");
        Sha256::digest(&bytes).into()
    }

    pub fn hash(&self) -> String {
        hex::encode(&self.digest()[..16])
    }

    pub fn train_seed(&self) -> u64 {
        let d = self.digest();
        u64::from_le_bytes(d[16..24].try_into().expect("8 bytes"))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.train_seed(),
            ..self.train.clone()
        }
    }
}

/// Every `(seed, method, λ, β)` combination, with duplicates removed after
/// unused weights are forced to zero.
pub fn enumerate_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut cells: Vec<Cell> = Vec::new();
    let train = TrainConfig {
        seed: 0,
        ..cfg.train.clone()
    };
    for &seed in &cfg.seeds {
        for &method in &cfg.methods {
            for &lambda in &cfg.lambdas {
                for &beta in &cfg.betas {
                    let mut spec = ObjectiveSpec::new(method, lambda, beta);
                    if matches!(method, Method::Irm | Method::IbIrm) {
                        spec = spec.with_anneal(cfg.irm_anneal_iters);
                    }
                    let cell = Cell {
                        dataset: cfg.dataset.clone(),
                        spec,
                        train: train.clone(),
                        seed,
                    };
                    if !cells.contains(&cell) {
                        cells.push(cell);
                    }
                }
            }
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub schema_version: u32,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    Header {
        hash: String,
        cell: Cell,
        test_names: Vec<String>,
    },
    Loss {
        iteration: usize,
        losses: LossBreakdown,
    },
    Checkpoint {
        checkpoint: Checkpoint,
    },
    Summary {
        summary: Summary,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub selection: Selection,
    pub selected_iteration: usize,
    pub validation_acc: f64,
    /// Mean over test environments.
    pub test_acc: f64,
    pub test: Vec<(String, f64)>,
    /// Majority minus minority validation accuracy, averaged over training
    /// environments that carry group tags.
    pub group_gap: Option<f64>,
    pub selected_leave_one_out: Option<usize>,
}

fn group_gap(c: &Checkpoint) -> Option<f64> {
    let gaps: Vec<f64> = c
        .validation
        .iter()
        .filter_map(|a| Some(a.majority? - a.minority?))
        .collect();
    (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64)
}

pub fn summarize(out: &RunOutput) -> Summary {
    let rec = &out.record;
    let c = rec.selected_checkpoint();
    let test: Vec<(String, f64)> = rec.test_names.iter().cloned().zip(c.test.iter().map(|t| t.acc)).collect();
    let test_acc = if test.is_empty() {
        f64::NAN
    } else {
        test.iter().map(|t| t.1).sum::<f64>() / test.len() as f64
    };
    Summary {
        selection: rec.selection,
        selected_iteration: c.iteration,
        validation_acc: match rec.selection {
            Selection::LeaveOneDomainOut => c.mean_fold_validation(),
            Selection::TrainingDomainValidation => c.mean_validation(),
        }
        .unwrap_or(f64::NAN),
        test_acc,
        test,
        group_gap: group_gap(c),
        selected_leave_one_out: rec.selected_leave_one_out,
    }
}

pub fn runs_dir(out: &Path) -> PathBuf {
    out.join("runs")
}

pub fn run_path(out: &Path, hash: &str) -> PathBuf {
    runs_dir(out).join(format!("{hash}.jsonl"))
}

pub fn model_path(out: &Path, hash: &str) -> PathBuf {
    runs_dir(out).join(format!("{hash}.iibp"))
}

pub fn failed_path(out: &Path, hash: &str) -> PathBuf {
    runs_dir(out).join(format!("{hash}.failed.json"))
}

pub fn timing_path(out: &Path, hash: &str) -> PathBuf {
    runs_dir(out).join(format!("{hash}.timing.json"))
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| LabError::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| LabError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
}

pub fn encode_run(cell: &Cell, out: &RunOutput) -> Vec<u8> {
    let mut buf = Vec::new();
    let mut push = |event: Event| {
        let line = Line {
            schema_version: SCHEMA_VERSION,
            event,
        };
        serde_json::to_writer(&mut buf, &line).expect("run lines serialize");
        buf.push(b'\n');
    };
    push(Event::Header {
        hash: cell.hash(),
        cell: cell.clone(),
        test_names: out.record.test_names.clone(),
    });
    for (t, losses) in out.record.losses.iter().enumerate() {
        push(Event::Loss {
            iteration: t + 1,
            losses: *losses,
        });
    }
    for c in &out.record.checkpoints {
        push(Event::Checkpoint { checkpoint: c.clone() });
    }
    push(Event::Summary {
        summary: summarize(out),
    });
    buf
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunFile {
    pub hash: String,
    pub cell: Cell,
    pub test_names: Vec<String>,
    pub losses: Vec<LossBreakdown>,
    pub checkpoints: Vec<Checkpoint>,
    pub summary: Option<Summary>,
}

pub fn read_run(path: &Path) -> Result<RunFile> {
    let f = fs::File::open(path).map_err(|e| LabError::io(path, e))?;
    let bad = |reason: String| LabError::RunFile {
        path: path.to_path_buf(),
        reason,
    };
    let mut run: Option<RunFile> = None;
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        let parsed: Line = serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
        if parsed.schema_version != SCHEMA_VERSION {
            return Err(bad(format!("schema version {}", parsed.schema_version)));
        }
        match (parsed.event, run.as_mut()) {
            (Event::Header { hash, cell, test_names }, None) => {
                run = Some(RunFile {
                    hash,
                    cell,
                    test_names,
                    losses: Vec::new(),
                    checkpoints: Vec::new(),
                    summary: None,
                })
            }
            (Event::Header { .. }, Some(_)) => return Err(bad("second header".into())),
            (_, None) => return Err(bad("first line is not a header".into())),
            (_, Some(r)) if r.summary.is_some() => return Err(bad("lines after the summary".into())),
            (Event::Loss { losses, .. }, Some(r)) => r.losses.push(losses),
            (Event::Checkpoint { checkpoint }, Some(r)) => r.checkpoints.push(checkpoint),
            (Event::Summary { summary }, Some(r)) => r.summary = Some(summary),
        }
    }
    run.ok_or_else(|| bad("empty file".into()))
}

/// The cell named by a run file's first line, if that line is intact.
pub fn read_header(path: &Path) -> Option<Cell> {
    let f = fs::File::open(path).ok()?;
    let first = BufReader::new(f).lines().next()?.ok()?;
    match serde_json::from_str::<Line>(&first).ok()?.event {
        Event::Header { cell, .. } => Some(cell),
        _ => None,
    }
}

/// A run counts as complete once its file parses through the summary.
pub fn is_complete(out: &Path, cell: &Cell) -> bool {
    read_run(&run_path(out, &cell.hash()))
        .map(|r| r.summary.is_some() && r.cell == *cell)
        .unwrap_or(false)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub schema_version: u32,
    pub hash: String,
    pub cell: Cell,
    pub error: String,
}

pub fn read_failure(path: &Path) -> Result<FailureRecord> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| LabError::RunFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Timing {
    wall_clock_secs: f64,
}

/// Model shape a cell's training builds.
pub fn model_config(cell: &Cell, data: &TrainData) -> Result<ModelConfig> {
    let first = data
        .train
        .first()
        .ok_or_else(|| LabError::Config("dataset has no training environments".into()))?;
    Ok(ModelConfig::from_arch(
        &cell.train.arch,
        first.input_dim(),
        first.n_classes,
        data.train.len(),
        cell.spec.method == Method::DomainAdv,
    ))
}

pub fn load_model(out: &Path, cell: &Cell, data: &TrainData) -> Result<Model> {
    let path = model_path(out, &cell.hash());
    let f = fs::File::open(&path).map_err(|e| LabError::io(&path, e))?;
    let params = read_params(BufReader::new(f))?;
    let mut model = Model::init(model_config(cell, data)?, 0)?;
    model.load_params(params)?;
    Ok(model)
}

/// Trains one cell and persists its files; failures become a failure record
/// and an `Err`.
pub fn run_cell(out: &Path, cell: &Cell, data: &TrainData) -> Result<Summary> {
    let hash = cell.hash();
    let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        run_training(data, &cell.spec, &cell.train_config())
    }));
    let output = match result {
        Ok(Ok(o)) => o,
        Ok(Err(e)) => return Err(record_failure(out, cell, e.to_string())),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            return Err(record_failure(out, cell, format!("panicked: {msg}")));
        }
    };
    let mut params = Vec::new();
    write_params(&output.model.params, &mut params)?;
    write_atomic(&model_path(out, &hash), &params)?;
    let timing = serde_json::to_vec(&Timing {
        wall_clock_secs: output.record.wall_clock_secs,
    })
    .expect("timing serializes");
    write_atomic(&timing_path(out, &hash), &timing)?;
    write_atomic(&run_path(out, &hash), &encode_run(cell, &output))?;
    let failed = failed_path(out, &hash);
    if failed.exists() {
        fs::remove_file(&failed).map_err(|e| LabError::io(&failed, e))?;
    }
    Ok(summarize(&output))
}

pub fn record_failure(out: &Path, cell: &Cell, error: String) -> LabError {
    let hash = cell.hash();
    let rec = FailureRecord {
        schema_version: SCHEMA_VERSION,
        hash: hash.clone(),
        cell: cell.clone(),
        error: error.clone(),
    };
    let bytes = serde_json::to_vec_pretty(&rec).expect("failure records serialize");
    if let Err(e) = write_atomic(&failed_path(out, &hash), &bytes) {
        return e;
    }
    LabError::Run(format!("cell {hash} failed: {error}"))
}
