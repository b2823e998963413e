use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use iib_core::envgen::io::save_dataset;
use iib_lab::config::{keys_help, ExperimentConfig, RawConfig};
use iib_lab::error::LabError;
use iib_lab::{data, grid, report, runs, sweep, verify};

const EXIT_USAGE: u8 = 1;
const EXIT_RUN: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "iib-lab", version, about = "Invariant information bottleneck experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write every seed's datasets in the IIBD format.
    Gen(Common),
    /// Train a single cell.
    Train(Common),
    /// Run every cell of the grid, skipping completed ones.
    Grid(Common),
    /// Vertical-line accuracy across B.
    Sweep(Common),
    /// Rank methods and show ablation deltas from existing run files.
    Report(Common),
    /// Run the oracle suites.
    Verify,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces grid.seeds.
    #[arg(long)]
    seed: Option<String>,
    /// Replaces grid.methods (comma separated).
    #[arg(long)]
    method: Option<String>,
    /// Replaces grid.lambdas (comma separated).
    #[arg(long)]
    lambda: Option<String>,
    /// Replaces grid.betas (comma separated).
    #[arg(long)]
    beta: Option<String>,
    /// Concurrent cells.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory; IIB_LAB_OUT takes precedence.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["train-domain", "leave-one-out"])]
    selection: Option<String>,
}

struct Setup {
    cfg: ExperimentConfig,
    out: PathBuf,
    jobs: usize,
}

fn setup(c: &Common) -> Result<Setup, LabError> {
    let mut raw = match &c.config {
        Some(p) => RawConfig::parse(&std::fs::read_to_string(p).map_err(|e| LabError::io(p, e))?)?,
        None => RawConfig::default(),
    };
    for (key, v) in [
        ("grid.seeds", &c.seed),
        ("grid.methods", &c.method),
        ("grid.lambdas", &c.lambda),
        ("grid.betas", &c.beta),
        ("train.selection", &c.selection),
    ] {
        if let Some(v) = v {
            raw.set(key, v)?;
        }
    }
    let cfg = raw.build()?;
    let out = std::env::var_os("IIB_LAB_OUT")
        .map(PathBuf::from)
        .or_else(|| c.out.clone())
        .unwrap_or_else(|| cfg.out_dir.clone());
    if c.jobs == 0 {
        return Err(LabError::Config("--jobs must be >= 1".into()));
    }
    Ok(Setup { cfg, out, jobs: c.jobs })
}

fn gen(s: &Setup) -> Result<(), LabError> {
    for &seed in &s.cfg.seeds {
        let d = data::build(&s.cfg.dataset, seed)?;
        let dir = s.out.join("data").join(s.cfg.dataset.name()).join(format!("seed{seed}"));
        std::fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
        for (e, ds) in d.train.iter().enumerate() {
            save_dataset(ds, &dir.join(format!("train{e}.iibd")))?;
        }
        for (name, ds) in &d.test {
            save_dataset(ds, &dir.join(format!("test_{name}.iibd")))?;
        }
        println!("{}", dir.display());
    }
    Ok(())
}

fn train(s: &Setup) -> Result<(), LabError> {
    let cells = runs::enumerate_cells(&s.cfg);
    if cells.len() != 1 {
        return Err(LabError::Config(format!(
            "train runs one cell but the config gives {}; pin --method, --lambda, --beta and --seed",
            cells.len()
        )));
    }
    let d = data::build(&cells[0].dataset, cells[0].seed)?;
    let summary = runs::run_cell(&s.out, &cells[0], &d)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("summaries serialize"));
    println!("{}", runs::run_path(&s.out, &cells[0].hash()).display());
    Ok(())
}

fn write_report(out: &Path, table: &grid::ResultsTable) -> Result<String, LabError> {
    let rep = report::report(table);
    let text = rep.to_text();
    runs::write_atomic(&out.join("report.txt"), text.as_bytes())?;
    runs::write_atomic(
        &out.join("report.json"),
        &serde_json::to_vec_pretty(&rep).expect("reports serialize"),
    )?;
    Ok(text)
}

fn run(command: Command) -> Result<(), (u8, LabError)> {
    let usage = |e: LabError| (EXIT_USAGE, e);
    let failure = |e: LabError| {
        let code = if matches!(e, LabError::Config(_)) { EXIT_USAGE } else { EXIT_RUN };
        (code, e)
    };
    match command {
        Command::Verify => {
            let verdicts = verify::run_all();
            for v in &verdicts {
                println!("{} {}: {}", if v.passed { "PASS" } else { "FAIL" }, v.name, v.detail);
            }
            let failed = verdicts.iter().filter(|v| !v.passed).count();
            if failed > 0 {
                return Err((EXIT_VERIFY, LabError::Run(format!("{failed} oracle suites failed"))));
            }
            Ok(())
        }
        Command::Gen(c) => gen(&setup(&c).map_err(usage)?).map_err(failure),
        Command::Train(c) => train(&setup(&c).map_err(usage)?).map_err(failure),
        Command::Grid(c) => {
            let s = setup(&c).map_err(usage)?;
            let outcome = grid::run_grid(&s.cfg, &s.out, s.jobs).map_err(failure)?;
            print!("{}", outcome.table.to_text());
            eprintln!(
                "{} cells: {} ran, {} skipped, {} failed",
                outcome.cells, outcome.ran, outcome.skipped, outcome.failed
            );
            if outcome.failed > 0 {
                return Err((
                    EXIT_RUN,
                    LabError::CellsFailed {
                        failed: outcome.failed,
                        total: outcome.cells,
                    },
                ));
            }
            Ok(())
        }
        Command::Sweep(c) => {
            let s = setup(&c).map_err(usage)?;
            let export = sweep::sweep_vertical_line(&s.cfg, &s.out, s.jobs).map_err(failure)?;
            print!("{}", export.to_tsv());
            Ok(())
        }
        Command::Report(c) => {
            let s = setup(&c).map_err(usage)?;
            let table = grid::collect(&s.out).map_err(failure)?;
            if table.rows.is_empty() {
                return Err((EXIT_RUN, LabError::Missing(format!("no run files under {}", s.out.display()))));
            }
            grid::write_table(&s.out, &table).map_err(failure)?;
            print!("{}", write_report(&s.out, &table).map_err(failure)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cmd = Cli::command().after_long_help(keys_help());
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, e)) => {
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}
