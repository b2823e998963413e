mod common;

use std::fs;

use iib_core::objectives::Method;
use iib_lab::grid::{collect, run_grid, ResultsTable, RESULTS_JSON};
use iib_lab::runs::{enumerate_cells, failed_path, read_run, run_path, runs_dir};

#[test]
fn two_methods_three_seeds_give_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny("grid.methods = ERM, IIB\ngrid.seeds = 0, 1, 2");
    let outcome = run_grid(&cfg, dir.path(), 2).unwrap();
    assert_eq!((outcome.cells, outcome.ran, outcome.failed), (6, 6, 0));
    assert_eq!(outcome.table.rows.len(), 6);
    assert!(outcome.table.rows.iter().all(|r| r.failed.is_none() && r.test.is_some()));
    let erm = outcome.table.aggregate("cs_cmnist", Method::Erm, 0.0, 0.0).unwrap();
    assert_eq!(erm.runs, 3);
    let on_disk: ResultsTable = serde_json::from_slice(&fs::read(dir.path().join(RESULTS_JSON)).unwrap()).unwrap();
    assert_eq!(on_disk, outcome.table);
}

#[test]
fn resuming_recomputes_only_deleted_cells() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny("grid.methods = ERM, IIB\ngrid.seeds = 0, 1");
    run_grid(&cfg, dir.path(), 1).unwrap();
    let cells = enumerate_cells(&cfg);
    let victim = run_path(dir.path(), &cells[1].hash());
    let before = fs::read(&victim).unwrap();
    let untouched = run_path(dir.path(), &cells[0].hash());
    let mtime = fs::metadata(&untouched).unwrap().modified().unwrap();
    fs::remove_file(&victim).unwrap();

    let again = run_grid(&cfg, dir.path(), 1).unwrap();
    assert_eq!((again.ran, again.skipped), (1, 3));
    assert_eq!(fs::read(&victim).unwrap(), before);
    assert_eq!(fs::metadata(&untouched).unwrap().modified().unwrap(), mtime);
}

#[test]
fn failures_become_flagged_rows() {
    let dir = tempfile::tempdir().unwrap();
    let good = common::tiny("grid.methods = ERM\ngrid.seeds = 0, 1");
    run_grid(&good, dir.path(), 1).unwrap();
    // Generation rejects a probability above 1; the grid continues past it.
    let bad = common::tiny("grid.methods = ERM, IIB\ngrid.seeds = 0\ncs_cmnist.train_p = 1.0, 1.5");
    let outcome = run_grid(&bad, dir.path(), 1).unwrap();
    assert_eq!((outcome.cells, outcome.failed), (2, 2));
    for c in enumerate_cells(&bad) {
        assert!(failed_path(dir.path(), &c.hash()).exists());
    }
    // A truncated run file is also reported rather than fatal.
    let victim = run_path(dir.path(), &enumerate_cells(&good)[1].hash());
    let text = fs::read_to_string(&victim).unwrap();
    fs::write(&victim, &text[..text.len() / 2]).unwrap();

    let table = collect(dir.path()).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert_eq!(table.rows.iter().filter(|r| r.failed.is_some()).count(), 3);
    let erm = table.aggregate("cs_cmnist", Method::Erm, 0.0, 0.0).unwrap();
    assert_eq!((erm.runs, erm.failed), (1, 2));
    assert!(table.to_text().lines().count() > 1);
}

#[test]
fn table_is_a_function_of_the_run_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny("grid.methods = ERM, IB_ERM\ngrid.seeds = 3, 4");
    let outcome = run_grid(&cfg, dir.path(), 1).unwrap();

    let copy = tempfile::tempdir().unwrap();
    fs::create_dir_all(runs_dir(copy.path())).unwrap();
    for entry in fs::read_dir(runs_dir(dir.path())).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "jsonl") {
            fs::copy(&p, runs_dir(copy.path()).join(p.file_name().unwrap())).unwrap();
        }
    }
    assert_eq!(collect(copy.path()).unwrap(), outcome.table);
}

#[test]
fn run_files_start_every_line_with_the_schema_version() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny("grid.methods = IIB\ngrid.seeds = 0");
    run_grid(&cfg, dir.path(), 1).unwrap();
    let cell = &enumerate_cells(&cfg)[0];
    let path = run_path(dir.path(), &cell.hash());
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.lines().all(|l| l.starts_with("{\"schema_version\":1,")));
    let run = read_run(&path).unwrap();
    assert_eq!(run.cell, *cell);
    assert_eq!(run.losses.len(), cell.train.iterations);
    assert!(run.summary.is_some());
}

#[test]
fn garbage_run_files_are_flagged_by_name() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(runs_dir(dir.path())).unwrap();
    fs::write(runs_dir(dir.path()).join("deadbeef.jsonl"), "not json\n").unwrap();
    let table = collect(dir.path()).unwrap();
    assert_eq!(table.rows.len(), 1);
    assert_eq!(table.rows[0].hash, "deadbeef");
    assert!(table.rows[0].failed.as_deref().unwrap().contains("line 1"));
}
