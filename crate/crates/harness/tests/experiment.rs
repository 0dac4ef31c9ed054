use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use evowarn::dataset::{split, DatasetFile};
use evowarn::{GameMatrix, Label, NetworkKind, NetworkSpec, SimParams};
use evowarn_harness::experiment::SimRecord;
use evowarn_harness::report::{read_table, write_report, UNDEFINED};
use evowarn_harness::{run_cell, run_experiment, ExperimentConfig, Figure, HarnessError};
use evowarn_nn::{ModelKind, TrainConfig};

fn small_config(dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        name: "small".into(),
        n: 20,
        w: vec![0.05, 0.5],
        ws: vec![5, 8],
        models: vec![ModelKind::TextCnn],
        runs_per_cell: 100,
        replicates: vec![1],
        hidden_size: Some(4),
        train: TrainConfig { max_epochs: 2, batch_size: 16, ..TrainConfig::default() },
        output_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn cell_params(w: f64, eta: f64, runs_seed: u64) -> SimParams {
    SimParams {
        game: GameMatrix::default(),
        w,
        eta,
        network: NetworkSpec::new(NetworkKind::Random, 100, 3),
        max_steps: evowarn::evodyn::DEFAULT_MAX_STEPS,
        seed: runs_seed,
    }
}

#[test]
fn grid_counts_cells_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (table, summary) = run_experiment(&small_config(dir.path())).unwrap();
    assert_eq!(table.metrics.len(), 8);
    let cells: BTreeSet<(u64, usize)> = table.metrics.iter().map(|r| (r.w.to_bits(), r.ws)).collect();
    assert_eq!(cells.len(), 4);
    assert_eq!(summary.jobs_trained, 4);
    for class in Label::ALL {
        assert_eq!(table.metrics.iter().filter(|r| r.positive_class == class).count(), 4);
    }
    for file in ["metrics.csv", "outcomes.csv", "aggregates.csv", "table.json"] {
        assert!(dir.path().join(file).exists(), "{file}");
    }
    assert_eq!(read_table(dir.path()).unwrap(), table);
}

#[test]
fn rerun_reuses_every_cell_and_reproduces_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let (first, _) = run_experiment(&config).unwrap();
    let csv = fs::read(dir.path().join("metrics.csv")).unwrap();
    let (second, summary) = run_experiment(&config).unwrap();
    assert_eq!(summary.cells_simulated + summary.jobs_trained, 0);
    assert_eq!(summary.cells_cached, 2);
    assert_eq!(first, second);
    assert_eq!(fs::read(dir.path().join("metrics.csv")).unwrap(), csv);
}

#[test]
fn separate_runs_give_identical_tables() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ta, _) = run_experiment(&small_config(a.path())).unwrap();
    let (tb, _) = run_experiment(&small_config(b.path())).unwrap();
    assert_eq!(ta, tb);
    for name in fs::read_dir(a.path().join("datasets")).unwrap() {
        let name = name.unwrap().file_name();
        assert_eq!(
            fs::read(a.path().join("datasets").join(&name)).unwrap(),
            fs::read(b.path().join("datasets").join(&name)).unwrap()
        );
    }
}

#[test]
fn n_test_matches_the_stratified_split() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let (table, _) = run_experiment(&config).unwrap();
    let mut checked = 0;
    for entry in fs::read_dir(dir.path().join("datasets")).unwrap() {
        let dataset = DatasetFile::read_jsonl(entry.unwrap().path()).unwrap();
        let (_, test) = split(&dataset, config.test_fraction, 0, true).unwrap();
        for row in table.metrics.iter().filter(|r| r.w == dataset.header.params.w && r.ws == dataset.header.ws) {
            assert_eq!(row.n_test, test.0.len());
            checked += 1;
        }
    }
    assert_eq!(checked, 8);
}

#[test]
fn stored_outcomes_recompute_to_the_emitted_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let (table, _) = run_experiment(&small_config(dir.path())).unwrap();
    let mut seen = 0;
    for entry in fs::read_dir(dir.path().join("sims")).unwrap() {
        let record: SimRecord = serde_json::from_str(&fs::read_to_string(entry.unwrap().path()).unwrap()).unwrap();
        assert_eq!(record.recompute().unwrap(), record.stats);
        assert!(table.outcomes.iter().any(|o| o.w == record.params.w && o.stats == record.stats));
        seen += 1;
    }
    assert_eq!(seen, 2);
}

#[test]
fn no_initial_defectors_means_certain_recovery() {
    let (dataset, stats) = run_cell(&cell_params(0.1, 0.0, 1), 100, 10, false).unwrap();
    assert_eq!(stats.p_collapse, 0.0);
    assert!(dataset.records.iter().all(|r| r.label == Label::Recovery));

    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig { eta: 0.0, w: vec![0.1], ..small_config(dir.path()) };
    let (table, _) = run_experiment(&config).unwrap();
    assert_eq!(table.metrics.len(), 4);
    for row in &table.metrics {
        assert_eq!((row.precision, row.recall, row.f1, row.accuracy), (None, None, None, None));
        assert_eq!(row.n_undefined, 4);
    }
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.contains(UNDEFINED)));
}

#[test]
fn run_cell_is_deterministic() {
    let p = cell_params(0.1, 0.1, 9);
    let (a, sa) = run_cell(&p, 100, 20, false).unwrap();
    let (b, sb) = run_cell(&p, 100, 20, false).unwrap();
    let (mut ba, mut bb) = (Vec::new(), Vec::new());
    a.write_to(&mut ba).unwrap();
    b.write_to(&mut bb).unwrap();
    assert_eq!(ba, bb);
    assert_eq!(sa, sb);
}

#[test]
fn weak_selection_rarely_collapses() {
    let (_, stats) = run_cell(&cell_params(0.001, 0.1, 4), 500, 30, false).unwrap();
    assert!(stats.p_collapse < 0.2, "{}", stats.p_collapse);
}

#[test]
fn figures_needing_absent_axes_name_them() {
    let dir = tempfile::tempdir().unwrap();
    let (table, _) = run_experiment(&small_config(dir.path())).unwrap();
    let err = write_report(dir.path(), &table, Figure::Fig8).unwrap_err();
    assert!(matches!(&err, HarnessError::MissingAxes { axes, .. } if axes.iter().any(|a| a == "network")));
    let path = write_report(dir.path(), &table, Figure::Fig6).unwrap();
    assert_eq!(fs::read_to_string(path).unwrap().lines().count(), 1 + 4);
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        count += 1;
    }
    assert!(count >= 4);
}
