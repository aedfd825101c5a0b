//! End-to-end checks of the experiment pipeline and the command-line
//! binary: determinism, stream-exposure accounting, artifact layout, and
//! process exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

use rainbow::harness::{
    load_data, run_experiment, AugmentChoice, DatasetKind, ExperimentConfig, Mode,
};
use rainbow::memory::Strategy;
use rainbow::stream::Setup;

/// A synthetic configuration small enough to run in seconds but large
/// enough (hidden width, memory size) that the optimizer stays stable.
/// Reference checkpoints go to a temp directory so in-process runs never
/// drop cache files into the repository.
fn base_cfg() -> ExperimentConfig {
    let cache = std::env::temp_dir().join("rainbow_pipeline_cache");
    std::fs::create_dir_all(&cache).unwrap();
    ExperimentConfig {
        cache_dir: Some(cache),
        dataset: DatasetKind::Synthetic,
        setup: Setup::Blurry { minor_percent: 10 },
        mode: Mode::Online,
        task_count: 2,
        memory_size: 60,
        strategy: Strategy::Rainbow,
        augment: AugmentChoice::None,
        epochs: Some(2),
        seeds: vec![1],
        draws: 6,
        hidden_dim: 32,
        upper_epochs: 2,
        synthetic_classes: 4,
        synthetic_samples: 125,
        synthetic_dim: 16,
        ..ExperimentConfig::default()
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_rainbow")
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rainbow_pipeline_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const SYNTH_CFG: &str = "\
dataset=synthetic\n\
setup=blurry10\n\
mode=online\n\
task_count=2\n\
memory_size=60\n\
strategy=rainbow\n\
augment=none\n\
epochs=2\n\
draws=6\n\
hidden_dim=32\n\
upper_epochs=2\n\
synthetic_classes=4\n\
synthetic_samples=125\n\
synthetic_dim=16\n\
seeds=1\n";

#[test]
fn rerun_of_same_seed_reproduces_every_number() {
    let cfg = base_cfg();
    let data = load_data(&cfg).unwrap();
    let a = run_experiment(&cfg, &data, 7, None).unwrap();
    let b = run_experiment(&cfg, &data, 7, None).unwrap();
    assert_eq!(a.matrix.rows(), b.matrix.rows());
    assert_eq!(a.matrix.global(), b.matrix.global());
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.report.final_accuracy, b.report.final_accuracy);
    assert_eq!(a.report.forgetting, b.report.forgetting);
    assert_eq!(a.report.intransigence, b.report.intransigence);

    let c = run_experiment(&cfg, &data, 8, None).unwrap();
    assert_ne!(a.losses, c.losses, "different seeds must differ");
}

#[test]
fn online_run_exposes_each_stream_sample_exactly_once() {
    let cfg = base_cfg();
    let data = load_data(&cfg).unwrap();
    let out = run_experiment(&cfg, &data, 3, None).unwrap();
    assert_eq!(out.exposures.len(), data.train.len());
    assert!(out.exposures.values().all(|&n| n == 1));
}

#[test]
fn matrix_is_lower_triangular_with_percent_entries() {
    let cfg = base_cfg();
    let data = load_data(&cfg).unwrap();
    let out = run_experiment(&cfg, &data, 5, None).unwrap();
    let rows = out.matrix.rows();
    assert_eq!(rows.len(), cfg.task_count);
    for (t, row) in rows.iter().enumerate() {
        assert_eq!(row.len(), t + 1);
        assert!(row.iter().all(|&a| (0.0..=100.0).contains(&a)));
    }
    assert_eq!(out.matrix.global().len(), cfg.task_count);
    assert_eq!(out.memory_snapshots.len(), cfg.task_count);
}

#[test]
fn zero_memory_epochs_and_no_replay_still_complete() {
    let mut cfg = base_cfg();
    cfg.epochs = Some(0);
    cfg.stream_replay = false;
    let data = load_data(&cfg).unwrap();
    let out = run_experiment(&cfg, &data, 2, None).unwrap();
    assert!(out.matrix.is_complete());
    assert!(out.exposures.values().all(|&n| n == 1));
}

#[test]
fn offline_augmented_run_produces_finite_losses() {
    let mut cfg = base_cfg();
    cfg.mode = Mode::Offline;
    cfg.epochs = Some(2);
    cfg.augment = AugmentChoice::Both;
    cfg.strategy = Strategy::Reservoir;
    let data = load_data(&cfg).unwrap();
    let out = run_experiment(&cfg, &data, 4, None).unwrap();
    assert!(out.matrix.is_complete());
    assert!(out.losses.iter().all(|l| l.is_finite()));
}

#[test]
fn binary_writes_artifacts_and_honors_overrides() {
    let dir = tmpdir("artifacts");
    let cfg_path = write_cfg(&dir, "run.cfg", SYNTH_CFG);
    let out_dir = dir.join("out");
    let status = Command::new(bin())
        .args(["run", "--config"])
        .arg(&cfg_path)
        .args(["--memory-size", "64"])
        .arg("--out")
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(status.success());

    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(lines.next().unwrap(), "seed,setup,mode,strategy,augment,K,A,F,I");
    let first = lines.next().unwrap();
    let cols: Vec<&str> = first.split(',').collect();
    assert_eq!(cols[0], "1");
    assert_eq!(cols[5], "64", "command-line override must beat the file value");

    let matrix = std::fs::read_to_string(out_dir.join("seed_1").join("matrix.csv")).unwrap();
    assert!(matrix.starts_with("task_trained,task_evaluated,accuracy\n"));
    assert_eq!(matrix.lines().count(), 1 + 3, "2 tasks -> 3 lower-triangle rows");

    let svg = std::fs::read_to_string(out_dir.join("trajectory.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<polyline").count(), 1);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn binary_exit_codes_separate_config_and_runtime_failures() {
    let dir = tmpdir("exits");
    let good = write_cfg(&dir, "good.cfg", SYNTH_CFG);
    let typo = write_cfg(&dir, "typo.cfg", &format!("{SYNTH_CFG}memroy_size=10\n"));

    // Unknown config key -> exit 2, message names the key.
    let out = Command::new(bin()).args(["run", "--config"]).arg(&typo).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("memroy_size"), "stderr must name the bad key: {err}");

    // Invalid value through an override -> exit 2.
    let out = Command::new(bin())
        .args(["run", "--config"])
        .arg(&good)
        .args(["--setup", "blurry200"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Missing config file -> runtime failure, exit 1.
    let out = Command::new(bin())
        .args(["run", "--config"])
        .arg(dir.join("absent.cfg"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // Bad command-line usage -> clap's native exit 2.
    let out = Command::new(bin()).args(["run", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    std::fs::remove_dir_all(&dir).unwrap();
}
