//! Command-level tests over temp directories: artifact layout, determinism
//! of the generators, baseline equivalences, and the binary's exit codes.

use std::fs;
use std::path::Path;
use std::process::Command;

use cil_core::model::{Activation, ModelConfig};
use cil_lab::commands::{
    cmd_ablate, cmd_analyze, cmd_generate, cmd_train, parse_sweep_axis,
};
use cil_lab::config::{CsvPaths, ExperimentConfig, SyntheticSpec};
use cil_lab::runner::resume_one;

/// Benchmark scaled down to seconds: 8 classes, three tasks of 4+2+2.
fn small_cfg() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.synthetic = Some(SyntheticSpec {
        n_classes: 8,
        dim: 8,
        n_train_per_class: 40,
        n_test_per_class: 20,
        noise_sigma: 0.2,
        data_seed: 7,
        collisions: vec![],
    });
    cfg.model = ModelConfig {
        input_dim: 8,
        hidden_dims: vec![16],
        feature_dim: 8,
        activation: Activation::Relu,
    };
    cfg.split.base_size = 4;
    cfg.split.increment = 2;
    cfg.train.epochs_per_task = 8;
    cfg.train.batch_size = 32;
    cfg.exemplars_per_class = 4;
    cfg.replicate_seeds = vec![0, 1];
    cfg.ablation_replicates = 1;
    cfg.analysis.permutations = 200;
    cfg
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn generate_is_deterministic() {
    let cfg = small_cfg();
    let dir = tempfile::tempdir().unwrap();
    let a = cmd_generate(&cfg, &dir.path().join("a")).unwrap();
    let b = cmd_generate(&cfg, &dir.path().join("b")).unwrap();
    for (pa, pb) in [
        (&a.train_csv, &b.train_csv),
        (&a.test_csv, &b.test_csv),
        (&a.prototypes_json, &b.prototypes_json),
        (&a.collision_audit_csv, &b.collision_audit_csv),
    ] {
        assert_eq!(read(pa), read(pb), "{} differs", pa.display());
    }
}

#[test]
fn generated_csv_reloads_bit_exact() {
    let cfg = small_cfg();
    let dir = tempfile::tempdir().unwrap();
    let paths = cmd_generate(&cfg, dir.path()).unwrap();
    let direct = cil_lab::runner::build_dataset(&cfg).unwrap();

    let mut from_csv = cfg.clone();
    from_csv.data.synthetic = None;
    from_csv.data.csv = Some(CsvPaths {
        train: paths.train_csv,
        test: paths.test_csv,
    });
    let reloaded = cil_lab::runner::build_dataset(&from_csv).unwrap();
    assert_eq!(direct.train, reloaded.train);
    assert_eq!(direct.test, reloaded.test);
}

#[test]
fn train_artifacts_and_summary_math() {
    let cfg = small_cfg();
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_train(&cfg, dir.path(), false).unwrap();
    for seed in [0u64, 1] {
        let sd = dir.path().join(format!("seed-{seed}"));
        for f in ["bundle.json", "profile_max.csv", "profile_mean.csv"] {
            assert!(sd.join(f).is_file(), "missing seed-{seed}/{f}");
        }
    }
    assert!(dir.path().join("config.json").is_file());
    assert!(dir.path().join("summary.json").is_file());
    let hand = out
        .bundles
        .iter()
        .map(|b| b.avg_incremental_accuracy)
        .sum::<f64>()
        / out.bundles.len() as f64;
    assert!((out.summary.avg_incremental_accuracy.mean - hand).abs() <= 1e-15);
    let csv = String::from_utf8(read(&dir.path().join("summary.csv"))).unwrap();
    // Header plus one row per seed.
    assert_eq!(csv.lines().count(), 1 + cfg.replicate_seeds.len());
}

#[test]
fn eta_zero_emits_naive_metrics_byte_for_byte() {
    let mut with_rd_off = small_cfg();
    with_rd_off.train.eta = 0.0;
    with_rd_off.train.proportion = 0.4;
    let mut naive = small_cfg();
    naive.train.eta = 0.0;

    let dir = tempfile::tempdir().unwrap();
    cmd_train(&with_rd_off, &dir.path().join("a"), false).unwrap();
    cmd_train(&naive, &dir.path().join("b"), false).unwrap();
    let metric_files = [
        "seed-0/profile_max.csv",
        "seed-0/profile_mean.csv",
        "seed-1/profile_max.csv",
        "seed-1/profile_mean.csv",
        "summary.csv",
    ];
    for f in metric_files {
        assert_eq!(
            read(&dir.path().join("a").join(f)),
            read(&dir.path().join("b").join(f)),
            "{f} differs between η=0 and naive"
        );
    }
}

#[test]
fn ablate_covers_the_requested_grid() {
    let mut cfg = small_cfg();
    cfg.train.epochs_per_task = 4;
    let dir = tempfile::tempdir().unwrap();
    let table = cmd_ablate(&cfg, parse_sweep_axis("eta").unwrap(), dir.path()).unwrap();
    assert_eq!(table.axis, "eta");
    assert_eq!(table.seeds, vec![0]);
    let values: Vec<f64> = table.rows.iter().map(|r| r.value).collect();
    assert_eq!(values, vec![1.0, 2.0, 4.0, 8.0]);
    assert!(dir.path().join("ablate-eta.csv").is_file());
    assert!(dir.path().join("ablate-eta.json").is_file());
}

#[test]
fn analyze_is_idempotent_over_a_train_dir() {
    let cfg = small_cfg();
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&cfg, dir.path(), false).unwrap();
    cmd_analyze(dir.path()).unwrap();
    let first = read(&dir.path().join("seed-0").join("profile_max.csv"));
    let pooled_first = dir.path().join("pooled_correlation_max.json");
    let pooled_bytes = pooled_first.is_file().then(|| read(&pooled_first));
    cmd_analyze(dir.path()).unwrap();
    assert_eq!(first, read(&dir.path().join("seed-0").join("profile_max.csv")));
    if let Some(bytes) = pooled_bytes {
        assert_eq!(bytes, read(&pooled_first));
    }
}

#[test]
fn resume_reproduces_the_straight_run() {
    let mut cfg = small_cfg();
    cfg.replicate_seeds = vec![0];
    let dir = tempfile::tempdir().unwrap();
    let straight = cmd_train(&cfg, dir.path(), true).unwrap();
    let cp = dir.path().join("seed-0").join("checkpoint-task-1.json");
    assert!(cp.is_file(), "checkpointed run left no task-1 checkpoint");
    let resumed = resume_one(&cfg, &cp).unwrap();
    assert_eq!(
        straight.bundles[0].canonical_json().unwrap(),
        resumed.canonical_json().unwrap()
    );
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cil-lab"))
}

#[test]
fn malformed_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"data\": {\"synthetic\": {\"n_classes\": }}}").unwrap();
    let st = bin()
        .args(["train", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(cil_lab::EXIT_CONFIG));
}

#[test]
fn missing_config_exits_with_runtime_code() {
    let dir = tempfile::tempdir().unwrap();
    let st = bin()
        .args(["train", "--config"])
        .arg(dir.path().join("nope.json"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(cil_lab::EXIT_RUNTIME));
}

#[test]
fn divergence_exits_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_cfg();
    cfg.replicate_seeds = vec![0];
    cfg.train.lr = 1e9;
    cfg.train.epochs_per_task = 2;
    let path = dir.path().join("diverge.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let st = bin()
        .args(["train", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(cil_lab::EXIT_NUMERICAL));
}
