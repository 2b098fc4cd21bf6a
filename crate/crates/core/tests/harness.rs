use std::fs;
use std::path::Path;
use std::process::Command;

use fairexit::cli::{
    cmd_compare, cmd_dump_features, cmd_generate_data, cmd_probe, cmd_sweep, cmd_train, format_compare_table,
    format_probe_table, load_split_dir, ExperimentConfig,
};
use fairexit::dataset::{CsvSchema, DatasetSpec};
use fairexit::inference::theta_grid;
use fairexit::metrics::per_exit_report;
use fairexit::model::{ModelConfig, MultiExitNet, ProbeConfig};
use fairexit::prelude::{Bandwidth, FairnessMethod, LossWeights, TrainConfig};

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        n_train: 600,
        n_val: 200,
        n_test: 200,
        ..DatasetSpec::default()
    }
}

fn small_config(out: &Path, method: FairnessMethod) -> ExperimentConfig {
    ExperimentConfig {
        dataset: Some(small_spec()),
        model: ModelConfig {
            block_width: 12,
            head_hidden: 8,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: 3,
            weights: LossWeights::for_exits(4, 1.0),
            method,
            ..TrainConfig::default()
        },
        seeds: vec![0, 1],
        output_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn generated_csvs_load_back_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let split = cmd_generate_data(&small_spec(), dir.path()).unwrap();
    let header = fs::read_to_string(dir.path().join("train.csv")).unwrap();
    assert!(header.starts_with("f0,f1,f2,f3,f4,f5,f6,f7,target,sensitive\n"));
    let back = load_split_dir(dir.path(), CsvSchema { n_classes: 2, n_groups: 2 }).unwrap();
    assert_eq!(back, split);
}

#[test]
fn reruns_get_fresh_directories_with_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), FairnessMethod::Hsic { bandwidth: Bandwidth::Median });
    let a = cmd_train(&cfg).unwrap();
    let b = cmd_train(&cfg).unwrap();
    let hash = cfg.hash().unwrap();
    assert_eq!(a.run_dir, dir.path().join(&hash));
    assert_eq!(b.run_dir, dir.path().join(format!("{hash}.1")));
    assert_eq!(a.records.len(), 2);
    for f in ["config.toml", "records.jsonl", "report.txt", "seed-0/checkpoint.json", "seed-1/train_log.csv"] {
        assert_eq!(read(&a.run_dir.join(f)), read(&b.run_dir.join(f)), "{f} differs");
    }
    let saved = ExperimentConfig::load(a.run_dir.join("config.toml")).unwrap();
    assert_eq!(saved.hash().unwrap(), hash);
}

#[test]
fn distillation_runs_keep_the_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), FairnessMethod::MmdDistill { bandwidth: Bandwidth::Median });
    cfg.seeds = vec![4];
    let run = cmd_train(&cfg).unwrap();
    let teacher = MultiExitNet::load_checkpoint(run.run_dir.join("seed-4/teacher.json")).unwrap();
    let student = MultiExitNet::load_checkpoint(run.run_dir.join("seed-4/checkpoint.json")).unwrap();
    assert_ne!(teacher, student);
    assert_eq!(run.records[0].method, "mmd_distill");
}

#[test]
fn probe_rows_match_the_probed_network_and_leave_the_checkpoint_alone() {
    let dir = tempfile::tempdir().unwrap();
    let split = cmd_generate_data(&small_spec(), dir.path().join("data")).unwrap();
    let net = MultiExitNet::init(ModelConfig {
        input_dim: 8,
        block_width: 12,
        ..ModelConfig::default()
    })
    .unwrap();
    let ckpt = dir.path().join("net.json");
    net.save_checkpoint(&ckpt).unwrap();
    let before = read(&ckpt);
    let out = cmd_probe(&ckpt, &split, &ProbeConfig::default()).unwrap();
    assert_eq!(read(&ckpt), before);
    assert_eq!(out.layers.len(), 4);
    let reports = per_exit_report(&out.probed, &split.test, 2).unwrap();
    for (layer, r) in out.layers.iter().zip(&reports) {
        assert_eq!((layer.accuracy, layer.eo, layer.dp), (r.accuracy, r.eo, r.dp_gap));
    }
    let table = format_probe_table(&out);
    assert_eq!(table.lines().count(), 5);
    assert!(table.lines().nth(1).unwrap().starts_with("1\t"));
}

#[test]
fn sweep_endpoints_match_fixed_exits_and_include_the_default_theta() {
    let split = fairexit::dataset::generate_synthetic(&small_spec()).unwrap();
    let net = MultiExitNet::init(ModelConfig {
        input_dim: 8,
        ..ModelConfig::default()
    })
    .unwrap();
    let (rows, selected) = cmd_sweep(&net, &split, &theta_grid(21)).unwrap();
    assert_eq!(rows.len(), 21);
    assert!(selected.is_some());
    assert!(rows.iter().any(|r| r.theta == 0.85));
    let per_exit = per_exit_report(&net, &split.test, 2).unwrap();
    let first = &rows[0];
    assert_eq!((first.accuracy, first.eo), (per_exit[0].accuracy, per_exit[0].eo));
    // θ = 1 is reachable only by saturated softmax, which an untrained net never has.
    let last = rows.last().unwrap();
    assert_eq!((last.accuracy, last.eo), (per_exit[3].accuracy, per_exit[3].eo));
}

#[test]
fn compare_keeps_config_order_and_marks_missing_runs() {
    let dir = tempfile::tempdir().unwrap();
    let trained = small_config(dir.path(), FairnessMethod::None);
    cmd_train(&trained).unwrap();
    let mut untrained = small_config(dir.path(), FairnessMethod::Hsic { bandwidth: Bandwidth::Median });
    untrained.name = Some("never-run".into());
    let rows = cmd_compare(&[untrained.clone(), trained.clone(), trained.clone()]).unwrap();
    assert_eq!(rows[0].label, "never-run");
    assert_eq!(rows[0].recorded(), 0);
    assert_eq!(rows[1].early_exit(), rows[2].early_exit());
    assert_eq!(rows[1].recorded(), 2);
    let table = format_compare_table(&rows);
    assert!(table.lines().nth(1).unwrap().contains("missing"));
    assert!(cmd_compare(&[trained]).is_err());
}

#[test]
fn feature_dump_has_one_row_per_exit_and_instance() {
    let split = fairexit::dataset::generate_synthetic(&small_spec()).unwrap();
    let net = MultiExitNet::init(ModelConfig {
        input_dim: 8,
        block_width: 5,
        ..ModelConfig::default()
    })
    .unwrap();
    let mut buf = Vec::new();
    cmd_dump_features(&net, &split.test, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "exit\ttarget\tsensitive\tf0\tf1\tf2\tf3\tf4");
    assert_eq!(lines.count(), 4 * split.test.len());
}

#[test]
fn binary_reports_errors_with_nonzero_status() {
    let bin = env!("CARGO_BIN_EXE_fairexit");
    let dir = tempfile::tempdir().unwrap();
    let ok = Command::new(bin)
        .args(["generate-data", "--seed", "3", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(dir.path().join("test.csv").is_file());

    let bad = Command::new(bin)
        .args(["train", "--config", "/nonexistent/config.toml"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("fairexit: error:"));
}
