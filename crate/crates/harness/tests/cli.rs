use std::process::Command;

use lns_core::data::DatasetSpec;
use lns_core::nn::QuantSet;
use lns_core::optim::Algorithm;
use lns_core::trainer::{train, TrainConfig};
use lns_harness::commands::{cmd_base_factor_sweep, cmd_qu_bitwidth_sweep, cmd_tally_report, select_gamma};
use lns_harness::config::{BaseFactorSweep, OptimizerCandidates, QuBitwidthSweep, TallyWorkload};
use lns_harness::report::BaseFactorRow;
use lns_harness::{run, CommandResult, ExperimentConfig, Task, SCHEMA_VERSION};

const ALL_TASKS: [Task; 6] = [
    Task::Train,
    Task::BaseFactorSweep,
    Task::QuBitwidthSweep,
    Task::TheoremCheck,
    Task::DatapathConformance,
    Task::TallyReport,
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lns-madam"))
}

fn small_train() -> TrainConfig {
    TrainConfig {
        dataset: DatasetSpec::Digits { samples: 600, noise: 0.1 },
        test_samples: 100,
        steps: 40,
        batch_size: 16,
        ..TrainConfig::lns_preset()
    }
}

#[test]
fn config_round_trips_through_toml() {
    for task in ALL_TASKS {
        let mut cfg = ExperimentConfig::preset(task);
        cfg.seed = Some(11);
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg, "{text}");
    }
}

#[test]
fn shipped_configs_load() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        n += 1;
    }
    assert_eq!(n, 3);
    let fp =
        ExperimentConfig::load(&std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/full_precision.toml"))
            .unwrap();
    assert_eq!(fp.train, TrainConfig { seed: 0, ..TrainConfig::full_precision() });
}

#[test]
fn full_precision_preset_round_trips() {
    let mut cfg = ExperimentConfig::preset(Task::Train);
    cfg.train = TrainConfig::full_precision();
    assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
}

#[test]
fn minimal_config_uses_headline_defaults() {
    let cfg = ExperimentConfig::from_toml("task = \"train\"").unwrap();
    assert_eq!(cfg, ExperimentConfig::preset(Task::Train));
    assert_eq!(cfg.train.optimizer.algorithm, Algorithm::Madam);
    assert_eq!(cfg.train.optimizer.eta, 2f64.powi(-7));
    assert_eq!(cfg.train.quantizers, QuantSet::lns(lns_core::trainer::lns8()));
}

#[test]
fn unknown_fields_are_rejected() {
    assert!(ExperimentConfig::from_toml("task = \"train\"\ncolour = 3").is_err());
    let mut cfg = ExperimentConfig::preset(Task::Train).to_toml().unwrap();
    cfg = cfg.replacen("[train]", "[train]\nlearning_rate = 0.1", 1);
    let err = ExperimentConfig::from_toml(&cfg).unwrap_err().to_string();
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn validation_messages_are_pointed() {
    let mut cfg = ExperimentConfig::preset(Task::BaseFactorSweep);
    cfg.base_factor.gammas.clear();
    assert!(cfg.validate().unwrap_err().to_string().contains("grid is empty"));

    let mut cfg = ExperimentConfig::preset(Task::QuBitwidthSweep);
    cfg.qu_sweep.bitwidths = vec![16, 6];
    assert!(cfg.validate().unwrap_err().to_string().contains("below the forward weight bitwidth"));

    let mut cfg = ExperimentConfig::preset(Task::Train);
    cfg.train.batch_size = 0;
    assert!(cfg.validate().unwrap_err().to_string().contains("batch_size"));
}

#[test]
fn reports_are_reproducible() {
    let mut cfg = ExperimentConfig::preset(Task::Train);
    cfg.train = small_train();
    cfg.seed = Some(5);
    let a = run(&cfg, None).unwrap();
    let b = run(&cfg, None).unwrap();
    assert_eq!(a.schema, SCHEMA_VERSION);
    assert!(a.passed);
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    cfg.seed = Some(6);
    assert_ne!(a.to_json().unwrap(), run(&cfg, None).unwrap().to_json().unwrap());
}

#[test]
fn zero_steps_report_initial_metrics_only() {
    let mut cfg = ExperimentConfig::preset(Task::Train);
    cfg.train = TrainConfig { steps: 0, ..small_train() };
    let CommandResult::Train(r) = run(&cfg, None).unwrap().result else { panic!("wrong result kind") };
    assert!(r.history.is_empty());
    assert_eq!(r.final_metrics.step, 0);
}

#[test]
fn full_precision_learns_separable_blobs() {
    let cfg = TrainConfig {
        dataset: DatasetSpec::Blobs { samples: 1000, separation: 6.0 },
        test_samples: 200,
        steps: 500,
        batch_size: 32,
        ..TrainConfig::full_precision()
    };
    let r = train(&cfg).unwrap();
    assert!(r.final_metrics.train_accuracy >= 0.99, "{:?}", r.final_metrics);
}

#[test]
fn base_factor_selection_prefers_smallest_on_ties() {
    let row = |gamma, acc| BaseFactorRow { gamma, test_accuracies: vec![acc], median_test_accuracy: acc };
    assert_eq!(select_gamma(&[row(2, 0.5), row(4, 0.7), row(8, 0.7)]), 4);
    assert_eq!(select_gamma(&[row(8, 0.7), row(4, 0.7)]), 4);
    assert_eq!(select_gamma(&[row(1, 0.1)]), 1);
}

#[test]
fn single_base_factor_is_degenerate_sweep() {
    let sweep = BaseFactorSweep { gammas: vec![1], bitwidth: 8, steps: 20, seeds: 1 };
    let r = cmd_base_factor_sweep(&small_train(), &sweep).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.selected_gamma, 1);
}

#[test]
fn base_factor_sweep_has_interior_optimum() {
    let sweep = BaseFactorSweep { gammas: vec![1, 2, 4, 8, 16, 32], ..BaseFactorSweep::default() };
    let r = cmd_base_factor_sweep(&TrainConfig::lns_preset(), &sweep).unwrap();
    assert!(r.selected_gamma > 1 && r.selected_gamma < 32, "{:?}", r.rows);
    let acc = |g| r.rows.iter().find(|row| row.gamma == g).unwrap().median_test_accuracy;
    assert!(acc(1) < acc(r.selected_gamma) - 0.1);
}

#[test]
fn single_qu_cell_equals_train() {
    let base = small_train();
    let sweep = QuBitwidthSweep {
        optimizers: vec![OptimizerCandidates { algorithm: Algorithm::Madam, etas: vec![2f64.powi(-7)] }],
        bitwidths: vec![12],
        seeds: 1,
    };
    let r = cmd_qu_bitwidth_sweep(&base, &sweep).unwrap();
    assert_eq!(r.cells.len(), 1);
    let mut cfg = base.clone();
    cfg.update_quant.as_mut().unwrap().bitwidth = 12;
    assert_eq!(r.cells[0].test_accuracies, vec![train(&cfg).unwrap().final_metrics.test_accuracy]);
    assert_eq!(r.cells[0].drop, 0.0);
}

#[test]
fn tally_report_examples() {
    let base = TrainConfig::lns_preset();
    let empty = TallyWorkload { layers: Some(vec![]), ..TallyWorkload::default() };
    let r = cmd_tally_report(&base, &empty).unwrap();
    assert!(r.rows.iter().all(|row| row.total.total() == 0));

    let one = TallyWorkload { layers: Some(vec![32, 1]), batch: 1, vector_size: 32, lut_bits: vec![1, 3] };
    let r = cmd_tally_report(&base, &one).unwrap();
    let lut = |mode: &str| r.rows.iter().find(|row| row.mode == mode).unwrap().forward.lut_multiplies;
    assert_eq!(lut("exact"), 8);
    assert_eq!(lut("hybrid:1"), 2);
    assert_eq!(lut("hybrid:3"), 8);
    assert!(r.lut_multiplies_monotone);
}

#[test]
fn cli_writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin().args(["tally-report", "--threads", "1", "--out"]).arg(dir.path()).status().unwrap();
    assert!(status.success());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["schema"], SCHEMA_VERSION);
    let csv = std::fs::read_to_string(dir.path().join("tally-report.csv")).unwrap();
    assert!(csv.starts_with("mode,bins,exponent_adds"));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn cli_conformance_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.txt");
    let bad = dir.path().join("bad.txt");
    let empty = dir.path().join("empty.txt");
    let broken = dir.path().join("broken.txt");
    std::fs::write(&good, "0,8 | ++ | 0,0 | ++ | 0xC00000\n").unwrap();
    std::fs::write(&bad, "0,8 | ++ | 0,0 | ++ | 0xC00001\n").unwrap();
    std::fs::write(&empty, "# nothing here\n").unwrap();
    std::fs::write(&broken, "\n0,8 | ++ | 0,0 | 0xC00000\n").unwrap();

    let run = |path: &std::path::Path| bin().arg("datapath-conformance").arg("--golden").arg(path).output().unwrap();
    assert!(run(&good).status.success());
    let out = run(&bad);
    assert!(!out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("0xC00001") && stdout.contains("\"lanes\""));
    let out = run(&empty);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("vacuous"));
    let out = run(&broken);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn cli_rejects_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.toml");
    std::fs::write(&path, "task = \"train\"\nbogus = true\n").unwrap();
    assert!(!bin().arg("train").arg("--config").arg(&path).status().unwrap().success());
    std::fs::write(&path, "task = \"tally-report\"\n").unwrap();
    assert!(!bin().arg("train").arg("--config").arg(&path).status().unwrap().success());
}
