use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use miseg_cli::{cmd_eval, cmd_gen_data, cmd_train, cmd_verify, verify_outcome, CliError, ExperimentConfig, SplitName, TrainArgs};

const TINY: &str = r#"
split_seed = 3

[data]
extent = 16
volumes = 6
slices_per_volume = 2
seed = 5

[split]
labeled_ratio = 0.25
validation_volumes = 2

[network]
depth = 2
base_channels = 2
clusters = 3
heads = 1

[train]
method = "partial_sup"
epochs = 3
iterations_per_epoch = 2
labeled_batch = 2
unlabeled_batch = 2
warmup_epochs = 1
"#;

fn tiny(method: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(TINY).unwrap();
    cfg.train.method = method.parse().unwrap();
    cfg
}

fn miseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_miseg"))
        .args(args)
        .env("MISEG_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn defaults_round_trip() {
    let cfg = ExperimentConfig::default();
    assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn unknown_keys_are_rejected() {
    let err = ExperimentConfig::from_toml("[train]\nlamda_cons = 1.0\n").unwrap_err();
    assert!(matches!(err, CliError::Config(_)));
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn single_class_names_the_field() {
    let err = ExperimentConfig::from_toml("[data]\nclasses = 1\n").unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("data.classes"), "{err}");
}

#[test]
fn mismatched_classes_are_rejected() {
    let err = ExperimentConfig::from_toml("[data]\nclasses = 4\n").unwrap_err();
    assert!(err.to_string().contains("network.classes"), "{err}");
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny("partial_sup");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let m = cmd_gen_data(&cfg, &a).unwrap();
    cmd_gen_data(&cfg, &b).unwrap();
    assert_eq!(m.validation, 4);
    for f in m.files.iter().map(String::as_str).chain(["manifest.json", "config.resolved.toml"]) {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_needs_data_source() {
    let tmp = tempfile::tempdir().unwrap();
    let err = cmd_train(&tiny("partial_sup"), tmp.path(), &TrainArgs::default()).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn stale_cache_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    cmd_gen_data(&tiny("partial_sup"), &data).unwrap();
    let mut other = tiny("partial_sup");
    other.data.seed += 1;
    let args = TrainArgs {
        data: Some(data),
        ..TrainArgs::default()
    };
    assert!(matches!(cmd_train(&other, &tmp.path().join("run"), &args), Err(CliError::Config(_))));
}

#[test]
fn partial_sup_trains_and_evaluates() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let cfg = tiny("partial_sup");
    cmd_gen_data(&cfg, &data).unwrap();
    let args = TrainArgs {
        data: Some(data.clone()),
        ..TrainArgs::default()
    };
    let report = cmd_train(&cfg, &run, &args).unwrap();
    assert_eq!(report.epochs.len(), 3);
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,lr,spv,dsc_1,dsc_2,mean_dsc");

    let table = cmd_eval(&run.join("best"), &data, SplitName::Validation).unwrap();
    let rows: Vec<_> = table.lines().collect();
    assert_eq!(rows[0], "volume,dsc_1,dsc_2,mean_dsc");
    assert_eq!(rows.len(), 1 + 2 + 1);
    assert!(rows.last().unwrap().starts_with("mean,"));
    for row in &rows[1..] {
        for v in row.split(',').skip(1) {
            let v: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&v), "{row}");
        }
    }
}

#[test]
fn ours_logs_four_terms() {
    let tmp = tempfile::tempdir().unwrap();
    let args = TrainArgs {
        generate: true,
        ..TrainArgs::default()
    };
    let mut cfg = tiny("ours");
    cfg.train.epochs = 1;
    cmd_train(&cfg, tmp.path(), &args).unwrap();
    let csv = fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    let header: Vec<_> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 2 + 4 + 3, "{header:?}");
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny("mean_teacher");
    let full = tmp.path().join("full");
    let split = tmp.path().join("split");
    let gen = TrainArgs {
        generate: true,
        ..TrainArgs::default()
    };
    cmd_train(&cfg, &full, &gen).unwrap();
    cmd_train(
        &cfg,
        &split,
        &TrainArgs {
            stop_after: Some(1),
            ..gen.clone()
        },
    )
    .unwrap();
    cmd_train(
        &cfg,
        &split,
        &TrainArgs {
            resume: true,
            ..gen.clone()
        },
    )
    .unwrap();
    assert_eq!(
        fs::read(full.join("metrics.csv")).unwrap(),
        fs::read(split.join("metrics.csv")).unwrap()
    );
}

#[test]
fn empty_split_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny("full_sup");
    cfg.split.labeled_ratio = 1.0;
    let data = tmp.path().join("data");
    cmd_gen_data(&cfg, &data).unwrap();
    cmd_train(
        &cfg,
        &tmp.path().join("run"),
        &TrainArgs {
            data: Some(data.clone()),
            ..TrainArgs::default()
        },
    )
    .unwrap();
    assert!(cmd_eval(&tmp.path().join("run/best"), &data, SplitName::Unlabeled).is_err());
}

#[test]
fn verify_fails_for_broken_estimator() {
    fn flipped<'t>(
        joint: &miseg::infomax::JointDistribution<'t>,
    ) -> miseg::Result<miseg::ndcore::Var<'t>> {
        miseg::infomax::mutual_information(joint)?.neg()
    }
    let report = cmd_verify(flipped).unwrap();
    let err = verify_outcome(&report).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn missing_config_exits_1() {
    let out = miseg(&["gen-data", "--config", "/nonexistent/config.toml", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn bad_arguments_exit_1() {
    assert_eq!(miseg(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(miseg(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_config_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), "[network]\ndepth = 0\n");
    let out = miseg(&["gen-data", "--config", &path, "--out", tmp.path().join("d").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("network.depth"));
}

#[test]
fn toy_prints_json() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), "[toy]\nn = 60\nsteps = 20\n");
    let out = miseg(&["toy", "--config", &path]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["cluster_sizes"].as_array().unwrap().len(), 3);
    assert!(v["final_mi"].as_f64().unwrap() >= 0.0);
}

#[test]
fn defaults_parse_back() {
    let out = miseg(&["defaults"]);
    assert_eq!(out.status.code(), Some(0));
    ExperimentConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
}

#[test]
fn cli_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), TINY);
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let d = data.to_str().unwrap();
    assert!(miseg(&["gen-data", "--config", &path, "--out", d]).status.success());
    assert!(miseg(&["train", "--config", &path, "--out", run.to_str().unwrap(), "--data", d])
        .status
        .success());
    let out = miseg(&["eval", "--checkpoint", run.join("best").to_str().unwrap(), "--data", d]);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("volume,"));
    let out = miseg(&["eval", "--checkpoint", run.join("best").to_str().unwrap(), "--data", d, "--split", "nope"]);
    assert_eq!(out.status.code(), Some(1));
}
