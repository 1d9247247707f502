use miseg::data::{generate_dataset, split, SplitSpec, Splits, SyntheticSpec};
use miseg::network::SegNetConfig;
use miseg::trainer::{evaluate, train, Method, RunOptions, TrainConfig};
use miseg::Error;

fn splits(noise_std: f64, labeled_ratio: f64) -> Splits {
    let spec = SyntheticSpec {
        extent: 32,
        volumes: 14,
        slices_per_volume: 4,
        noise_std,
        contrast_spread: if noise_std == 0.0 { 0.0 } else { 0.12 },
        seed: 1,
        ..SyntheticSpec::default()
    };
    let ds = generate_dataset(&spec).unwrap();
    split(
        &ds,
        &SplitSpec {
            labeled_ratio,
            validation_volumes: 4,
        },
        1,
    )
    .unwrap()
}

fn net() -> SegNetConfig {
    SegNetConfig {
        base_channels: 4,
        clusters: 4,
        heads: 2,
        ..SegNetConfig::default()
    }
}

fn cfg(method: Method, epochs: usize) -> TrainConfig {
    TrainConfig {
        method,
        epochs,
        iterations_per_epoch: 4,
        unlabeled_batch: 4,
        warmup_epochs: 1,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn full_supervision_fits_noise_free_data() {
    let s = splits(0.0, 1.0);
    let c = TrainConfig {
        epochs: 60,
        iterations_per_epoch: 20,
        warmup_epochs: 10,
        ..cfg(Method::FullSup, 60)
    };
    let net = SegNetConfig {
        base_channels: 8,
        ..SegNetConfig::default()
    };
    let r = train(&c, &net, &s, &RunOptions::default()).unwrap();
    assert!(r.best_mean_dice >= 0.95, "best mean Dice {}", r.best_mean_dice);
    let again = evaluate(r.best_params.as_ref().unwrap(), &net, &s.validation, None).unwrap();
    assert_eq!(again.mean, r.best_mean_dice);
}

#[test]
fn every_method_runs_and_is_deterministic() {
    let s = splits(0.08, 0.3);
    for method in Method::ALL {
        let c = cfg(method, 2);
        let a = train(&c, &net(), &s, &RunOptions::default()).unwrap();
        let b = train(&c, &net(), &s, &RunOptions::default()).unwrap();
        assert_eq!(a.to_csv().unwrap(), b.to_csv().unwrap(), "{method}");
        let terms = method.terms();
        assert!(a.epochs.iter().all(|e| e.losses.keys().all(|t| terms.contains(t))), "{method}");
        assert!(a.epochs.iter().all(|e| e.total.is_finite()), "{method}");
    }
}

#[test]
fn seeds_change_the_run() {
    let s = splits(0.08, 0.3);
    let a = train(&cfg(Method::PartialSup, 1), &net(), &s, &RunOptions::default()).unwrap();
    let b = train(
        &TrainConfig {
            seed: 10,
            ..cfg(Method::PartialSup, 1)
        },
        &net(),
        &s,
        &RunOptions::default(),
    )
    .unwrap();
    assert_ne!(a.to_csv().unwrap(), b.to_csv().unwrap());
}

#[test]
fn resume_reproduces_remaining_epochs() {
    let s = splits(0.08, 0.3);
    let tmp = tempfile::tempdir().unwrap();
    let c = cfg(Method::OursEma, 3);
    let full = train(&c, &net(), &s, &RunOptions::default()).unwrap();
    let first = RunOptions {
        out_dir: Some(tmp.path().to_path_buf()),
        resume: false,
        stop_after: Some(2),
    };
    assert_eq!(train(&c, &net(), &s, &first).unwrap().epochs.len(), 2);
    let rest = RunOptions {
        resume: true,
        stop_after: None,
        ..first
    };
    let resumed = train(&c, &net(), &s, &rest).unwrap();
    assert_eq!(resumed.to_csv().unwrap(), full.to_csv().unwrap());
}

#[test]
fn divergence_aborts_with_last_good_checkpoint() {
    let s = splits(0.08, 0.3);
    let tmp = tempfile::tempdir().unwrap();
    let c = TrainConfig {
        base_lr: 1e300,
        ..cfg(Method::PartialSup, 2)
    };
    let opts = RunOptions {
        out_dir: Some(tmp.path().to_path_buf()),
        ..RunOptions::default()
    };
    match train(&c, &net(), &s, &opts) {
        Err(Error::Diverged { epoch, .. }) => assert_eq!(epoch, 0),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.best_mean_dice)),
    }
    let names: Vec<String> = std::fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().any(|n| n.starts_with("last_good")), "{names:?}");
}

#[test]
fn semi_supervised_methods_need_unlabeled_images() {
    let s = splits(0.08, 1.0);
    assert!(train(&cfg(Method::Ours, 1), &net(), &s, &RunOptions::default()).is_err());
    assert!(train(&cfg(Method::FullSup, 1), &net(), &s, &RunOptions::default()).is_ok());
}
