//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. The ordering experiment dominates the
//! runtime (about an hour on one core).

use std::fs;
use std::io::Write as _;
use std::time::Instant;

use miseg::data::{generate_dataset, split, SplitSpec, Splits, SyntheticSpec};
use miseg::infomax::mutual_information;
use miseg::network::SegNetConfig;
use miseg::toy::{toy_cluster, ToyConfig};
use miseg::trainer::{train, Method, RunOptions, TrainConfig};
use miseg::verify::{
    check_bottleneck, check_gradients, check_local_global, check_mi_oracle, check_mi_properties, check_schedule,
    check_transform_identities, CheckResult,
};

/// Straight to stderr so the lines show up without `--nocapture`.
fn say(text: String) {
    let _ = writeln!(std::io::stderr(), "{text}");
}

struct Line {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn from_check(id: usize, name: &'static str, c: CheckResult, budget_secs: Option<f64>) -> Line {
    let in_time = budget_secs.is_none_or(|b| c.seconds < b);
    let budget = budget_secs.map(|b| format!(", {:.1}s (< {b}s)", c.seconds)).unwrap_or_default();
    Line {
        id,
        name,
        passed: c.passed && in_time,
        detail: format!("{}{budget}", c.detail),
    }
}

fn toy() -> Line {
    let started = Instant::now();
    let r = toy_cluster(&ToyConfig::default()).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let n = r.config.n as f64 / r.config.k as f64;
    let target = 0.95 * (r.config.k as f64).ln();
    let sizes_ok = r.cluster_sizes.iter().all(|&c| (c as f64 - n).abs() <= 0.2 * n);
    Line {
        id: 6,
        name: "toy clustering",
        passed: r.final_mi >= target && r.diagonal_mass >= 0.9 && sizes_ok && secs < 120.0,
        detail: format!(
            "MI {:.4} (>= {target:.4}), diagonal mass {:.4} (>= 0.9), sizes {:?} (within 20% of {n:.0}), {secs:.1}s (< 120s)",
            r.final_mi, r.diagonal_mass, r.cluster_sizes
        ),
    }
}

fn ordering_splits(seed: u64) -> Splits {
    let spec = SyntheticSpec {
        extent: 32,
        seed,
        ..SyntheticSpec::default()
    };
    split(&generate_dataset(&spec).unwrap(), &SplitSpec::default(), seed).unwrap()
}

fn ordering() -> Line {
    let methods = [Method::PartialSup, Method::MiOnly, Method::ConsistencyOnly, Method::Ours];
    let net = SegNetConfig::default();
    let mut every_seed = true;
    let (mut beats_mi, mut beats_cons) = (0, 0);
    let mut slowest = 0.0_f64;
    let mut rows = Vec::new();
    for seed in 0..3 {
        let splits = ordering_splits(seed);
        let mut dice = Vec::new();
        for method in methods {
            let cfg = TrainConfig {
                method,
                epochs: 60,
                iterations_per_epoch: 20,
                seed,
                ..TrainConfig::default()
            };
            let r = train(&cfg, &net, &splits, &RunOptions::default()).unwrap();
            say(format!(
                "  ordering seed {seed} {method}: best mean DSC {:.4} at epoch {:?}, {:.0}s",
                r.best_mean_dice, r.best_epoch, r.wall_clock_secs
            ));
            slowest = slowest.max(r.wall_clock_secs);
            dice.push(r.best_mean_dice);
        }
        let [partial, mi, cons, ours] = [dice[0], dice[1], dice[2], dice[3]];
        every_seed &= ours > partial + 0.03;
        beats_mi += usize::from(ours >= mi);
        beats_cons += usize::from(ours >= cons);
        rows.push(format!("seed {seed}: partial {partial:.4} mi {mi:.4} cons {cons:.4} ours {ours:.4}"));
    }
    Line {
        id: 7,
        name: "semi-supervised ordering",
        passed: every_seed && beats_mi >= 2 && beats_cons >= 2 && slowest < 1800.0,
        detail: format!(
            "{}; ours > partial + 0.03 in every seed: {every_seed}; ours >= mi_only in {beats_mi}/3, \
             >= consistency_only in {beats_cons}/3; slowest run {slowest:.0}s (< 1800s)",
            rows.join("; ")
        ),
    }
}

fn determinism() -> Line {
    let tmp = tempfile::tempdir().unwrap();
    let splits = ordering_splits(4);
    let cfg = TrainConfig {
        method: Method::Ours,
        epochs: 3,
        iterations_per_epoch: 4,
        seed: 4,
        ..TrainConfig::default()
    };
    let net = SegNetConfig::default();
    let csv = |dir: &str| {
        let out = tmp.path().join(dir);
        let opts = RunOptions {
            out_dir: Some(out.clone()),
            ..RunOptions::default()
        };
        train(&cfg, &net, &splits, &opts).unwrap();
        fs::read(out.join("metrics.csv")).unwrap()
    };
    let (a, b) = (csv("a"), csv("b"));
    Line {
        id: 10,
        name: "determinism",
        passed: a == b,
        detail: format!("metrics CSVs of two identical runs: {} and {} bytes, identical: {}", a.len(), b.len(), a == b),
    }
}

#[test]
fn acceptance() {
    let mi = mutual_information;
    let mut lines = vec![
        from_check(1, "gradient integrity", check_gradients(mi), Some(300.0)),
        from_check(2, "MI oracle", check_mi_oracle(mi, 1000), None),
        from_check(3, "MI properties", check_mi_properties(mi), None),
        from_check(4, "bottleneck", check_bottleneck(mi, 200), None),
        from_check(5, "local/global consistency", check_local_global(), None),
        toy(),
        from_check(8, "schedule", check_schedule(), None),
        from_check(9, "consistency identities", check_transform_identities(), None),
        determinism(),
    ];
    lines.push(ordering());
    lines.sort_by_key(|l| l.id);
    for l in &lines {
        say(format!("{} [{}] {}: {}", if l.passed { "PASS" } else { "FAIL" }, l.id, l.name, l.detail));
    }
    let failed: Vec<usize> = lines.iter().filter(|l| !l.passed).map(|l| l.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
