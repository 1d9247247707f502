//! Self-checks of the losses and their gradients, runnable from a release
//! binary. Each check returns a [`CheckResult`] instead of panicking so a
//! driver can report every failure at once.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::infomax::{
    consistency_loss, entropy_min_loss, estimate_joint, global_mi_loss, local_mi_loss, mi_by_entropy,
    mutual_information, ClusterAssignment, DisplacementSet, JointDistribution, LocalBlock,
};
use crate::ndcore::{grad_check, grad_check_report, Tape, Tensor, Var};
use crate::network::{init_params, Activation, Pooling, SegNetConfig, Site};
use crate::rng::{derived, Rng};
use crate::trainer::{total_loss, Batch, Method, Stage, TrainConfig};
use crate::transforms::{apply, apply_batch, invert, TransformKind, TransformSpec};

/// Mutual information of a joint, as differentiated by the losses.
/// Swappable so the suite itself can be tested against a broken estimator.
pub type MiFn = for<'t> fn(&JointDistribution<'t>) -> Result<Var<'t>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed value against its tolerance, or the error hit.
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-5;

fn timed(name: &str, body: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = body().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn uniform(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect()).expect("shape")
}

/// Random `K x K` joint with roughly a fifth of the cells exactly zero.
pub fn random_joint(rng: &mut Rng, k: usize) -> Tensor {
    loop {
        let raw: Vec<f64> = (0..k * k)
            .map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random::<f64>() })
            .collect();
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            return Tensor::new(&[k, k], raw.iter().map(|v| v / total).collect()).expect("square");
        }
    }
}

fn mi_value(mi: MiFn, p: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let joint = JointDistribution::new(tape.constant(p.clone())?)?;
    Ok(mi(&joint)?.item())
}

/// Analytic against central-difference gradients for every loss and for the
/// assembled objective of every method on a small network.
pub fn check_gradients(mi: MiFn) -> CheckResult {
    timed("gradients", || {
        let mut rng = derived(11, &[1]);
        let mut worst = (0.0_f64, String::new());
        let mut note = |name: &str, err: f64| {
            log::debug!("gradient check {name}: {err:.3e}");
            if err >= worst.0 || worst.1.is_empty() {
                worst = (err, name.to_string());
            }
        };
        let k = 4;

        let logits = [uniform(&mut rng, &[6, k], 2.0), uniform(&mut rng, &[6, k], 2.0)];
        for symmetrize in [false, true] {
            let err = grad_check(
                |_, p| {
                    let a = ClusterAssignment::trusted(p[0].softmax(1)?);
                    let b = ClusterAssignment::trusted(p[1].softmax(1)?);
                    mi(&estimate_joint(&a, &b, symmetrize)?)
                },
                &logits,
                GRAD_STEP,
            )?;
            note(if symmetrize { "mi (symmetrized joint)" } else { "mi" }, err);
        }

        let heads: Vec<Tensor> = (0..4).map(|_| uniform(&mut rng, &[5, k], 2.0)).collect();
        let err = grad_check(
            |_, p| {
                let pairs = p
                    .chunks(2)
                    .map(|ab| {
                        Ok((
                            ClusterAssignment::trusted(ab[0].softmax(1)?),
                            ClusterAssignment::trusted(ab[1].softmax(1)?),
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                global_mi_loss(&pairs, true)
            },
            &heads,
            GRAD_STEP,
        )?;
        note("global mi loss", err);

        let maps = [uniform(&mut rng, &[2, 3, 4, 4], 2.0), uniform(&mut rng, &[2, 3, 4, 4], 2.0)];
        let err = grad_check(
            |_, p| {
                local_mi_loss(&[LocalBlock {
                    fa: ClusterAssignment::trusted(p[0].softmax(1)?),
                    fb: ClusterAssignment::trusted(p[1].softmax(1)?),
                    displacements: DisplacementSet::square(1),
                }])
            },
            &maps,
            GRAD_STEP,
        )?;
        note("local mi loss", err);

        let ts = vec![
            TransformSpec::from(TransformKind::Hflip),
            TransformSpec::from(TransformKind::Rot90 { k: 1 }),
        ];
        let err = grad_check(
            |_, p| {
                let target = apply_batch(&ts, &p[1].softmax(1)?, 1)?;
                consistency_loss(&p[0].softmax(1)?, &target)
            },
            &maps,
            GRAD_STEP,
        )?;
        note("consistency loss", err);

        let err = grad_check(|_, p| entropy_min_loss(&p[0].softmax(1)?), &maps[..1], GRAD_STEP)?;
        note("entropy loss", err);

        for (label, err) in objective_gradients(&ObjectiveProbe::default())? {
            note(&label, err);
        }
        Ok((worst.0 < GRAD_TOL, format!("max relative error {:.3e} ({}) < {GRAD_TOL:e}", worst.0, worst.1)))
    })
}

/// Evaluation point for the full-objective gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveProbe {
    pub net: SegNetConfig,
    /// Multiplier on the trunk weights drawn by [`init_params`].
    pub trunk_scale: f64,
    /// Multiplier on the projection heads and the output layer, on top of
    /// `trunk_scale`. Near-uniform assignments put MI and entropy at a
    /// stationary point where every gradient is tiny.
    pub head_scale: f64,
    pub unlabeled: usize,
    /// Weight of both MI terms; the ablations still zero theirs.
    pub mi_weight: f64,
    pub seed: u64,
}

impl Default for ObjectiveProbe {
    fn default() -> Self {
        Self {
            net: SegNetConfig {
                depth: 2,
                base_channels: 2,
                clusters: 3,
                heads: 1,
                global_sites: vec![Site::Bottleneck],
                local_sites: Some(vec![Site::Decoder(1), Site::Decoder(2)]),
                activation: Activation::Tanh,
                pooling: Pooling::Average,
                ..SegNetConfig::default()
            },
            trunk_scale: 1.0,
            head_scale: 12.0,
            unlabeled: 4,
            mi_weight: 1.0,
            seed: 7,
        }
    }
}

/// `n` single-channel 16x16 images with distinct brightness and a random
/// ramp each, so pooled features differ between images.
fn spread_images(rng: &mut Rng, n: usize) -> Tensor {
    let mut t = uniform(rng, &[n, 1, 16, 16], 0.25);
    for (i, img) in t.data_mut().chunks_mut(256).enumerate() {
        let level = 2.0 * i as f64 / n.max(1) as f64 - 1.0;
        let (gx, gy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        for (j, v) in img.iter_mut().enumerate() {
            let (y, x) = ((j / 16) as f64 / 15.0 - 0.5, (j % 16) as f64 / 15.0 - 0.5);
            *v += level + gx * x + gy * y;
        }
    }
    t
}

/// Worst gradient error of the full objective for each method and stage.
pub fn objective_gradients(probe: &ObjectiveProbe) -> Result<Vec<(String, f64)>> {
    let mut rng = derived(11, &[probe.seed]);
    let net = &probe.net;
    let scaled = |rng: &mut Rng| -> Result<_> {
        let mut p = init_params(rng, net)?;
        for (name, t) in p.iter_mut() {
            let f = probe.trunk_scale * if name.starts_with("head") || name.starts_with("out.") { probe.head_scale } else { 1.0 };
            t.data_mut().iter_mut().for_each(|v| *v *= f);
        }
        Ok(p)
    };
    let params = scaled(&mut rng)?;
    let teacher = scaled(&mut rng)?;
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let labels: Vec<u8> = (0..2 * 16 * 16).map(|_| rng.random_range(0..net.classes as u8)).collect();
    let u = probe.unlabeled;
    let kinds = [
        TransformKind::Vflip,
        TransformKind::Rot90 { k: 3 },
        TransformKind::Translate { dx: 4, dy: -4 },
        TransformKind::Hflip,
        TransformKind::Rot90 { k: 1 },
    ];
    let batch = Batch {
        labeled: Some((uniform(&mut rng, &[2, 1, 16, 16], 1.0), labels)),
        unlabeled: Some(spread_images(&mut rng, u)),
        student_view: Some(spread_images(&mut rng, u)),
        transforms: (0..u)
            .map(|i| TransformSpec {
                steps: vec![kinds[i % kinds.len()], kinds[(i + 2) % kinds.len()]],
            })
            .collect(),
    };
    let mut out = Vec::new();
    for method in Method::ALL {
        let cfg = TrainConfig {
            method,
            lambda_global: probe.mi_weight,
            lambda_local: probe.mi_weight,
            ..TrainConfig::default()
        };
        let stages: &[Stage] = if method == Method::PretrainFinetune {
            &[Stage::Pretrain, Stage::Finetune]
        } else {
            &[Stage::Main]
        };
        for &stage in stages {
            let obj = cfg.objective(stage, net)?;
            let r = grad_check_report(
                |tape, p| {
                    let student = params.bind_vars(p)?;
                    let teacher = teacher.bind(tape, false)?;
                    Ok(total_loss(tape, &student, Some(&teacher), net, &obj, &batch)?.0)
                },
                &values,
                GRAD_STEP,
            )?;
            out.push((
                format!(
                    "{method} objective ({stage:?}) at {}[{}]: {:.6e} vs {:.6e}",
                    names[r.param], r.index, r.analytic, r.numeric
                ),
                r.max_rel,
            ));
        }
    }
    Ok(out)
}

/// Closed-form MI against the entropy decomposition on random joints.
pub fn check_mi_oracle(mi: MiFn, trials: usize) -> CheckResult {
    timed("mi oracle", || {
        let mut rng = derived(11, &[2]);
        let mut worst = 0.0_f64;
        for _ in 0..trials {
            let k = rng.random_range(2..=20);
            let p = random_joint(&mut rng, k);
            worst = worst.max((mi_value(mi, &p)? - mi_by_entropy(&p)?).abs());
        }
        Ok((worst < 1e-10, format!("{trials} joints, max |difference| {worst:.3e} < 1e-10")))
    })
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

/// Nonnegativity, the `log K` bound, transpose invariance and invariance to
/// every row and column relabelling for `K <= 4`.
pub fn check_mi_properties(mi: MiFn) -> CheckResult {
    timed("mi properties", || {
        const TOL: f64 = 1e-9;
        let mut rng = derived(11, &[3]);
        let mut failures = Vec::new();
        let mut worst_perm = 0.0_f64;
        for trial in 0..200 {
            let k = 2 + trial % 19;
            let p = random_joint(&mut rng, k);
            let v = mi_value(mi, &p)?;
            if v < -TOL {
                failures.push(format!("negative MI {v:.3e} (K={k})"));
            }
            if v > (k as f64).ln() + TOL {
                failures.push(format!("MI {v} above log {k}"));
            }
            let pt = Tensor::new(&[k, k], (0..k * k).map(|i| p.get(&[i % k, i / k])).collect())?;
            let t = mi_value(mi, &pt)?;
            if (t - v).abs() > TOL {
                failures.push(format!("transpose changes MI by {:.3e}", (t - v).abs()));
            }
        }
        for k in 2..=4 {
            let perms = permutations(k);
            for _ in 0..3 {
                let p = random_joint(&mut rng, k);
                let v = mi_value(mi, &p)?;
                for rp in &perms {
                    for cp in &perms {
                        let q = Tensor::new(&[k, k], (0..k * k).map(|i| p.get(&[rp[i / k], cp[i % k]])).collect())?;
                        worst_perm = worst_perm.max((mi_value(mi, &q)? - v).abs());
                    }
                }
            }
        }
        if worst_perm > TOL {
            failures.push(format!("relabelling changes MI by {worst_perm:.3e}"));
        }
        let detail = match failures.first() {
            None => format!("200 joints, K<=4 exhaustive relabelling, max drift {worst_perm:.3e} < 1e-9"),
            Some(f) => format!("{} violations, first: {f}", failures.len()),
        };
        Ok((failures.is_empty(), detail))
    })
}

/// Merging clusters with deterministic maps never increases MI.
pub fn check_bottleneck(mi: MiFn, trials: usize) -> CheckResult {
    timed("bottleneck", || {
        let mut rng = derived(11, &[4]);
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..trials {
            let k = rng.random_range(3..=6);
            let kk = rng.random_range(2..k);
            let p = random_joint(&mut rng, k);
            // surjective maps k -> kk for rows and columns
            let mut maps = [vec![0; k], vec![0; k]];
            for map in &mut maps {
                for (i, m) in map.iter_mut().enumerate() {
                    *m = if i < kk { i } else { rng.random_range(0..kk) };
                }
                for i in (1..k).rev() {
                    map.swap(i, rng.random_range(0..=i));
                }
            }
            let mut merged = Tensor::zeros(&[kk, kk]);
            for i in 0..k {
                for j in 0..k {
                    let (a, b) = (maps[0][i], maps[1][j]);
                    merged.set(&[a, b], merged.get(&[a, b]) + p.get(&[i, j]));
                }
            }
            worst = worst.max(mi_value(mi, &merged)? - mi_value(mi, &p)?);
        }
        Ok((worst <= 1e-12, format!("{trials} merges, max increase {worst:.3e} <= 1e-12")))
    })
}

/// Local MI at zero displacement against global MI of the pixel-flattened
/// assignments.
pub fn check_local_global() -> CheckResult {
    timed("local vs global", || {
        let mut rng = derived(11, &[5]);
        let mut worst = 0.0_f64;
        for trial in 0..20 {
            let (n, k, h, w) = (1 + trial % 3, 2 + trial % 5, 3 + trial % 4, 2 + trial % 5);
            let tape = Tape::new();
            let a = tape.constant(uniform(&mut rng, &[n, k, h, w], 3.0))?.softmax(1)?;
            let b = tape.constant(uniform(&mut rng, &[n, k, h, w], 3.0))?.softmax(1)?;
            let ts = vec![TransformSpec::identity(); n];
            let local = local_mi_loss(&[LocalBlock {
                fa: ClusterAssignment::trusted(a),
                fb: ClusterAssignment::trusted(apply_batch(&ts, &b, 1)?),
                displacements: DisplacementSet::new(vec![(0, 0)], 0)?,
            }])?;
            let flat = |v: Var<'_>| -> Result<Tensor> {
                Ok(v.permute(&[0, 2, 3, 1])?.value().reshaped(&[n * h * w, k])?)
            };
            let global = global_mi_loss(
                &[(
                    ClusterAssignment::new(tape.constant(flat(a)?)?)?,
                    ClusterAssignment::new(tape.constant(flat(b)?)?)?,
                )],
                false,
            )?;
            worst = worst.max((local.item() - global.item()).abs());
        }
        Ok((worst < 1e-10, format!("20 map pairs, max |difference| {worst:.3e} < 1e-10")))
    })
}

/// Every pool member is undone exactly by its inverse, and the consistency
/// loss vanishes under the identity.
pub fn check_transform_identities() -> CheckResult {
    timed("transform identities", || {
        let mut rng = derived(11, &[6]);
        let kinds = [
            TransformKind::Identity,
            TransformKind::Hflip,
            TransformKind::Vflip,
            TransformKind::Rot90 { k: 1 },
            TransformKind::Rot90 { k: 2 },
            TransformKind::Rot90 { k: 3 },
            TransformKind::Translate { dx: 3, dy: -2 },
            TransformKind::Translate { dx: -7, dy: 5 },
        ];
        let mut specs: Vec<TransformSpec> = kinds.iter().map(|&k| TransformSpec::from(k)).collect();
        for _ in 0..20 {
            let n = rng.random_range(2..5);
            specs.push(TransformSpec {
                steps: (0..n).map(|_| kinds[rng.random_range(0..kinds.len())]).collect(),
            });
        }
        let mut broken = 0;
        for shape in [[2, 3, 8, 8], [1, 2, 8, 10]] {
            let tape = Tape::new();
            let x = tape.constant(uniform(&mut rng, &shape, 1.0))?;
            for t in &specs {
                let back = apply(&invert(t), &apply(t, &x)?)?;
                if back.value().data() != x.value().data() {
                    broken += 1;
                }
            }
            let p = x.softmax(1)?;
            let ids = vec![TransformSpec::identity(); shape[0]];
            let cons = consistency_loss(&apply_batch(&ids, &p, 1)?, &apply_batch(&ids, &p, 1)?)?.item();
            if cons != 0.0 {
                broken += 1;
            }
        }
        Ok((
            broken == 0,
            format!("{} transforms on 2 shapes, {broken} inexact round trips or nonzero identity losses", specs.len()),
        ))
    })
}

/// Warm-up endpoints and monotone cosine decay of the learning rate.
pub fn check_schedule() -> CheckResult {
    timed("schedule", || {
        let mut failures = 0;
        for (base, epochs) in [(1e-7, 100), (2.5e-6, 60), (1e-6, 11)] {
            let cfg = TrainConfig {
                base_lr: base,
                epochs,
                ..TrainConfig::default()
            };
            let s = cfg.schedule(epochs);
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1e-300);
            if !close(s.lr_at(0.0)?, base) || !close(s.lr_at(10.0)?, 400.0 * base) {
                failures += 1;
            }
            let mut prev = s.lr_at(10.0)?;
            for step in 1..(epochs - 10) * 8 {
                let lr = s.lr_at(10.0 + step as f64 / 8.0)?;
                if lr > prev {
                    failures += 1;
                }
                prev = lr;
            }
        }
        Ok((failures == 0, format!("{failures} endpoint or monotonicity violations")))
    })
}

/// Runs every check. `mi` replaces the estimator under test.
pub fn run_suite(mi: MiFn) -> VerifyReport {
    VerifyReport {
        checks: vec![
            check_gradients(mi),
            check_mi_oracle(mi, 1000),
            check_mi_properties(mi),
            check_bottleneck(mi, 200),
            check_local_global(),
            check_schedule(),
            check_transform_identities(),
        ],
    }
}

/// The suite against the real estimator.
pub fn verify() -> VerifyReport {
    run_suite(mutual_information)
}
