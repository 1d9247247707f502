use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{
    evaluate, optimizer_step, total_loss, AdamState, Batch, Method, Objective, Stage, Term, TrainConfig,
};
use crate::data::{augment, SegSample, Splits};
use crate::error::{invalid, Error, Result};
use crate::ndcore::Tensor;
use crate::network::{ema_update, init_params, read_arrays, write_arrays, NetworkParams, SegNetConfig};
use crate::rng::{derived, Rng};
use crate::transforms::sample_transform;

pub const BEST_CHECKPOINT: &str = "best";
pub const LAST_CHECKPOINT: &str = "last";
const LAST_GOOD_CHECKPOINT: &str = "last_good";
const METRICS_CSV: &str = "metrics.csv";
const REPORT_JSON: &str = "report.json";

const TAG_INIT: u64 = 1;
const TAG_EPOCH: u64 = 2;

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for checkpoints, the metrics CSV and the report.
    pub out_dir: Option<PathBuf>,
    /// Continue from `<out_dir>/last`.
    pub resume: bool,
    /// Stop once this many epochs (in total) are complete.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    /// Learning rate at the start of the epoch.
    pub lr: f64,
    /// Epoch mean of each unweighted loss term.
    pub losses: BTreeMap<Term, f64>,
    /// Epoch mean of the weighted objective.
    pub total: f64,
    /// Validation Dice per foreground class.
    pub dice: Vec<f64>,
    pub mean_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub network: SegNetConfig,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_mean_dice: f64,
    /// Base path of the best checkpoint, when one was written.
    pub checkpoint: Option<PathBuf>,
    pub wall_clock_secs: f64,
    /// Parameters of the best epoch.
    #[serde(skip)]
    pub best_params: Option<NetworkParams>,
}

impl TrainReport {
    /// Metrics table: epoch, lr, the method's loss terms, Dice per class and mean.
    pub fn to_csv(&self) -> Result<String> {
        metrics_csv(self.config.method, self.network.classes, &self.epochs)
    }
}

fn metrics_csv(method: Method, classes: usize, records: &[EpochRecord]) -> Result<String> {
    let terms = method.terms();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["epoch".to_string(), "lr".to_string()];
    header.extend(terms.iter().map(|t| t.name().to_string()));
    header.extend((1..classes).map(|c| format!("dsc_{c}")));
    header.push("mean_dsc".to_string());
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        let mut row = vec![r.epoch.to_string(), r.lr.to_string()];
        row.extend(terms.iter().map(|t| r.losses.get(t).copied().unwrap_or(0.0).to_string()));
        row.extend(r.dice.iter().map(f64::to_string));
        row.push(r.mean_dice.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

struct Pools {
    labeled: Vec<SegSample>,
    unlabeled: Vec<SegSample>,
    everything: Vec<SegSample>,
}

impl Pools {
    fn new(splits: &Splits, method: Method) -> Self {
        let revealed: Vec<SegSample> = splits
            .unlabeled
            .iter()
            .zip(&splits.unlabeled_truth)
            .map(|(s, l)| SegSample {
                label: Some(l.clone()),
                ..s.clone()
            })
            .collect();
        let mut labeled = splits.labeled.clone();
        if method == Method::FullSup {
            labeled.extend(revealed);
        }
        let unlabeled = splits.unlabeled.clone();
        let mut everything: Vec<SegSample> = splits
            .labeled
            .iter()
            .map(|s| SegSample { label: None, ..s.clone() })
            .collect();
        everything.extend(unlabeled.iter().cloned());
        Self {
            labeled,
            unlabeled,
            everything,
        }
    }
}

fn stack_images(samples: &[SegSample]) -> Result<Tensor> {
    let (h, w) = samples[0].extent();
    let data = samples.iter().flat_map(|s| s.image.data().iter().copied()).collect();
    Tensor::new(&[samples.len(), 1, h, w], data)
}

fn sample_batch(rng: &mut Rng, cfg: &TrainConfig, obj: &Objective, labeled: &[SegSample], unlabeled: &[SegSample]) -> Result<Batch> {
    let mut batch = Batch::default();
    if obj.spv > 0.0 {
        let picked: Vec<SegSample> = (0..cfg.labeled_batch)
            .map(|_| augment(&labeled[rng.random_range(0..labeled.len())], rng, &cfg.augment))
            .collect();
        let labels = picked
            .iter()
            .flat_map(|s| s.label.as_ref().expect("labeled pool").iter().copied())
            .collect();
        batch.labeled = Some((stack_images(&picked)?, labels));
    }
    if obj.needs_unlabeled() {
        let picked: Vec<SegSample> = (0..cfg.unlabeled_batch)
            .map(|_| augment(&unlabeled[rng.random_range(0..unlabeled.len())], rng, &cfg.augment))
            .collect();
        let images = stack_images(&picked)?;
        if !cfg.student_noise.is_identity() {
            batch.student_view = Some(cfg.student_noise.apply(&images, rng));
        }
        batch.unlabeled = Some(images);
        batch.transforms = (0..cfg.unlabeled_batch)
            .map(|_| sample_transform(rng, &obj.pool))
            .collect::<Result<_>>()?;
    }
    Ok(batch)
}

fn prefixed<'a>(prefix: &'a str, p: &'a NetworkParams) -> impl Iterator<Item = (String, &'a Tensor)> + 'a {
    p.iter().map(move |(k, t)| (format!("{prefix}/{k}"), t))
}

fn strip(arrays: &[(String, Tensor)], prefix: &str) -> BTreeMap<String, Tensor> {
    let lead = format!("{prefix}/");
    arrays
        .iter()
        .filter_map(|(k, t)| k.strip_prefix(&lead).map(|n| (n.to_string(), t.clone())))
        .collect()
}

/// Writes a model checkpoint loadable with [`load_model`].
pub fn save_model(base: &Path, params: &NetworkParams, net: &SegNetConfig, meta: serde_json::Value) -> Result<()> {
    let meta = serde_json::json!({ "network": net, "info": meta });
    write_arrays(base, params.iter().map(|(k, t)| (k.as_str(), t)), meta)?;
    Ok(())
}

/// Reads a model checkpoint and its network configuration.
pub fn load_model(base: &Path) -> Result<(NetworkParams, SegNetConfig)> {
    let (manifest, arrays) = read_arrays(base)?;
    let net: SegNetConfig = serde_json::from_value(
        manifest
            .meta
            .get("network")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint lacks a network configuration".into()))?,
    )?;
    let params = NetworkParams::from_map(arrays.into_iter().collect());
    params.check_against(&net)?;
    Ok((params, net))
}

#[derive(Serialize, Deserialize)]
struct ResumeMeta {
    epochs_done: usize,
    adam_step: u64,
    records: Vec<EpochRecord>,
    best_epoch: Option<usize>,
    best_mean_dice: f64,
}

struct State {
    student: NetworkParams,
    teacher: Option<NetworkParams>,
    adam: AdamState,
    records: Vec<EpochRecord>,
    best_epoch: Option<usize>,
    best_mean_dice: f64,
    best_params: NetworkParams,
}

fn save_last(base: &Path, s: &State, net: &SegNetConfig) -> Result<()> {
    let meta = ResumeMeta {
        epochs_done: s.records.len(),
        adam_step: s.adam.step,
        records: s.records.clone(),
        best_epoch: s.best_epoch,
        best_mean_dice: s.best_mean_dice,
    };
    let moments_m = NetworkParams::from_map(s.adam.m.clone());
    let moments_v = NetworkParams::from_map(s.adam.v.clone());
    let mut arrays: Vec<(String, &Tensor)> = prefixed("student", &s.student).collect();
    if let Some(t) = &s.teacher {
        arrays.extend(prefixed("teacher", t));
    }
    arrays.extend(prefixed("adam_m", &moments_m));
    arrays.extend(prefixed("adam_v", &moments_v));
    arrays.extend(prefixed("best", &s.best_params));
    let meta = serde_json::json!({ "network": net, "resume": meta });
    write_arrays(base, arrays.iter().map(|(k, t)| (k.as_str(), *t)), meta)?;
    Ok(())
}

fn load_last(base: &Path, net: &SegNetConfig, with_teacher: bool) -> Result<State> {
    let (manifest, arrays) = read_arrays(base)?;
    let meta: ResumeMeta = serde_json::from_value(
        manifest
            .meta
            .get("resume")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint cannot be resumed".into()))?,
    )?;
    let student = NetworkParams::from_map(strip(&arrays, "student"));
    student.check_against(net)?;
    let teacher = if with_teacher {
        let t = NetworkParams::from_map(strip(&arrays, "teacher"));
        t.check_against(net)?;
        Some(t)
    } else {
        None
    };
    let best_params = NetworkParams::from_map(strip(&arrays, "best"));
    best_params.check_against(net)?;
    Ok(State {
        student,
        teacher,
        adam: AdamState {
            m: strip(&arrays, "adam_m"),
            v: strip(&arrays, "adam_v"),
            step: meta.adam_step,
        },
        records: meta.records,
        best_epoch: meta.best_epoch,
        best_mean_dice: meta.best_mean_dice,
        best_params,
    })
}

fn diverged(epoch: usize, iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteGrad(_) => Error::Diverged {
            epoch,
            iteration,
            reason: e.to_string(),
        },
        other => other,
    }
}

/// Trains `net` on `splits` with the method and schedule of `cfg`.
///
/// Validation Dice is computed after every epoch and the best epoch's
/// parameters are kept. With an output directory, `metrics.csv`,
/// `report.json` and the `best`/`last` checkpoints are written there; on
/// divergence the parameters before the failing step go to `last_good`.
pub fn train(cfg: &TrainConfig, net: &SegNetConfig, splits: &Splits, opts: &RunOptions) -> Result<TrainReport> {
    cfg.validate()?;
    net.validate()?;
    let started = Instant::now();
    if splits.labeled.is_empty() {
        return Err(invalid("the labeled split is empty"));
    }
    if splits.validation.is_empty() {
        return Err(invalid("the validation split is empty"));
    }
    let (h, w) = splits.labeled[0].extent();
    let div = net.extent_divisor();
    if h % div != 0 || w % div != 0 {
        return Err(crate::error::config_err(
            "data.extent",
            format!("{h}x{w} is not divisible by 2^depth = {div}"),
        ));
    }
    let pools = Pools::new(splits, cfg.method);
    let with_teacher = cfg.method.uses_teacher();

    let mut state = match (opts.resume, &opts.out_dir) {
        (true, Some(dir)) => load_last(&dir.join(LAST_CHECKPOINT), net, with_teacher)?,
        (true, None) => return Err(invalid("resuming needs an output directory")),
        (false, _) => {
            let student = init_params(&mut derived(cfg.seed, &[TAG_INIT]), net)?;
            State {
                teacher: with_teacher.then(|| student.clone()),
                adam: AdamState::new(&student),
                records: Vec::new(),
                best_epoch: None,
                best_mean_dice: -1.0,
                best_params: student.clone(),
                student,
            }
        }
    };
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
    }

    let mut global = 0;
    'stages: for (stage, stage_epochs) in cfg.stages() {
        let schedule = cfg.schedule(stage_epochs);
        let obj = cfg.objective(stage, net)?;
        let (labeled, unlabeled) = match stage {
            Stage::Pretrain => (&pools.labeled, &pools.everything),
            _ => (&pools.labeled, &pools.unlabeled),
        };
        if obj.needs_unlabeled() && unlabeled.is_empty() {
            return Err(invalid(format!("{} needs unlabeled images but the split has none", cfg.method)));
        }
        for local in 0..stage_epochs {
            let epoch = global;
            global += 1;
            if epoch < state.records.len() {
                continue;
            }
            if opts.stop_after.is_some_and(|s| epoch >= s) {
                break 'stages;
            }
            if local == 0 && epoch > 0 {
                state.adam = AdamState::new(&state.student);
            }
            let mut rng = derived(cfg.seed, &[TAG_EPOCH, epoch as u64]);
            let mut sums: BTreeMap<Term, f64> = BTreeMap::new();
            let mut total_sum = 0.0;
            let iters = cfg.iterations_per_epoch;
            for it in 0..iters {
                let lr = schedule.lr_at(local as f64 + it as f64 / iters as f64)?;
                let batch = sample_batch(&mut rng, cfg, &obj, labeled, unlabeled)?;
                let step = (|| {
                    let tape = crate::ndcore::Tape::new();
                    let bound = state.student.bind(&tape, true)?;
                    let teacher = match &state.teacher {
                        Some(t) if obj.teacher => Some(t.bind(&tape, false)?),
                        _ => None,
                    };
                    let (loss, breakdown) = total_loss(&tape, &bound, teacher.as_ref(), net, &obj, &batch)?;
                    let grads = tape.backward(loss)?;
                    let grads: BTreeMap<String, Tensor> =
                        bound.iter().map(|(k, v)| (k.clone(), grads.get_or_zeros(*v))).collect();
                    Ok::<_, Error>((grads, breakdown))
                })();
                let step = step.and_then(|(grads, bd)| {
                    optimizer_step(&mut state.student, &grads, &mut state.adam, lr)?;
                    Ok(bd)
                });
                let breakdown = match step {
                    Ok(bd) => bd,
                    Err(e) => {
                        let e = diverged(epoch, it, e);
                        if let (Error::Diverged { .. }, Some(dir)) = (&e, &opts.out_dir) {
                            save_model(
                                &dir.join(LAST_GOOD_CHECKPOINT),
                                &state.student,
                                net,
                                serde_json::json!({ "epoch": epoch, "iteration": it }),
                            )?;
                        }
                        return Err(e);
                    }
                };
                if let (Some(t), true) = (state.teacher.as_mut(), with_teacher) {
                    ema_update(t, &state.student, cfg.ema_decay)?;
                }
                for (term, v) in &breakdown.values {
                    *sums.entry(*term).or_default() += v;
                }
                total_sum += breakdown.total;
            }

            let eval = evaluate(&state.student, net, &splits.validation, None)?;
            let record = EpochRecord {
                epoch,
                stage,
                lr: schedule.lr_at(local as f64)?,
                losses: sums.into_iter().map(|(t, s)| (t, s / iters as f64)).collect(),
                total: total_sum / iters as f64,
                dice: eval.class_mean.clone(),
                mean_dice: eval.mean,
            };
            log::info!(
                "epoch {epoch} ({:?}) lr {:.3e} loss {:.5} mean dice {:.4}",
                stage,
                record.lr,
                record.total,
                record.mean_dice
            );
            if record.mean_dice > state.best_mean_dice {
                state.best_mean_dice = record.mean_dice;
                state.best_epoch = Some(epoch);
                state.best_params = state.student.clone();
                if let Some(dir) = &opts.out_dir {
                    save_model(
                        &dir.join(BEST_CHECKPOINT),
                        &state.best_params,
                        net,
                        serde_json::json!({ "epoch": epoch, "mean_dice": record.mean_dice }),
                    )?;
                }
            }
            state.records.push(record);
            if let Some(dir) = &opts.out_dir {
                save_last(&dir.join(LAST_CHECKPOINT), &state, net)?;
                fs::write(dir.join(METRICS_CSV), metrics_csv(cfg.method, net.classes, &state.records)?)?;
            }
        }
    }

    let report = TrainReport {
        config: cfg.clone(),
        network: net.clone(),
        epochs: state.records,
        best_epoch: state.best_epoch,
        best_mean_dice: state.best_mean_dice,
        checkpoint: opts.out_dir.as_ref().map(|d| d.join(BEST_CHECKPOINT)),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        best_params: Some(state.best_params),
    };
    if let Some(dir) = &opts.out_dir {
        fs::write(dir.join(METRICS_CSV), report.to_csv()?)?;
        fs::write(dir.join(REPORT_JSON), serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(report)
}
