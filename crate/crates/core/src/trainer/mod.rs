//! Objective assembly, optimisation and the training loop for every method.

mod eval;
mod loss;
mod optim;
mod run;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentPool, IntensityNoise};
use crate::error::{config_err, invalid, Result};
use crate::infomax::DisplacementSet;
use crate::network::{SegNetConfig, Site};
use crate::transforms::TransformPool;

pub use eval::{evaluate, predict_volume, EvalReport, VolumeScore};
pub use loss::{supervised_loss, total_loss, Batch, Breakdown};
pub use optim::{optimizer_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use run::{load_model, save_model, train, EpochRecord, RunOptions, TrainReport, BEST_CHECKPOINT, LAST_CHECKPOINT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Supervised loss with every training label visible.
    FullSup,
    /// Supervised loss on the labeled split only.
    PartialSup,
    /// Supervised plus global and local MI.
    MiOnly,
    /// Supervised plus transformation consistency.
    ConsistencyOnly,
    /// Supervised plus prediction entropy on unlabeled images.
    EntropyMin,
    /// Supervised plus consistency against an EMA teacher.
    MeanTeacher,
    /// Supervised, global MI, local MI and consistency.
    Ours,
    /// As `Ours`, with the EMA teacher providing the second view.
    OursEma,
    /// MI and consistency on all images first, then supervised fine-tuning.
    PretrainFinetune,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::FullSup,
        Method::PartialSup,
        Method::MiOnly,
        Method::ConsistencyOnly,
        Method::EntropyMin,
        Method::MeanTeacher,
        Method::Ours,
        Method::OursEma,
        Method::PretrainFinetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FullSup => "full_sup",
            Method::PartialSup => "partial_sup",
            Method::MiOnly => "mi_only",
            Method::ConsistencyOnly => "consistency_only",
            Method::EntropyMin => "entropy_min",
            Method::MeanTeacher => "mean_teacher",
            Method::Ours => "ours",
            Method::OursEma => "ours_ema",
            Method::PretrainFinetune => "pretrain_finetune",
        }
    }

    /// Loss terms reported for this method, in column order.
    pub fn terms(self) -> Vec<Term> {
        use Term::*;
        match self {
            Method::FullSup | Method::PartialSup => vec![Spv],
            Method::MiOnly => vec![Spv, MiGlobal, MiLocal],
            Method::ConsistencyOnly | Method::MeanTeacher => vec![Spv, Cons],
            Method::EntropyMin => vec![Spv, Entropy],
            Method::Ours | Method::OursEma | Method::PretrainFinetune => vec![Spv, MiGlobal, MiLocal, Cons],
        }
    }

    pub fn uses_teacher(self) -> bool {
        matches!(self, Method::MeanTeacher | Method::OursEma)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown method `{s}`")))
    }
}

/// One additive component of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Spv,
    MiGlobal,
    MiLocal,
    Cons,
    Entropy,
}

impl Term {
    pub fn name(self) -> &'static str {
        match self {
            Term::Spv => "spv",
            Term::MiGlobal => "mi_global",
            Term::MiLocal => "mi_local",
            Term::Cons => "cons",
            Term::Entropy => "entropy",
        }
    }
}

/// Weighted terms optimised in one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    /// Weight of the supervised term (0 or 1).
    pub spv: f64,
    pub global: f64,
    pub local: f64,
    pub cons: f64,
    pub entropy: f64,
    /// Second MI view and consistency target come from the EMA teacher.
    pub teacher: bool,
    pub symmetrize: bool,
    /// Transform pool for the second view.
    pub pool: TransformPool,
    /// Displacements per local site.
    pub displacements: BTreeMap<Site, DisplacementSet>,
}

impl Objective {
    pub fn needs_unlabeled(&self) -> bool {
        self.global > 0.0 || self.local > 0.0 || self.cons > 0.0 || self.entropy > 0.0
    }

    /// Supervised term only.
    pub fn supervised() -> Self {
        Self {
            spv: 1.0,
            global: 0.0,
            local: 0.0,
            cons: 0.0,
            entropy: 0.0,
            teacher: false,
            symmetrize: true,
            pool: TransformPool::identity_only(),
            displacements: BTreeMap::new(),
        }
    }
}

/// Which part of a two-stage run an epoch belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Main,
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    /// Global MI weight.
    pub lambda_global: f64,
    /// Local MI weight.
    pub lambda_local: f64,
    /// Consistency weight (also used by `mean_teacher`).
    pub lambda_cons: f64,
    /// Entropy weight for `entropy_min`.
    pub lambda_entropy: f64,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    /// Learning rate at the start of warm-up.
    pub base_lr: f64,
    /// Peak learning rate is `base_lr * warmup_factor`.
    pub warmup_factor: f64,
    pub warmup_epochs: usize,
    /// Displacement radius at every local site unless overridden.
    pub displacement_radius: u32,
    pub site_displacements: BTreeMap<Site, u32>,
    /// Symmetrize global joints as `(P + P^T) / 2`.
    pub symmetrize: bool,
    pub ema_decay: f64,
    /// Transforms producing the second view.
    pub transform_pool: TransformPool,
    pub augment: AugmentPool,
    /// Extra intensity perturbation of the student's unlabeled input.
    pub student_noise: IntensityNoise,
    /// Stage-one length for `pretrain_finetune`; half the epochs if unset.
    pub pretrain_epochs: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Ours,
            lambda_global: 0.1,
            lambda_local: 0.1,
            lambda_cons: 5.0,
            lambda_entropy: 0.1,
            epochs: 60,
            iterations_per_epoch: 100,
            labeled_batch: 4,
            unlabeled_batch: 10,
            base_lr: 2.5e-6,
            warmup_factor: 400.0,
            warmup_epochs: 10,
            displacement_radius: 1,
            site_displacements: BTreeMap::new(),
            symmetrize: true,
            ema_decay: 0.999,
            transform_pool: TransformPool::flips(),
            augment: AugmentPool::default(),
            student_noise: IntensityNoise::default(),
            pretrain_epochs: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("train.lambda_global", self.lambda_global),
            ("train.lambda_local", self.lambda_local),
            ("train.lambda_cons", self.lambda_cons),
            ("train.lambda_entropy", self.lambda_entropy),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err(field, "must be finite and non-negative"));
            }
        }
        for (field, v) in [
            ("train.student_noise.brightness", self.student_noise.brightness),
            ("train.student_noise.contrast", self.student_noise.contrast),
            ("train.student_noise.noise_std", self.student_noise.noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err(field, "must be finite and non-negative"));
            }
        }
        if self.epochs == 0 {
            return Err(config_err("train.epochs", "must be at least 1"));
        }
        if self.iterations_per_epoch == 0 {
            return Err(config_err("train.iterations_per_epoch", "must be at least 1"));
        }
        if self.labeled_batch == 0 {
            return Err(config_err("train.labeled_batch", "must be at least 1"));
        }
        if self.unlabeled_batch == 0 {
            return Err(config_err("train.unlabeled_batch", "must be at least 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(config_err("train.base_lr", "must be positive"));
        }
        if !(self.warmup_factor >= 1.0) {
            return Err(config_err("train.warmup_factor", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(config_err("train.ema_decay", "must lie in [0, 1)"));
        }
        self.transform_pool
            .validate()
            .map_err(|e| config_err("train.transform_pool", e.to_string()))?;
        if let Some(p) = self.pretrain_epochs {
            if p == 0 || p >= self.epochs {
                return Err(config_err("train.pretrain_epochs", "must lie in [1, epochs)"));
            }
        }
        if self.method == Method::PretrainFinetune && self.epochs < 2 {
            return Err(config_err("train.epochs", "pretrain_finetune needs at least 2 epochs"));
        }
        Ok(())
    }

    /// Stages with their epoch counts.
    pub fn stages(&self) -> Vec<(Stage, usize)> {
        if self.method == Method::PretrainFinetune {
            let pre = self.pretrain_epochs.unwrap_or(self.epochs / 2).max(1);
            vec![(Stage::Pretrain, pre), (Stage::Finetune, self.epochs - pre)]
        } else {
            vec![(Stage::Main, self.epochs)]
        }
    }

    pub fn schedule(&self, epochs: usize) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            factor: self.warmup_factor,
            warmup_epochs: self.warmup_epochs,
            epochs,
        }
    }

    fn displacements(&self, net: &SegNetConfig) -> Result<BTreeMap<Site, DisplacementSet>> {
        net.local_sites()
            .into_iter()
            .map(|site| {
                let r = self.site_displacements.get(&site).copied().unwrap_or(self.displacement_radius);
                Ok((site, DisplacementSet::square(r)))
            })
            .collect()
    }

    /// Loss weights used during `stage`.
    pub fn objective(&self, stage: Stage, net: &SegNetConfig) -> Result<Objective> {
        let full = Objective {
            spv: 1.0,
            global: self.lambda_global,
            local: self.lambda_local,
            cons: self.lambda_cons,
            entropy: 0.0,
            teacher: false,
            symmetrize: self.symmetrize,
            pool: self.transform_pool.clone(),
            displacements: self.displacements(net)?,
        };
        let o = match (self.method, stage) {
            (Method::FullSup | Method::PartialSup, _) | (Method::PretrainFinetune, Stage::Finetune) => {
                Objective::supervised()
            }
            (Method::MiOnly, _) => Objective { cons: 0.0, ..full },
            (Method::ConsistencyOnly, _) => Objective {
                global: 0.0,
                local: 0.0,
                ..full
            },
            (Method::EntropyMin, _) => Objective {
                entropy: self.lambda_entropy,
                ..Objective::supervised()
            },
            (Method::MeanTeacher, _) => Objective {
                global: 0.0,
                local: 0.0,
                teacher: true,
                ..full
            },
            (Method::Ours, _) => full,
            (Method::OursEma, _) => Objective { teacher: true, ..full },
            (Method::PretrainFinetune, _) => Objective { spv: 0.0, ..full },
        };
        Ok(o)
    }
}

/// Linear warm-up from `base_lr` to `factor * base_lr` over `warmup_epochs`,
/// then cosine decay to zero at `epochs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub factor: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
}

impl Schedule {
    /// Learning rate at a (possibly fractional) epoch in `[0, epochs)`.
    pub fn lr_at(&self, epoch: f64) -> Result<f64> {
        if !(epoch >= 0.0 && epoch < self.epochs as f64) {
            return Err(invalid(format!("epoch {epoch} outside [0, {})", self.epochs)));
        }
        let warm = self.warmup_epochs.min(self.epochs) as f64;
        let peak = self.base_lr * self.factor;
        if epoch < warm {
            return Ok(self.base_lr + (peak - self.base_lr) * epoch / warm);
        }
        let span = self.epochs as f64 - warm;
        let t = (epoch - warm) / span;
        Ok(0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

/// Learning rate at integer `epoch` of a single-stage run of `cfg`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    cfg.schedule(cfg.epochs).lr_at(epoch as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig {
            epochs: 100,
            base_lr: 1e-7,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg).unwrap(), 1e-7);
        assert!((lr_at(10, &cfg).unwrap() - 4e-5).abs() < 1e-12);
        let s = cfg.schedule(100);
        assert!(s.lr_at(100.0 - 1e-9).unwrap() < 1e-15);
        assert!(s.lr_at(100.0).is_err());
        assert!(s.lr_at(-1.0).is_err());
        let mut prev = f64::INFINITY;
        for e in 10..100 {
            let lr = lr_at(e, &cfg).unwrap();
            assert!(lr < prev);
            prev = lr;
        }
        for e in 1..10 {
            assert!(lr_at(e, &cfg).unwrap() > lr_at(e - 1, &cfg).unwrap());
        }
    }

    #[test]
    fn short_runs_stay_well_defined() {
        let s = Schedule {
            base_lr: 1.0,
            factor: 4.0,
            warmup_epochs: 10,
            epochs: 3,
        };
        assert_eq!(s.lr_at(0.0).unwrap(), 1.0);
        assert!(s.lr_at(2.5).unwrap() > 1.0);
    }

    #[test]
    fn ablations_zero_their_weights() {
        let net = SegNetConfig::default();
        let base = TrainConfig::default();
        let o = |m| TrainConfig { method: m, ..base.clone() }.objective(Stage::Main, &net).unwrap();
        assert_eq!(o(Method::MiOnly).cons, 0.0);
        assert_eq!(o(Method::ConsistencyOnly).global, 0.0);
        assert_eq!(o(Method::ConsistencyOnly).local, 0.0);
        assert!(!o(Method::PartialSup).needs_unlabeled());
        assert!(o(Method::OursEma).teacher);
        let pf = TrainConfig {
            method: Method::PretrainFinetune,
            ..base.clone()
        };
        assert_eq!(pf.stages(), vec![(Stage::Pretrain, 30), (Stage::Finetune, 30)]);
        assert_eq!(pf.objective(Stage::Pretrain, &net).unwrap().spv, 0.0);
        assert_eq!(pf.objective(Stage::Finetune, &net).unwrap(), Objective::supervised());
    }

    #[test]
    fn validation_names_fields() {
        let bad = TrainConfig {
            lambda_cons: -1.0,
            ..TrainConfig::default()
        };
        match bad.validate() {
            Err(crate::Error::Config { field, .. }) => assert_eq!(field, "train.lambda_cons"),
            other => panic!("{other:?}"),
        }
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
    }
}
