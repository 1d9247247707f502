//! Clustering random 3-D points by maximizing the mutual information between
//! the cluster assignments of each point and a slightly perturbed copy.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::infomax::{estimate_joint, mutual_information, ClusterAssignment};
use crate::ndcore::{Tape, Tensor, Var};
use crate::network::NetworkParams;
use crate::rng::derived;
use crate::trainer::{optimizer_step, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    /// Number of points, drawn uniformly from `[-1, 1]^3`.
    pub n: usize,
    /// Number of clusters.
    pub k: usize,
    pub steps: usize,
    /// Std of the Gaussian perturbation producing the second view.
    pub noise_std: f64,
    pub lr: f64,
    /// Std of the initial head weights.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n: 600,
            k: 3,
            steps: 2000,
            noise_std: 0.01,
            lr: 0.2,
            init_std: 0.01,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(config_err("toy.k", "need at least 2 clusters"));
        }
        if self.n < self.k {
            return Err(config_err("toy.n", "need at least as many points as clusters"));
        }
        if !(self.noise_std >= 0.0) || !(self.lr > 0.0) || !(self.init_std >= 0.0) {
            return Err(config_err("toy.lr", "noise_std, lr and init_std must be non-negative, lr positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub config: ToyConfig,
    /// MI before each step, followed by the final value.
    pub mi_trajectory: Vec<f64>,
    pub final_mi: f64,
    /// Joint of clean and perturbed assignments after training.
    pub joint: Vec<Vec<f64>>,
    pub diagonal_mass: f64,
    pub points: Vec<[f64; 3]>,
    /// Arg-max cluster of each clean point.
    pub assignments: Vec<usize>,
    pub cluster_sizes: Vec<usize>,
}

/// Clean-view MI, joint and clean assignment probabilities for head `(w, b)`.
fn forward<'t>(w: Var<'t>, b: Var<'t>, clean: &Tensor, noisy: &Tensor) -> Result<(Var<'t>, Tensor, Tensor)> {
    let tape = w.tape();
    let head = |x: &Tensor| -> Result<ClusterAssignment<'t>> {
        let logits = tape.constant(x.clone())?.matmul(&w)?.add(&b)?;
        Ok(ClusterAssignment::trusted(logits.softmax(1)?))
    };
    let a = head(clean)?;
    let a2 = head(noisy)?;
    let joint = estimate_joint(&a, &a2, true)?;
    let mi = mutual_information(&joint)?;
    Ok((mi, joint.matrix(), a.probs().value().as_ref().clone()))
}

fn bind<'t>(tape: &'t Tape, params: &NetworkParams) -> Result<(Var<'t>, Var<'t>)> {
    Ok((
        tape.param(params.get("w").expect("w").clone())?,
        tape.param(params.get("b").expect("b").clone())?,
    ))
}

/// Trains a linear head with softmax to cluster uniform 3-D points.
pub fn toy_cluster(cfg: &ToyConfig) -> Result<ToyReport> {
    cfg.validate()?;
    let mut rng = derived(cfg.seed, &[0x746f_79]);
    let points: Vec<[f64; 3]> = (0..cfg.n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect();
    let clean = Tensor::new(&[cfg.n, 3], points.iter().flatten().copied().collect())?;
    let init = Normal::new(0.0, cfg.init_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let w = if cfg.init_std > 0.0 {
        Tensor::new(&[3, cfg.k], (0..3 * cfg.k).map(|_| init.sample(&mut rng)).collect())?
    } else {
        Tensor::zeros(&[3, cfg.k])
    };
    let mut params = NetworkParams::from_map(BTreeMap::from([
        ("w".to_string(), w),
        ("b".to_string(), Tensor::zeros(&[cfg.k])),
    ]));
    let mut adam = AdamState::new(&params);
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let perturb = |rng: &mut crate::rng::Rng| -> Result<Tensor> {
        let data = if cfg.noise_std > 0.0 {
            clean.data().iter().map(|v| v + noise.sample(rng)).collect()
        } else {
            clean.data().to_vec()
        };
        Tensor::new(&[cfg.n, 3], data)
    };

    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let noisy = perturb(&mut rng)?;
        let tape = Tape::new();
        let (w, b) = bind(&tape, &params)?;
        let (mi, _, _) = forward(w, b, &clean, &noisy)?;
        trajectory.push(mi.item());
        let grads = tape.backward(mi.neg()?)?;
        let g = BTreeMap::from([
            ("w".to_string(), grads.get_or_zeros(w)),
            ("b".to_string(), grads.get_or_zeros(b)),
        ]);
        optimizer_step(&mut params, &g, &mut adam, cfg.lr)?;
    }

    let noisy = perturb(&mut rng)?;
    let tape = Tape::new();
    let (w, b) = bind(&tape, &params)?;
    let (mi, joint, probs) = forward(w, b, &clean, &noisy)?;
    let final_mi = mi.item();
    trajectory.push(final_mi);
    let k = cfg.k;
    let joint_rows: Vec<Vec<f64>> = joint.data().chunks(k).map(<[f64]>::to_vec).collect();
    let diagonal_mass = (0..k).map(|i| joint_rows[i][i]).sum();
    let assignments: Vec<usize> = probs
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
                .0
        })
        .collect();
    let mut cluster_sizes = vec![0; k];
    for &a in &assignments {
        cluster_sizes[a] += 1;
    }
    Ok(ToyReport {
        config: cfg.clone(),
        mi_trajectory: trajectory,
        final_mi,
        joint: joint_rows,
        diagonal_mass,
        points,
        assignments,
        cluster_sizes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_k_rejected() {
        assert!(toy_cluster(&ToyConfig { k: 1, ..ToyConfig::default() }).is_err());
        assert!(toy_cluster(&ToyConfig { n: 2, k: 3, ..ToyConfig::default() }).is_err());
    }

    #[test]
    fn untrained_head_has_near_zero_mi() {
        let r = toy_cluster(&ToyConfig { steps: 0, ..ToyConfig::default() }).unwrap();
        assert_eq!(r.mi_trajectory.len(), 1);
        assert!(r.final_mi.abs() < 1e-3, "{}", r.final_mi);
    }

    #[test]
    fn short_run_increases_mi() {
        let r = toy_cluster(&ToyConfig { steps: 200, ..ToyConfig::default() }).unwrap();
        assert!(r.final_mi > r.mi_trajectory[0] + 0.3, "{:?}", r.final_mi);
        assert_eq!(r.cluster_sizes.iter().sum::<usize>(), 600);
    }
}
