use std::collections::BTreeMap;

use crate::error::{invalid, Error, Result};
use crate::ndcore::Tensor;
use crate::network::NetworkParams;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new(params: &NetworkParams) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Every gradient is checked before any
/// parameter changes; a missing gradient counts as zero.
pub fn optimizer_step(
    params: &mut NetworkParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| invalid(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "optimizer_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGrad(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, p) in params.iter_mut() {
        let (Some(m), Some(v)) = (state.m.get_mut(name), state.v.get_mut(name)) else {
            return Err(invalid(format!("optimizer state lacks `{name}`")));
        };
        if m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(invalid(format!("optimizer moments for `{name}` have the wrong shape")));
        }
        let g = grads.get(name);
        let (m, v, p) = (m.data_mut(), v.data_mut(), p.data_mut());
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, t: Tensor) -> NetworkParams {
        NetworkParams::from_map([(name.to_string(), t)].into())
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_noop() {
        let mut p = single("w", Tensor::from_vec(vec![1.0, -2.0]));
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let g = [("w".to_string(), Tensor::zeros(&[2]))].into();
        optimizer_step(&mut p, &g, &mut s, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn moments_decay_without_gradient() {
        let mut p = single("w", Tensor::from_vec(vec![1.0]));
        let mut s = AdamState::new(&p);
        let g1 = [("w".to_string(), Tensor::from_vec(vec![2.0]))].into();
        optimizer_step(&mut p, &g1, &mut s, 0.1).unwrap();
        let (m1, v1) = (s.m["w"].data()[0], s.v["w"].data()[0]);
        let g0 = [("w".to_string(), Tensor::zeros(&[1]))].into();
        optimizer_step(&mut p, &g0, &mut s, 0.1).unwrap();
        assert_eq!(s.m["w"].data()[0], ADAM_BETA1 * m1);
        assert_eq!(s.v["w"].data()[0], ADAM_BETA2 * v1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = single("w", Tensor::from_vec(vec![0.0, 0.0]));
        let mut s = AdamState::new(&p);
        let g = [("w".to_string(), Tensor::from_vec(vec![3.0, -0.5]))].into();
        optimizer_step(&mut p, &g, &mut s, 0.01).unwrap();
        let d = p.get("w").unwrap().data();
        assert!((d[0] + 0.01).abs() < 1e-9);
        assert!((d[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(w) = sum_i a_i (w_i - c_i)^2
        let a = [1.0, 4.0, 0.5];
        let c = [0.3, -1.2, 2.0];
        let mut p = single("w", Tensor::zeros(&[3]));
        let mut s = AdamState::new(&p);
        for step in 0..500 {
            let w = p.get("w").unwrap().data().to_vec();
            let g = (0..3).map(|i| 2.0 * a[i] * (w[i] - c[i])).collect();
            let lr = 0.1 * (1.0 - step as f64 / 500.0);
            optimizer_step(&mut p, &[("w".to_string(), Tensor::from_vec(g))].into(), &mut s, lr).unwrap();
        }
        let w = p.get("w").unwrap().data();
        for i in 0..3 {
            assert!((w[i] - c[i]).abs() < 1e-6, "{w:?}");
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single("enc0.conv1.w", Tensor::from_vec(vec![1.0]));
        let before = p.clone();
        let mut s = AdamState::new(&p);
        let g = [("enc0.conv1.w".to_string(), Tensor::from_vec(vec![f64::NAN]))].into();
        match optimizer_step(&mut p, &g, &mut s, 0.1) {
            Err(Error::NonFiniteGrad(name)) => assert_eq!(name, "enc0.conv1.w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p, before);
        assert_eq!(s.step, 0);
    }
}
