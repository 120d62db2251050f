use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per parameter tensor, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamWState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.params().iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

/// One AdamW update: decoupled decay, then the bias-corrected Adam step.
/// `grads[i]` belongs to parameter `i`; `None` leaves it untouched. The
/// whole step is rejected if any gradient is non-finite.
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &[Option<Vec<T>>],
    state: &mut AdamWState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::shape("adamw", format!("{} grads, {} params, {} moments", grads.len(), store.len(), state.m.len())));
    }
    for (p, g) in store.params().iter().zip(grads) {
        if let Some(g) = g {
            if g.len() != p.tensor.numel() {
                return Err(Error::shape("adamw", format!("{}: grad {} vs param {}", p.name, g.len(), p.tensor.numel())));
            }
            if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {}[{bad}] is {}; step {} rejected",
                    p.name,
                    g[bad],
                    state.step + 1
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::c(1.0 - cfg.beta1.powi(t));
    let bc2 = T::c(1.0 - cfg.beta2.powi(t));
    let (b1, b2) = (T::c(cfg.beta1), T::c(cfg.beta2));
    let (lr, eps) = (T::c(cfg.lr), T::c(cfg.eps));
    let decay = T::one() - T::c(cfg.lr * cfg.weight_decay);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let theta = store.params_mut()[i].tensor.data_mut();
        for j in 0..theta.len() {
            theta[j] = theta[j] * decay;
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            theta[j] = theta[j] - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(vals: &[(&str, Vec<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, v) in vals {
            s.add(*n, Tensor::new([v.len()], v.clone()).unwrap(), true);
        }
        s
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = store(&[("theta", vec![1.0])]);
        let mut st = AdamWState::new(&s);
        // f = theta^2 / 2, gradient theta
        adamw_step(&mut s, &[Some(vec![1.0])], &mut st, &AdamWConfig::new(0.1, 0.0)).unwrap();
        let expect = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.params()[0].tensor.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn pure_decay_with_zero_gradient() {
        let mut s = store(&[("a", vec![2.0, -3.0])]);
        let mut st = AdamWState::new(&s);
        adamw_step(&mut s, &[Some(vec![0.0, 0.0])], &mut st, &AdamWConfig::new(0.01, 0.1)).unwrap();
        let d = s.params()[0].tensor.data();
        assert!((d[0] - 2.0 * (1.0 - 0.001)).abs() < 1e-15 && (d[1] + 3.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn groups_are_independent_and_bad_grads_rejected() {
        let mut s = store(&[("a", vec![1.0]), ("b", vec![1.0])]);
        let mut st = AdamWState::new(&s);
        let cfg = AdamWConfig::new(0.1, 0.0);
        adamw_step(&mut s, &[Some(vec![1.0]), None], &mut st, &cfg).unwrap();
        assert_eq!(s.params()[1].tensor.data()[0], 1.0);
        let before = s.flatten();
        let e = adamw_step(&mut s, &[Some(vec![f64::NAN]), Some(vec![1.0])], &mut st, &cfg).unwrap_err();
        assert!(e.to_string().contains("a[0]"));
        assert_eq!(s.flatten(), before);
        assert_eq!(st.step, 1);
    }
}
