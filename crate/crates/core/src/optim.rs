//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-5, beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Applies one Adam update to each listed parameter, then zeroes its gradient.
///
/// Every listed parameter's step counter advances by exactly one, even when
/// its gradient is zero.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, ids: &[ParamId], cfg: &AdamConfig) {
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    let one = T::one();
    for &id in ids {
        let p = store.get_mut(id);
        p.adam.step += 1;
        let t = i32::try_from(p.adam.step).unwrap_or(i32::MAX);
        let c1 = one - b1.powi(t);
        let c2 = one - b2.powi(t);
        let grad = p.grad.data();
        let value = p.value.data_mut();
        for (((w, &g), m), v) in value.iter_mut().zip(grad).zip(p.adam.m.iter_mut()).zip(p.adam.v.iter_mut()) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_leaves_value_and_counts_step() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_vec(vec![1.5, -2.0])).unwrap();
        adam_step(&mut store, &[id], &AdamConfig::with_lr(0.1));
        let p = store.get(id);
        assert_eq!(p.value.data(), &[1.5, -2.0]);
        assert_eq!(p.adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_vec(vec![0.0])).unwrap();
        store.get_mut(id).grad.data_mut()[0] = 3.7;
        adam_step(&mut store, &[id], &AdamConfig::with_lr(0.01));
        let moved = store.get(id).value.data()[0];
        assert!((moved + 0.01).abs() < 1e-9, "moved {moved}");
        assert_eq!(store.get(id).grad.data(), &[0.0]);
    }

    #[test]
    fn quadratic_loss_decreases_monotonically() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_vec(vec![0.0])).unwrap();
        let cfg = AdamConfig::with_lr(0.1);
        let loss = |w: f64| (w - 3.0) * (w - 3.0);
        let mut prev = loss(store.get(id).value.data()[0]);
        for _ in 0..10 {
            let w = store.get(id).value.data()[0];
            store.get_mut(id).grad.data_mut()[0] = 2.0 * (w - 3.0);
            adam_step(&mut store, &[id], &cfg);
            let now = loss(store.get(id).value.data()[0]);
            assert!(now < prev, "{now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn unlisted_parameters_are_untouched() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", Tensor::from_vec(vec![1.0])).unwrap();
        let b = store.insert("b", Tensor::from_vec(vec![1.0])).unwrap();
        store.get_mut(a).grad.data_mut()[0] = 1.0;
        store.get_mut(b).grad.data_mut()[0] = 1.0;
        adam_step(&mut store, &[a], &AdamConfig::with_lr(0.5));
        assert_eq!(store.get(b).value.data(), &[1.0]);
        assert_eq!(store.get(b).adam.step, 0);
        assert_eq!(store.get(b).grad.data(), &[1.0]);
    }
}
