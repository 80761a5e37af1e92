//! AdamW with decoupled weight decay.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// First and second moment buffers for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    /// Number of updates applied so far.
    pub step: u64,
    pub moments: IndexMap<String, Moments>,
}

/// One AdamW update of a flat parameter buffer. `step` is the 1-based index
/// of this update, used for bias correction.
///
/// The decay term is applied to the weights directly, `p -= lr * wd * p`,
/// not folded into the gradient.
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    moments: &mut Moments,
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grad.len() != param.len() || moments.m.len() != param.len() || moments.v.len() != param.len() {
        return Err(Error::Shape {
            op: "adamw_step",
            left: vec![param.len()],
            right: vec![grad.len(), moments.m.len(), moments.v.len()],
        });
    }
    let step = step.max(1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(step);
    let bc2 = 1.0 - cfg.beta2.powi(step);
    for i in 0..param.len() {
        let g = grad[i];
        moments.m[i] = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        moments.v[i] = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        if lr == 0.0 {
            continue;
        }
        let m_hat = moments.m[i] / bc1;
        let v_hat = moments.v[i] / bc2;
        param[i] -= lr * cfg.weight_decay * param[i];
        param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

impl AdamWState {
    /// Applies one update to every parameter selected by `trainable`, using
    /// the gradients stored on the parameters (missing gradients count as zero).
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        lr: f64,
        cfg: &AdamWConfig,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        self.step += 1;
        for (name, tensor) in store.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let n = tensor.len();
            let grad = tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            let moments =
                self.moments.entry(name.to_string()).or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            adamw_step(tensor.data_mut(), &grad, moments, self.step, lr, cfg)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn fresh(n: usize) -> Moments {
        Moments { m: vec![0.0; n], v: vec![0.0; n] }
    }

    #[test]
    fn zero_grad_without_decay_is_a_no_op() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = vec![0.7, -1.2];
        adamw_step(&mut p, &[0.0, 0.0], &mut fresh(2), 1, 0.1, &cfg).unwrap();
        assert_eq!(p, vec![0.7, -1.2]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = vec![0.0];
        adamw_step(&mut p, &[1.0], &mut fresh(1), 1, 0.1, &cfg).unwrap();
        // m_hat = 1, v_hat = 1  =>  delta = 0.1 / (1 + 1e-8)
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay() {
        let cfg = AdamWConfig { weight_decay: 0.01, ..Default::default() };
        let mut p = vec![1.0];
        adamw_step(&mut p, &[0.0], &mut fresh(1), 1, 0.1, &cfg).unwrap();
        assert!((p[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let cfg = AdamWConfig::default();
        let mut p = vec![0.3, 4.0, -2.0];
        let before = p.clone();
        let mut m = fresh(3);
        for step in 1..5 {
            adamw_step(&mut p, &[1.0, -3.0, 0.5], &mut m, step, 0.0, &cfg).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let cfg = AdamWConfig::default();
        let mut p = vec![0.0; 3];
        assert!(adamw_step(&mut p, &[1.0], &mut fresh(3), 1, 0.1, &cfg).is_err());
    }

    #[test]
    fn state_update_respects_trainable_filter() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::vector(vec![1.0]));
        store.insert("b", Tensor::vector(vec![1.0]));
        store.get_mut("a").unwrap().accumulate_grad(&[1.0]);
        store.get_mut("b").unwrap().accumulate_grad(&[1.0]);
        let mut state = AdamWState::default();
        state.update(&mut store, 0.1, &AdamWConfig::default(), |n| n == "a").unwrap();
        assert!(store.get("a").unwrap().data()[0] < 1.0);
        assert_eq!(store.get("b").unwrap().data()[0], 1.0);
        assert_eq!(state.step, 1);
        assert!(!state.moments.contains_key("b"));
    }
}
