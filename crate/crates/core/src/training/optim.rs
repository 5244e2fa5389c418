//! Adam and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{HhftError, Result};
use crate::numerics::Tensor;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
/// `grads[i]` is the gradient of parameter `i`.
pub fn adam_step(store: &mut ParamStore, grads: &[Tensor], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(HhftError::Contract(format!(
            "adam_step: {} parameters, {} gradients, {} moment slots",
            store.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        let p = store.values()[i].shape();
        if g.shape() != p || state.m[i].shape() != p {
            return Err(HhftError::shape("adam_step", p, g.shape()));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = store.value_mut(id).data_mut();
        for j in 0..p.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Linear ramp from 0 over the first `warmup_frac` of all steps, then
    /// linear decay to 0 at the last step.
    #[default]
    WarmupLinearDecay,
}

/// Learning rate for 1-based step `step` of `total`.
pub fn lr_at(schedule: LrSchedule, base: f64, warmup_frac: f64, step: u64, total: u64) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::WarmupLinearDecay => {
            let total = total.max(1) as f64;
            let warm = (warmup_frac * total).ceil().max(1.0);
            let s = step as f64;
            if s <= warm {
                base * s / warm
            } else {
                base * ((total - s + 1.0) / (total - warm + 1.0)).clamp(0.0, 1.0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamRole;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let a = s.add("a", &[3], ParamRole::Weight);
        s.set(a, Tensor::vector(vec![1.0, -2.0, 0.5])).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params_and_advances_step() {
        let mut s = store();
        let before = s.values().to_vec();
        let mut st = OptimizerState::new(&s, AdamConfig::default());
        adam_step(&mut s, &[Tensor::zeros(&[3])], &mut st, 0.1).unwrap();
        assert_eq!(s.values(), before.as_slice());
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_with_zero_betas() {
        let mut s = store();
        let eps = 1e-8;
        let mut st = OptimizerState::new(&s, AdamConfig { beta1: 0.0, beta2: 0.0, eps });
        let g = [0.3, -4.0, 1e-3];
        adam_step(&mut s, &[Tensor::vector(g.to_vec())], &mut st, 0.01).unwrap();
        let p0 = [1.0, -2.0, 0.5];
        for j in 0..3 {
            let expect = p0[j] - 0.01 * g[j] / (g[j].abs() + eps);
            assert!((s.values()[0].data()[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_runs_identical_trajectories_and_shape_errors() {
        let run = || {
            let mut s = store();
            let mut st = OptimizerState::new(&s, AdamConfig::default());
            for k in 0..5 {
                let g = Tensor::vector(vec![k as f64, 1.0 - k as f64, 0.25]);
                adam_step(&mut s, &[g], &mut st, 0.05).unwrap();
            }
            s.values()[0].clone()
        };
        assert_eq!(run(), run());
        let mut s = store();
        let mut st = OptimizerState::new(&s, AdamConfig::default());
        assert!(matches!(adam_step(&mut s, &[Tensor::zeros(&[2])], &mut st, 0.1), Err(HhftError::Shape { .. })));
        assert!(matches!(adam_step(&mut s, &[], &mut st, 0.1), Err(HhftError::Contract(_))));
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_at(LrSchedule::Constant, 0.1, 0.1, 7, 10), 0.1);
        let lrs: Vec<f64> = (1..=10).map(|s| lr_at(LrSchedule::WarmupLinearDecay, 1.0, 0.2, s, 10)).collect();
        assert_eq!(lrs[0], 0.5);
        assert_eq!(lrs[1], 1.0);
        assert!(lrs[2..].windows(2).all(|w| w[1] < w[0]));
        assert!(lrs[9] > 0.0);
    }
}
