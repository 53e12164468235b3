use serde::{Deserialize, Serialize};

use super::ExpertGradients;
use crate::error::{Error, Result};
use crate::router::ExpertSet;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every expert, plus the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
}

impl AdamWState {
    pub fn new(experts: &ExpertSet) -> Self {
        let zeros = vec![Mat::zeros(experts.prompt_len(), experts.dim()); experts.len()];
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update with decoupled weight decay:
/// `p ← p(1 − lr·wd) − lr · m̂ / (√v̂ + eps)`.
pub fn adamw_step(
    experts: &mut ExpertSet,
    grads: &ExpertGradients,
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.grads.len() != experts.len() || state.m.len() != experts.len() {
        return Err(Error::shape("optimizer state, gradients and experts disagree in count"));
    }
    let shape = (experts.prompt_len(), experts.dim());
    if grads.grads.iter().chain(&state.m).any(|g| g.shape() != shape) {
        return Err(Error::shape("optimizer state or gradient shape differs from the experts"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;

    for (e, ((g, m), v)) in experts
        .iter_mut()
        .zip(grads.grads.iter().zip(state.m.iter_mut()).zip(state.v.iter_mut()))
    {
        for (((p, &gk), mk), vk) in e
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice())
        {
            *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * gk;
            *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = *mk / bias1;
            let v_hat = *vk / bias2;
            *p = *p * decay - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ExpertSet {
        ExpertSet::new(vec![Mat::from_vec(1, 1, vec![v]).unwrap()]).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut experts = scalar_set(0.7);
        let mut state = AdamWState::new(&experts);
        let grads = ExpertGradients::zeros_like(&experts);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut experts, &grads, &mut state, &cfg).unwrap();
        assert_eq!(experts, scalar_set(0.7));
        assert_eq!(state.step(), 1);
        adamw_step(&mut experts, &grads, &mut state, &cfg).unwrap();
        assert_eq!(state.step(), 2);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut experts = scalar_set(0.0);
        let mut state = AdamWState::new(&experts);
        let grads = ExpertGradients {
            grads: vec![Mat::from_vec(1, 1, vec![1.0]).unwrap()],
        };
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut experts, &grads, &mut state, &cfg).unwrap();
        // m = 0.1, v = 0.001; m̂ = 1, v̂ = 1 → Δ = −lr / (1 + eps)
        let expected = -4e-4 / (1.0 + 1e-8);
        assert!((experts.get(0).as_slice()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut experts = scalar_set(2.0);
        let mut state = AdamWState::new(&experts);
        let grads = ExpertGradients::zeros_like(&experts);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        adamw_step(&mut experts, &grads, &mut state, &cfg).unwrap();
        assert!((experts.get(0).as_slice()[0] - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut experts = scalar_set(-1.5);
        let mut state = AdamWState::new(&experts);
        let grads = ExpertGradients {
            grads: vec![Mat::from_vec(1, 1, vec![3.0]).unwrap()],
        };
        let cfg = AdamWConfig {
            lr: 0.0,
            ..AdamWConfig::default()
        };
        for _ in 0..5 {
            adamw_step(&mut experts, &grads, &mut state, &cfg).unwrap();
        }
        assert_eq!(experts, scalar_set(-1.5));
    }
}
