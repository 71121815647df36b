//! Adaptive-moment optimizer with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay coefficient; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    /// AdamW at the fine-tuning learning rate of 1e-4.
    pub fn adamw() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }

    /// Adam without decay at the classifier learning rate of 1e-3.
    pub fn adam() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// One parameter handed to [`OptimizerState::step`].
pub struct ParamSlot<'a> {
    pub name: &'a str,
    pub value: &'a mut Tensor,
    pub grad: &'a [f32],
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every slot. Refuses the whole step, touching nothing,
    /// if any gradient is non-finite or mis-shaped.
    pub fn step(&mut self, slots: &mut [ParamSlot<'_>]) -> Result<()> {
        for s in slots.iter() {
            if s.grad.len() != s.value.len() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    shapes: vec![s.value.shape().to_vec(), vec![s.grad.len()]],
                });
            }
            if s.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { op: "adamw_step" });
            }
            if let Some(m) = self.moments.get(s.name) {
                if m.m.len() != s.value.len() {
                    return Err(Error::invalid(format!("optimizer moments for {} have changed shape", s.name)));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.lr * c.weight_decay;
        for s in slots.iter_mut() {
            let mom = self
                .moments
                .entry(s.name.to_owned())
                .or_insert_with(|| Moments { m: vec![0.0; s.grad.len()], v: vec![0.0; s.grad.len()] });
            let mut w = s.value.to_vec();
            for (((w, &g), m), v) in w.iter_mut().zip(s.grad).zip(&mut mom.m).zip(&mut mom.v) {
                let g = f64::from(g);
                let m64 = c.beta1 * f64::from(*m) + (1.0 - c.beta1) * g;
                let v64 = c.beta2 * f64::from(*v) + (1.0 - c.beta2) * g * g;
                *m = m64 as f32;
                *v = v64 as f32;
                let update = (m64 / bc1) / ((v64 / bc2).sqrt() + c.eps);
                *w = (f64::from(*w) * decay - c.lr * update) as f32;
            }
            *s.value = Tensor::param(s.value.shape(), w)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(state: &mut OptimizerState, w: &mut Tensor, g: &[f32]) -> Result<()> {
        state.step(&mut [ParamSlot { name: "w", value: w, grad: g }])
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut w = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = w.to_vec();
        let mut st = OptimizerState::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::adamw() });
        one(&mut st, &mut w, &[0.0; 3]).unwrap();
        assert_eq!(w.to_vec(), before);
    }

    #[test]
    fn hand_stepped_first_update() {
        // m = 0.1, v = 0.001, m_hat = 1, v_hat = 1
        // w' = 1 - 0.1 * 1 / (1 + 1e-8) = 0.899999999...
        let expected = (1.0f64 - 0.1 * 1.0 / (1.0 + 1e-8)) as f32;
        let mut w = Tensor::param(&[1], vec![1.0]).unwrap();
        let cfg = AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let mut st = OptimizerState::new(cfg);
        one(&mut st, &mut w, &[1.0]).unwrap();
        assert_eq!(w.item(), expected);
        assert_eq!(w.item(), 0.9f32);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn decay_only_two_steps() {
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.5, ..AdamConfig::adamw() };
        let f = 1.0 - cfg.lr * cfg.weight_decay;
        let w0 = 3.0f32;
        let mut w = Tensor::param(&[1], vec![w0]).unwrap();
        let mut st = OptimizerState::new(cfg);
        one(&mut st, &mut w, &[0.0]).unwrap();
        one(&mut st, &mut w, &[0.0]).unwrap();
        let expected = ((f64::from(w0) * f) as f32 as f64 * f) as f32;
        assert_eq!(w.item(), expected);
        assert!((f64::from(w.item()) - f64::from(w0) * f * f).abs() < 1e-6);
        assert_eq!(st.step_count(), 2);
    }

    #[test]
    fn non_finite_grad_refused() {
        let mut w = Tensor::param(&[2], vec![1.0, 1.0]).unwrap();
        let mut st = OptimizerState::new(AdamConfig::adamw());
        let err = one(&mut st, &mut w, &[f32::NAN, 0.0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(st.step_count(), 0);
        assert_eq!(w.to_vec(), vec![1.0, 1.0]);
    }
}
