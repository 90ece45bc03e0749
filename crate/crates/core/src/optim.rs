//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("gradient for unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("gradient `{name}` has shape {grad}, parameter has {param}")]
    Shape { name: String, param: Shape, grad: Shape },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            ..Default::default()
        }
    }

    /// One update of every parameter named in `grads`. Parameters without a
    /// gradient are left alone and keep their moments.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<(), OptimError> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| OptimError::UnknownParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(OptimError::Shape {
                    name: name.clone(),
                    param: p.shape().clone(),
                    grad: g.shape().clone(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().clone()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().clone()));
            let p = params.get_mut(name).expect("checked above");
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape;

    fn store(vals: &[f64]) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w/kernel", Tensor::from_vec(shape![vals.len()], vals.to_vec()).unwrap());
        p
    }

    fn grads(vals: &[f64]) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(
            "w/kernel".to_string(),
            Tensor::from_vec(shape![vals.len()], vals.to_vec()).unwrap(),
        )])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(&[1.0, -2.0]);
        let mut s = AdamState::new(AdamConfig::default());
        s.step(&mut p, &grads(&[0.0, 0.0])).unwrap();
        assert_eq!(p, store(&[1.0, -2.0]));
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let g = [0.5, -3.0, 1e-3];
        let mut p = store(&[0.0; 3]);
        let mut s = AdamState::new(AdamConfig::default());
        s.step(&mut p, &grads(&g)).unwrap();
        // m_hat = g and v_hat = g^2 after one step, so the update is
        // -lr * g / (|g| + eps)
        for (&x, &gi) in p.get("w/kernel").unwrap().data().iter().zip(&g) {
            let want = -0.001 * gi / (gi.abs() + 1e-8);
            assert!((x - want).abs() < 1e-15, "{x} vs {want}");
        }
    }

    #[test]
    fn trajectory_is_deterministic() {
        let run = || {
            let mut p = store(&[0.3, 0.7]);
            let mut s = AdamState::new(AdamConfig::default());
            for k in 0..5 {
                s.step(&mut p, &grads(&[0.1 * k as f64, -0.2])).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = store(&[0.0]);
        let mut s = AdamState::new(AdamConfig::default());
        assert!(matches!(
            s.step(&mut p, &grads(&[1.0, 2.0])),
            Err(OptimError::Shape { .. })
        ));
        let other = BTreeMap::from([("x".to_string(), Tensor::zeros(shape![1]))]);
        assert!(matches!(s.step(&mut p, &other), Err(OptimError::UnknownParam(_))));
        assert_eq!(s.step, 0);
    }
}
