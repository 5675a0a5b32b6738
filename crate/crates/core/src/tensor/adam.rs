use std::collections::BTreeMap;

use ndarray::{Array2, Zip};

use super::Parameter;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and step count for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Array2<f64>,
    pub second: Array2<f64>,
    pub step: u64,
}

/// Adaptive-moment optimizer. Moments are tracked per parameter name, so a
/// parameter updated in several phases of a batch advances its own counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    pub fn insert_moments(&mut self, name: String, moments: Moments) {
        self.moments.insert(name, moments);
    }

    /// Applies one bias-corrected update to every parameter and zeroes its gradient.
    ///
    /// All gradients are checked before anything is modified.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        for p in params.iter() {
            if !p.grad.is_finite() {
                return Err(Error::Training {
                    phase: "optimizer".into(),
                    detail: format!("non-finite gradient for {}", p.name),
                });
            }
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        for p in params.iter_mut() {
            let state = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                first: Array2::zeros(p.value.array().dim()),
                second: Array2::zeros(p.value.array().dim()),
                step: 0,
            });
            state.step += 1;
            let c1 = 1.0 - beta1.powi(state.step as i32);
            let c2 = 1.0 - beta2.powi(state.step as i32);
            Zip::from(p.value.array_mut())
                .and(&mut state.first)
                .and(&mut state.second)
                .and(p.grad.array())
                .for_each(|w, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *w -= lr * mh / (vh.sqrt() + eps);
                });
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_param(v: f64) -> Parameter {
        Parameter::new("w", Tensor::scalar(v))
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_param(1.0);
        p.grad = Tensor::scalar(1.0);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        adam.step(&mut [&mut p]).unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + eps)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.value.item().unwrap() - expected).abs() < 1e-15);
        assert_eq!(p.grad.item().unwrap(), 0.0);
        assert_eq!(adam.moments()["w"].step, 1);
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut p = Parameter::new("w", Tensor::from_vec(1, 3, vec![0.5, -2.0, 3.0]).unwrap());
        let before = p.value.clone();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            adam.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.value, before);
    }

    #[test]
    fn identical_inputs_give_identical_trajectories() {
        let run = || {
            let mut p = scalar_param(0.3);
            let mut adam = Adam::new(AdamConfig::default());
            let mut trace = Vec::new();
            for i in 0..5 {
                p.grad = Tensor::scalar((i as f64 * 0.7).sin());
                adam.step(&mut [&mut p]).unwrap();
                trace.push(p.value.item().unwrap().to_bits());
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_grad_names_parameter() {
        let mut p = scalar_param(0.0);
        p.grad = Tensor::scalar(f64::NAN);
        let err = Adam::new(AdamConfig::default()).step(&mut [&mut p]).unwrap_err();
        assert!(err.to_string().contains('w'));
    }
}
