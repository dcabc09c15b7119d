use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Error;

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place.
    ///
    /// A non-finite gradient aborts the whole step before any parameter is
    /// touched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<(), Error> {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        for (i, g) in grads.iter().enumerate() {
            assert_eq!(
                g.shape(),
                params.get(ParamId(i)).shape(),
                "gradient shape mismatch for {}",
                params.name(ParamId(i))
            );
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    param: params.name(ParamId(i)).to_string(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (g, p)) in grads.iter().zip(params.values_mut()).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `max_lr` at step 0 to `min_lr` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub max_lr: f64,
    pub min_lr: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn new(max_lr: f64, min_lr: f64, total_steps: u64) -> Self {
        Self {
            max_lr,
            min_lr,
            total_steps,
        }
    }

    /// Learning rate at step `t`; steps past the end stay at `min_lr`.
    pub fn lr(&self, t: u64) -> f64 {
        if self.total_steps == 0 || t >= self.total_steps {
            return if t == 0 && self.total_steps == 0 {
                self.max_lr
            } else {
                self.min_lr
            };
        }
        let frac = t as f64 / self.total_steps as f64;
        self.min_lr + 0.5 * (self.max_lr - self.min_lr) * (1.0 + (PI * frac).cos())
    }
}
