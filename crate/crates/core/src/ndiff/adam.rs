//! Adam with decoupled weight decay.
//!
//! ```text
//! m <- b1 m + (1 - b1) g
//! v <- b2 v + (1 - b2) g^2
//! p <- p - lr * ( m_hat / (sqrt(v_hat) + eps) + wd * p )
//! ```

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
        }
    }

    /// One update in place. Leaves everything untouched on error.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        let n = self.first_moment.len();
        if params.len() != n || grad.len() != n {
            return Err(Error::Shape(format!(
                "optimizer holds {n} moments, got {} params and {} gradients",
                params.len(),
                grad.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient entry {i}"),
            });
        }
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            weight_decay: wd,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for i in 0..n {
            let g = grad[i];
            let m = b1 * self.first_moment[i] + (1.0 - b1) * g;
            let v = b2 * self.second_moment[i] + (1.0 - b2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            let update = (m / c1) / ((v / c2).sqrt() + ADAM_EPSILON);
            params[i] -= lr * (update + wd * params[i]);
        }
        Ok(())
    }
}
