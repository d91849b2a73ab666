use serde::{Deserialize, Serialize};

use super::ParamVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn adam(learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1,
            beta2,
            ..Self::default()
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer with its running moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, param_count: usize) -> Result<Self> {
        if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
            return Err(Error::config("training.learning_rate must be positive"));
        }
        if config.kind == OptimizerKind::Adam {
            for (name, b) in [
                ("training.beta1", config.beta1),
                ("training.beta2", config.beta2),
            ] {
                if !(b > 0.0 && b < 1.0) {
                    return Err(Error::config(format!("{name} must lie in (0, 1)")));
                }
            }
        }
        Ok(Self {
            config,
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            step_count: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.first_moment, &self.second_moment)
    }

    /// Applies one update to `params` in place.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::dim("optimizer gradient", params.len(), grad.len()));
        }
        if params.len() != self.first_moment.len() {
            return Err(Error::dim(
                "optimizer state",
                self.first_moment.len(),
                params.len(),
            ));
        }
        self.step_count += 1;
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let OptimizerConfig {
                    beta1,
                    beta2,
                    epsilon,
                    ..
                } = self.config;
                let t = self.step_count as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grad)
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
        Ok(())
    }
}

/// Functional form of [`OptimizerState::apply`].
pub fn optimizer_step(
    state: &OptimizerState,
    params: &ParamVector,
    grad: &ParamVector,
) -> Result<(ParamVector, OptimizerState)> {
    let mut next = state.clone();
    let mut values = params.as_slice().to_vec();
    next.apply(&mut values, grad)?;
    Ok((ParamVector::new(values)?, next))
}
