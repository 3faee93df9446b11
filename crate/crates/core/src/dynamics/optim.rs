use serde::{Deserialize, Serialize};

use super::{LearnerConfig, OptimizerKind};

/// Auxiliary optimizer state carried alongside the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptState {
    Sgd,
    Momentum { velocity: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64> },
}

impl OptState {
    pub fn zeros(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => OptState::Sgd,
            OptimizerKind::Momentum => OptState::Momentum {
                velocity: vec![0.0; n],
            },
            OptimizerKind::Adam => OptState::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        }
    }

    /// Velocity (momentum) or Adam first moment.
    pub fn first_moment_mut(&mut self) -> Option<&mut Vec<f64>> {
        match self {
            OptState::Sgd => None,
            OptState::Momentum { velocity } => Some(velocity),
            OptState::Adam { m, .. } => Some(m),
        }
    }

    pub fn second_moment_mut(&mut self) -> Option<&mut Vec<f64>> {
        match self {
            OptState::Adam { v, .. } => Some(v),
            _ => None,
        }
    }

    pub fn vectors(&self) -> Vec<&Vec<f64>> {
        match self {
            OptState::Sgd => Vec::new(),
            OptState::Momentum { velocity } => vec![velocity],
            OptState::Adam { m, v } => vec![m, v],
        }
    }

    pub fn vectors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            OptState::Sgd => Vec::new(),
            OptState::Momentum { velocity } => vec![velocity],
            OptState::Adam { m, v } => vec![m, v],
        }
    }

    /// Applies one update in place. `t` is the 1-based update count used for
    /// Adam bias correction.
    pub(crate) fn apply(
        &mut self,
        cfg: &LearnerConfig,
        params: &mut [f64],
        grad: &[f64],
        lr: f64,
        t: u64,
    ) {
        match self {
            OptState::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptState::Momentum { velocity } => {
                for ((p, g), v) in params.iter_mut().zip(grad).zip(velocity.iter_mut()) {
                    *v = cfg.momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            OptState::Adam { m, v } => {
                let bc1 = 1.0 - cfg.beta1.powf(t as f64);
                let bc2 = 1.0 - cfg.beta2.powf(t as f64);
                for i in 0..params.len() {
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
                }
            }
        }
    }
}
