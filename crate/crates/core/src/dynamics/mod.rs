//! Training dynamics: the transition operator of the audited system.
//!
//! The state `(params, optimizer state)` is advanced by [`Learner::train_step`]
//! on batches drawn from a [`Task`]. Four micro-learners are provided:
//! a stochastic quadratic, softmax regression, a one-hidden-layer tanh MLP
//! and a softmax REINFORCE policy on a Gaussian bandit. All gradients are
//! analytic.

mod checkpoint;
mod grad;
mod learner;
mod optim;
mod task;

use serde::{Deserialize, Serialize};

pub use checkpoint::{restore_state, serialize_state, Checkpoint};
pub use grad::{policy_draw, policy_surrogate, sub_batch_loss_grad, PolicyDraw};
pub use learner::{
    diverged_floor, Learner, LearnerState, NoHooks, Performance, StepHooks, StepRaw,
    DIVERGENCE_PENALTY,
};
pub use optim::OptState;
pub use task::{partition, Batch, Block, Task, TaskKind, TaskSpec, Targets};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn has_first_moment(self) -> bool {
        !matches!(self, OptimizerKind::Sgd)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardBaseline {
    None,
    BatchMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clipping threshold.
    pub clip_norm: Option<f64>,
    pub entropy_coef: f64,
    /// Number of sub-batches used for gradient-coherence probing.
    pub sub_batches: usize,
    pub reward_baseline: RewardBaseline,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            lr: 0.05,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            clip_norm: None,
            entropy_coef: 0.0,
            sub_batches: 8,
            reward_baseline: RewardBaseline::BatchMean,
        }
    }
}

impl LearnerConfig {
    /// Checks hyperparameter ranges and the optimizer/task pairing.
    ///
    /// The policy learner is restricted to `sgd` and `adam`; entropy
    /// regularisation only exists for the policy learner.
    pub fn validate(&self, task: TaskKind) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learner.lr must be positive, got {}", self.lr)));
        }
        if self.sub_batches < 2 {
            return Err(Error::Config("learner.sub_batches must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.momentum)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(Error::Config(
                "momentum, beta1, beta2 must lie in [0, 1) and eps must be positive".into(),
            ));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("learner.clip_norm must be positive".into()));
            }
        }
        if !(self.entropy_coef >= 0.0) {
            return Err(Error::Config("learner.entropy_coef must be non-negative".into()));
        }
        let incompatible = match task {
            TaskKind::BanditPolicy => self.optimizer == OptimizerKind::Momentum,
            _ => self.entropy_coef > 0.0,
        };
        if incompatible {
            let what = if task == TaskKind::BanditPolicy {
                format!("optimizer `{}`", self.optimizer.name())
            } else {
                format!(
                    "optimizer `{}` with entropy_coef {}",
                    self.optimizer.name(),
                    self.entropy_coef
                )
            };
            return Err(Error::Config(format!(
                "{what} is incompatible with task `{}`",
                task.name()
            )));
        }
        Ok(())
    }
}
