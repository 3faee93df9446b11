use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::grad::{self, policy_draw, policy_surrogate, sub_batch_loss_grad};
use super::optim::OptState;
use super::task::{Batch, Block, Task, TaskKind};
use super::{LearnerConfig, OptimizerKind};
use crate::linalg::{all_finite, distance, dot, norm, softmax};
use crate::rng::{self, Domain, Rng};
use crate::{Error, Result};

/// Offset below the pre-perturbation mean used as the performance of a
/// numerically diverged run.
pub const DIVERGENCE_PENALTY: f64 = 1e6;

pub fn diverged_floor(reference_mean: f64) -> f64 {
    reference_mean - DIVERGENCE_PENALTY
}

/// Dynamical state of a learner: parameters plus optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub kind: TaskKind,
    pub params: Vec<f64>,
    pub opt_state: OptState,
    pub step_index: u64,
    pub entropy_coef: f64,
    /// Learning rate applied by the next update.
    pub lr: f64,
    pub diverged: bool,
}

/// Raw signals produced by one transition.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRaw {
    /// Per-sub-batch gradients, before any gradient hook.
    pub sub_grads: Vec<Vec<f64>>,
    /// Gradient handed to the optimizer (after hooks and clipping).
    pub grad: Vec<f64>,
    /// Norm of the hooked gradient before clipping.
    pub grad_norm: f64,
    pub loss: f64,
    pub update_norm: f64,
    pub entropy: Option<f64>,
    pub diverged: bool,
}

/// Seams through which perturbations act on a transition.
pub trait StepHooks {
    /// Called on the aggregated gradient before clipping and the update.
    /// `weights` are the sub-batch row fractions used to aggregate `sub_grads`.
    fn transform_grad(&mut self, _grad: &mut [f64], _sub_grads: &[Vec<f64>], _weights: &[f64]) {}

    /// Called on the state after the gradient is formed, before the update.
    /// A change to `lr` applies to this update only.
    fn transform_state(&mut self, _state: &mut LearnerState) {}
}

pub struct NoHooks;

impl StepHooks for NoHooks {}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Performance {
    pub value: f64,
    pub diverged: bool,
}

/// A task paired with a validated learner configuration.
#[derive(Clone, Debug)]
pub struct Learner {
    task: Task,
    config: LearnerConfig,
}

impl Learner {
    pub fn new(task: Task, config: LearnerConfig) -> Result<Self> {
        config.validate(task.kind())?;
        Ok(Self { task, config })
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    /// Fresh state: supervised weights `~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// policy logits zero, optimizer moments zero, `step_index = 0`.
    pub fn init(&self, seed: u64) -> LearnerState {
        let mut params = vec![0.0; self.task.num_params()];
        let mut rng = rng::stream(seed, Domain::Init, 0);
        for block in self.task.blocks() {
            init_block(&block, &mut params, &mut rng);
        }
        let n = params.len();
        LearnerState {
            kind: self.task.kind(),
            params,
            opt_state: OptState::zeros(self.config.optimizer, n),
            step_index: 0,
            entropy_coef: self.config.entropy_coef,
            lr: self.config.lr,
            diverged: false,
        }
    }

    /// Redraws one block from the initialisation scheme and zeroes the
    /// matching optimizer moments.
    pub fn reinit_block(&self, state: &mut LearnerState, block: &Block, rng: &mut Rng) {
        init_block(block, &mut state.params, rng);
        for v in state.opt_state.vectors_mut() {
            v[block.range.clone()].iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn batch(&self, seed: u64, step: u64) -> Batch {
        self.task.batch(seed, step, self.config.sub_batches)
    }

    /// One application of the transition operator.
    pub fn train_step(
        &self,
        state: &LearnerState,
        batch: &Batch,
        hooks: &mut dyn StepHooks,
    ) -> Result<(LearnerState, StepRaw)> {
        if state.diverged {
            return Err(Error::Contract(format!(
                "train_step on a diverged state (step {})",
                state.step_index
            )));
        }
        if batch.splits.len() < 2 {
            return Err(Error::Contract("batch needs at least two sub-batches".into()));
        }
        let n = state.params.len();
        let total = batch.len() as f64;

        let draw = (self.task.kind() == TaskKind::BanditPolicy)
            .then(|| policy_draw(&self.task, &state.params, batch, self.config.reward_baseline));
        let mut loss = 0.0;
        let mut agg = vec![0.0; n];
        let mut sub_grads = Vec::with_capacity(batch.splits.len());
        let weights: Vec<f64> = batch.splits.iter().map(|r| r.len() as f64 / total).collect();
        for (rows, &weight) in batch.splits.iter().zip(&weights) {
            let (l, g) = match &draw {
                Some(d) => policy_surrogate(&state.params, d, rows.clone(), state.entropy_coef),
                None => sub_batch_loss_grad(&self.task, &state.params, batch, rows.clone()),
            };
            loss += weight * l;
            for (a, gi) in agg.iter_mut().zip(&g) {
                *a += weight * gi;
            }
            sub_grads.push(g);
        }
        let entropy = draw
            .as_ref()
            .map(|_| grad::policy_entropy(&state.params).0);

        let mut next = state.clone();
        next.step_index += 1;
        if !loss.is_finite() || !all_finite(&agg) {
            next.diverged = true;
            return Ok((next, diverged_raw(sub_grads, agg, loss, entropy)));
        }

        hooks.transform_grad(&mut agg, &sub_grads, &weights);
        let grad_norm = norm(&agg);
        if let Some(c) = self.config.clip_norm {
            if grad_norm > c {
                let s = c / grad_norm;
                agg.iter_mut().for_each(|g| *g *= s);
            }
        }
        hooks.transform_state(&mut next);
        let before = next.params.clone();
        let lr = next.lr;
        next.opt_state
            .apply(&self.config, &mut next.params, &agg, lr, next.step_index);
        if !all_finite(&next.params) || !grad_norm.is_finite() {
            let mut frozen = state.clone();
            frozen.step_index += 1;
            frozen.diverged = true;
            return Ok((frozen, diverged_raw(sub_grads, agg, loss, entropy)));
        }
        // Learning-rate changes made by hooks last for this update only.
        next.lr = state.lr;
        let update_norm = distance(&next.params, &before);
        Ok((
            next,
            StepRaw {
                sub_grads,
                grad: agg,
                grad_norm,
                loss,
                update_norm,
                entropy,
                diverged: false,
            },
        ))
    }

    /// Performance signal `J`: negative mean loss on the evaluation sample for
    /// supervised tasks, exact expected reward for the bandit policy.
    pub fn evaluate(&self, state: &LearnerState, eval_seed: u64) -> Performance {
        if self.task.kind() == TaskKind::BanditPolicy {
            return self.evaluate_on(state, None);
        }
        let batch = self.task.eval_batch(eval_seed);
        self.evaluate_on(state, Some(&batch))
    }

    /// Same as [`Learner::evaluate`] with a pre-drawn evaluation sample.
    pub fn evaluate_on(&self, state: &LearnerState, eval: Option<&Batch>) -> Performance {
        if state.diverged {
            return Performance {
                value: diverged_floor(0.0),
                diverged: true,
            };
        }
        let value = match (self.task.kind(), eval) {
            (TaskKind::BanditPolicy, _) => {
                dot(&softmax(&state.params), &self.task.spec().arm_means)
            }
            (_, Some(batch)) => -grad::mean_loss(&self.task, &state.params, batch),
            (_, None) => {
                let batch = self.task.eval_batch(0);
                -grad::mean_loss(&self.task, &state.params, &batch)
            }
        };
        Performance {
            value,
            diverged: !value.is_finite(),
        }
    }

    /// Exact policy entropy for the bandit learner.
    pub fn policy_entropy(&self, state: &LearnerState) -> Option<f64> {
        (self.task.kind() == TaskKind::BanditPolicy).then(|| grad::policy_entropy(&state.params).0)
    }

    pub fn optimizer(&self) -> OptimizerKind {
        self.config.optimizer
    }
}

fn init_block(block: &Block, params: &mut [f64], rng: &mut Rng) {
    let slice = &mut params[block.range.clone()];
    match block.fan_in {
        Some(fan_in) => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in slice.iter_mut() {
                *p = rng.random_range(-bound..bound);
            }
        }
        None => slice.iter_mut().for_each(|p| *p = 0.0),
    }
}

fn diverged_raw(sub_grads: Vec<Vec<f64>>, grad: Vec<f64>, loss: f64, entropy: Option<f64>) -> StepRaw {
    StepRaw {
        sub_grads,
        grad,
        grad_norm: f64::NAN,
        loss,
        update_norm: 0.0,
        entropy,
        diverged: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::TaskSpec;

    fn quadratic(dim: usize) -> Learner {
        let task = Task::new(TaskSpec {
            kind: TaskKind::Quadratic,
            dim,
            curvature_min: 1.0,
            curvature_max: 4.0,
            ..TaskSpec::default()
        })
        .unwrap();
        Learner::new(task, LearnerConfig::default()).unwrap()
    }

    #[test]
    fn init_quadratic_dimension_and_determinism() {
        let l = quadratic(10);
        let s = l.init(1);
        assert_eq!(s.params.len(), 10);
        assert_eq!(s.step_index, 0);
        let t = l.init(1);
        let bits = |s: &LearnerState| s.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&s), bits(&t));
        assert!(s.params.iter().all(|p| p.abs() <= 1.0 / 10f64.sqrt()));
    }

    #[test]
    fn init_bandit_adam_zero_moments() {
        let task = Task::new(TaskSpec {
            kind: TaskKind::BanditPolicy,
            arm_means: vec![1.0, 0.5, 0.2, 0.0, -0.3],
            ..TaskSpec::default()
        })
        .unwrap();
        let cfg = LearnerConfig {
            optimizer: OptimizerKind::Adam,
            ..LearnerConfig::default()
        };
        let s = Learner::new(task, cfg).unwrap().init(7);
        assert_eq!(s.params, vec![0.0; 5]);
        match &s.opt_state {
            OptState::Adam { m, v } => {
                assert_eq!(m, &vec![0.0; 5]);
                assert_eq!(v, &vec![0.0; 5]);
            }
            other => panic!("unexpected optimizer state {other:?}"),
        }
    }

    #[test]
    fn sgd_on_exact_quadratic_is_closed_form() {
        let l = quadratic(4);
        let s = l.init(3);
        let batch = l.batch(3, 0);
        let (next, raw) = l.train_step(&s, &batch, &mut NoHooks).unwrap();
        let lambda = l.task().curvature();
        for j in 0..4 {
            let expected = s.params[j] - 0.05 * lambda[j] * s.params[j];
            assert!((next.params[j] - expected).abs() <= 1e-15 * expected.abs().max(1e-300));
        }
        assert_eq!(next.step_index, 1);
        assert_eq!(raw.sub_grads.len(), 8);
    }

    #[test]
    fn fixed_point_has_zero_update() {
        let l = quadratic(3);
        let mut s = l.init(0);
        s.params = vec![0.0; 3];
        let (next, raw) = l.train_step(&s, &l.batch(0, 0), &mut NoHooks).unwrap();
        assert_eq!(next.params, s.params);
        assert_eq!(raw.update_norm, 0.0);
        assert_eq!(l.evaluate(&next, 5).value, 0.0);
    }

    #[test]
    fn bandit_uniform_policy_value() {
        let task = Task::new(TaskSpec {
            kind: TaskKind::BanditPolicy,
            arm_means: vec![1.0, 0.0, 0.0],
            ..TaskSpec::default()
        })
        .unwrap();
        let l = Learner::new(task, LearnerConfig::default()).unwrap();
        let s = l.init(0);
        assert!((l.evaluate(&s, 0).value - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let task = Task::new(TaskSpec {
            kind: TaskKind::Logistic,
            ..TaskSpec::default()
        })
        .unwrap();
        let l = Learner::new(task, LearnerConfig::default()).unwrap();
        let s = l.init(4);
        assert_eq!(l.evaluate(&s, 12).value.to_bits(), l.evaluate(&s, 12).value.to_bits());
    }

    #[test]
    fn non_finite_gradient_flags_divergence() {
        let l = quadratic(2);
        let mut s = l.init(0);
        s.params = vec![f64::MAX, 1.0];
        let (next, raw) = l.train_step(&s, &l.batch(0, 0), &mut NoHooks).unwrap();
        assert!(next.diverged && raw.diverged);
        assert!(all_finite(&next.params));
        assert!(l.train_step(&next, &l.batch(0, 1), &mut NoHooks).is_err());
        assert!(l.evaluate(&next, 0).diverged);
    }
}
