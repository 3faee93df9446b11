//! Declarative perturbations and their injection seams.
//!
//! A [`PerturbationSpec`] says what to perturb (dimension and kind), how
//! strongly (magnitude) and when (start fraction and duration). The
//! [`PerturbationEngine`] resolves specs against a run length and applies
//! active perturbations at the seam each kind owns:
//!
//! | dimension | kinds | seam |
//! |---|---|---|
//! | optimization | `lr-spike`, `momentum-noise`, `grad-scale`, `adam-v-scale` | optimizer state, aggregated gradient |
//! | data | `input-noise`, `action-noise`, `corruption`, `label-corrupt` | batch |
//! | parametric | `weight-noise`, `layer-reset` | parameters after the update |
//! | signal | `reward-noise`, `grad-sign-flip`, `label-smooth` | rewards, targets, aggregated gradient |
//!
//! Within a step the order is data, signal, optimization, parametric.
//! Every kind is the identity at magnitude 0.

use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Batch, Learner, LearnerState, OptimizerKind, StepHooks, Targets, Task, TaskKind};
use crate::linalg::Matrix;
use crate::rng::{self, Domain, Rng, RngCursor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dimension {
    Optimization,
    Data,
    Parametric,
    Signal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    LrSpike,
    MomentumNoise,
    GradScale,
    AdamVScale,
    InputNoise,
    ActionNoise,
    Corruption,
    LabelCorrupt,
    WeightNoise,
    LayerReset,
    RewardNoise,
    GradSignFlip,
    LabelSmooth,
}

impl PerturbationKind {
    pub fn dimension(self) -> Dimension {
        use PerturbationKind::*;
        match self {
            LrSpike | MomentumNoise | GradScale | AdamVScale => Dimension::Optimization,
            InputNoise | ActionNoise | Corruption | LabelCorrupt => Dimension::Data,
            WeightNoise | LayerReset => Dimension::Parametric,
            RewardNoise | GradSignFlip | LabelSmooth => Dimension::Signal,
        }
    }

    pub fn default_magnitude(self) -> f64 {
        use PerturbationKind::*;
        match self {
            LrSpike => 10.0,
            MomentumNoise => 0.1,
            GradScale => 0.2,
            AdamVScale => 10.0,
            InputNoise => 0.1,
            ActionNoise => 0.05,
            Corruption | LabelCorrupt => 0.05,
            WeightNoise => 0.01,
            LayerReset => 1.0,
            RewardNoise => 0.5,
            GradSignFlip => 0.1,
            LabelSmooth => 0.2,
        }
    }

    pub fn default_duration(self) -> Duration {
        match self.dimension() {
            Dimension::Parametric => Duration::OneShot,
            _ => Duration::Steps(10),
        }
    }

    pub fn name(self) -> &'static str {
        use PerturbationKind::*;
        match self {
            LrSpike => "lr-spike",
            MomentumNoise => "momentum-noise",
            GradScale => "grad-scale",
            AdamVScale => "adam-v-scale",
            InputNoise => "input-noise",
            ActionNoise => "action-noise",
            Corruption => "corruption",
            LabelCorrupt => "label-corrupt",
            WeightNoise => "weight-noise",
            LayerReset => "layer-reset",
            RewardNoise => "reward-noise",
            GradSignFlip => "grad-sign-flip",
            LabelSmooth => "label-smooth",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OneShot {
    OneShot,
}

/// Either a number of steps or the string `"one-shot"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Duration {
    Steps(u64),
    #[serde(with = "one_shot")]
    OneShot,
}

mod one_shot {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("one-shot")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let v = String::deserialize(d)?;
        if v == "one-shot" {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!("expected \"one-shot\", got {v:?}")))
        }
    }
}

impl Duration {
    pub fn steps(self) -> u64 {
        match self {
            Duration::Steps(n) => n,
            Duration::OneShot => 1,
        }
    }
}

/// Sign-flip granularity for `grad-sign-flip`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlipGranularity {
    /// Each coordinate of the aggregated gradient independently.
    #[default]
    Coordinate,
    /// Each sub-batch gradient as a whole before re-aggregation.
    SubBatch,
}

fn default_start_frac() -> f64 {
    0.3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub dimension: Dimension,
    pub kind: PerturbationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnitude: Option<f64>,
    #[serde(default = "default_start_frac")]
    pub start_frac: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<Duration>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng_stream_id: Option<u64>,
    #[serde(default)]
    pub granularity: FlipGranularity,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind) -> Self {
        Self {
            dimension: kind.dimension(),
            kind,
            magnitude: None,
            start_frac: default_start_frac(),
            duration: None,
            rng_stream_id: None,
            granularity: FlipGranularity::Coordinate,
        }
    }

    pub fn magnitude(&self) -> f64 {
        self.magnitude.unwrap_or_else(|| self.kind.default_magnitude())
    }

    pub fn duration(&self) -> Duration {
        self.duration.unwrap_or_else(|| self.kind.default_duration())
    }

    /// Short label used for run identifiers and report cells.
    pub fn label(&self) -> String {
        format!("{}@{}", self.kind.name(), self.start_frac)
    }

    /// Checks dimension membership, magnitude range and compatibility with
    /// the learner it will be applied to.
    pub fn validate(&self, task: TaskKind, optimizer: OptimizerKind) -> Result<()> {
        use PerturbationKind::*;
        let name = self.kind.name();
        if self.kind.dimension() != self.dimension {
            return Err(Error::Config(format!(
                "perturbation `{name}` belongs to dimension {:?}, not {:?}",
                self.kind.dimension(),
                self.dimension
            )));
        }
        let m = self.magnitude();
        let in_unit = (0.0..=1.0).contains(&m);
        let ok = match self.kind {
            Corruption | LabelCorrupt | GradSignFlip | LabelSmooth | GradScale => in_unit,
            LayerReset => m >= 0.0 && m.fract() == 0.0,
            _ => m >= 0.0 && m.is_finite(),
        };
        if !ok {
            return Err(Error::Config(format!("magnitude {m} is out of range for `{name}`")));
        }
        if let Duration::Steps(0) = self.duration() {
            return Err(Error::Config(format!("duration of `{name}` must be positive")));
        }
        let incompatible = match self.kind {
            MomentumNoise => (!optimizer.has_first_moment()).then(|| format!("optimizer `{}`", optimizer.name())),
            AdamVScale => (optimizer != OptimizerKind::Adam).then(|| format!("optimizer `{}`", optimizer.name())),
            ActionNoise | RewardNoise => (task != TaskKind::BanditPolicy).then(|| format!("task `{}`", task.name())),
            InputNoise | Corruption | GradSignFlip => {
                (task == TaskKind::BanditPolicy).then(|| format!("task `{}`", task.name()))
            }
            LabelCorrupt | LabelSmooth => (!task.is_classifier()).then(|| format!("task `{}`", task.name())),
            LrSpike | GradScale | WeightNoise | LayerReset => None,
        };
        if let Some(target) = incompatible {
            return Err(Error::Config(format!("perturbation `{name}` cannot be applied to {target}")));
        }
        Ok(())
    }
}

/// Inclusive step range during which a perturbation is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveWindow {
    pub start: u64,
    pub end: u64,
}

impl ActiveWindow {
    pub fn contains(&self, step: u64) -> bool {
        (self.start..=self.end).contains(&step)
    }

    pub fn len(&self) -> u64 {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Injection step `round(start_frac * total_steps)`.
pub fn injection_step(start_frac: f64, total_steps: u64) -> Result<u64> {
    if !(start_frac > 0.0 && start_frac < 1.0) {
        return Err(Error::Config(format!("start_frac must lie in (0, 1), got {start_frac}")));
    }
    let t_s = (start_frac * total_steps as f64).round() as u64;
    if t_s < 1 || t_s + 1 > total_steps {
        return Err(Error::Config(format!(
            "injection step {t_s} is outside [1, {}]",
            total_steps.saturating_sub(1)
        )));
    }
    Ok(t_s)
}

pub fn resolve_schedule(spec: &PerturbationSpec, total_steps: u64) -> Result<ActiveWindow> {
    let duration = spec.duration().steps();
    if duration == 0 || total_steps <= duration {
        return Err(Error::Config(format!(
            "duration {duration} does not fit a run of {total_steps} steps"
        )));
    }
    let start = injection_step(spec.start_frac, total_steps)?;
    let end = start + duration - 1;
    if end >= total_steps {
        return Err(Error::Config(format!(
            "window {start}..={end} of `{}` exceeds the run length {total_steps}",
            spec.kind.name()
        )));
    }
    Ok(ActiveWindow { start, end })
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Optimization-dimension kinds acting on the optimizer state.
pub fn apply_optimization_state(spec: &PerturbationSpec, state: &mut LearnerState, rng: &mut Rng) {
    let m = spec.magnitude();
    if m == 0.0 {
        return;
    }
    match spec.kind {
        PerturbationKind::LrSpike => state.lr *= m,
        PerturbationKind::MomentumNoise => {
            if let Some(first) = state.opt_state.first_moment_mut() {
                for v in first.iter_mut() {
                    *v += m * normal(rng);
                }
            }
        }
        PerturbationKind::AdamVScale => {
            if let Some(second) = state.opt_state.second_moment_mut() {
                second.iter_mut().for_each(|v| *v *= m);
            }
        }
        _ => {}
    }
}

/// Optimization-dimension kinds acting on the aggregated gradient.
pub fn apply_optimization_grad(spec: &PerturbationSpec, grad: &mut [f64], rng: &mut Rng) {
    let m = spec.magnitude();
    if m == 0.0 || spec.kind != PerturbationKind::GradScale {
        return;
    }
    let factor = 1.0 + rng.random_range(-m..=m);
    grad.iter_mut().for_each(|g| *g *= factor);
}

pub fn apply_data(spec: &PerturbationSpec, task: &Task, batch: &mut Batch, rng: &mut Rng) {
    let m = spec.magnitude();
    if m == 0.0 {
        return;
    }
    match spec.kind {
        PerturbationKind::InputNoise => {
            for x in batch.inputs.data.iter_mut() {
                *x += m * normal(rng);
            }
        }
        PerturbationKind::Corruption => {
            let n = batch.inputs.data.len();
            let count = ((m * n as f64).round() as usize).min(n);
            for i in index::sample(rng, n, count).into_vec() {
                batch.inputs.data[i] = normal(rng);
            }
        }
        PerturbationKind::LabelCorrupt => {
            if let Targets::Soft { classes, probs } = &mut batch.targets {
                let rows = probs.len() / *classes;
                let count = ((m * rows as f64).round() as usize).min(rows);
                for r in index::sample(rng, rows, count).into_vec() {
                    let label = rng.random_range(0..*classes);
                    let row = &mut probs[r * *classes..(r + 1) * *classes];
                    row.iter_mut().for_each(|p| *p = 0.0);
                    row[label] = 1.0;
                }
            }
        }
        PerturbationKind::ActionNoise => {
            let arms = task.spec().arm_means.len();
            if let Targets::Bandit { logit_noise, .. } = &mut batch.targets {
                let noise = logit_noise.get_or_insert_with(|| Matrix::zeros(batch.inputs.rows, arms));
                for v in noise.data.iter_mut() {
                    *v += m * normal(rng);
                }
            }
        }
        _ => {}
    }
}

pub fn apply_parametric(spec: &PerturbationSpec, learner: &Learner, state: &mut LearnerState, rng: &mut Rng) {
    let m = spec.magnitude();
    if m == 0.0 {
        return;
    }
    match spec.kind {
        PerturbationKind::WeightNoise => {
            for p in state.params.iter_mut() {
                *p += m * normal(rng);
            }
        }
        PerturbationKind::LayerReset => {
            let blocks = learner.task().blocks();
            let count = (m as usize).min(blocks.len());
            let mut chosen = index::sample(rng, blocks.len(), count).into_vec();
            chosen.sort_unstable();
            for b in chosen {
                learner.reinit_block(state, &blocks[b], rng);
            }
        }
        _ => {}
    }
}

/// Learning-signal target handed to [`apply_signal`].
pub enum SignalTarget<'a> {
    /// Rewards and targets live in the batch.
    Batch(&'a mut Batch),
    Grad {
        grad: &'a mut [f64],
        sub_grads: &'a [Vec<f64>],
        weights: &'a [f64],
    },
}

pub fn apply_signal(spec: &PerturbationSpec, target: SignalTarget<'_>, rng: &mut Rng) {
    let m = spec.magnitude();
    if m == 0.0 {
        return;
    }
    match (spec.kind, target) {
        (PerturbationKind::RewardNoise, SignalTarget::Batch(batch)) => {
            if let Targets::Bandit { offsets, .. } = &mut batch.targets {
                for o in offsets.iter_mut() {
                    *o += m * normal(rng);
                }
            }
        }
        (PerturbationKind::LabelSmooth, SignalTarget::Batch(batch)) => {
            if let Targets::Soft { classes, probs } = &mut batch.targets {
                let uniform = m / *classes as f64;
                for p in probs.iter_mut() {
                    *p = (1.0 - m) * *p + uniform;
                }
            }
        }
        (PerturbationKind::GradSignFlip, SignalTarget::Grad { grad, sub_grads, weights }) => match spec.granularity {
            FlipGranularity::Coordinate => {
                for g in grad.iter_mut() {
                    if rng.random::<f64>() < m {
                        *g = -*g;
                    }
                }
            }
            FlipGranularity::SubBatch => {
                grad.iter_mut().for_each(|g| *g = 0.0);
                for (sub, w) in sub_grads.iter().zip(weights) {
                    let sign = if rng.random::<f64>() < m { -1.0 } else { 1.0 };
                    for (g, s) in grad.iter_mut().zip(sub) {
                        *g += sign * w * s;
                    }
                }
            }
        },
        _ => {}
    }
}

/// A spec resolved against one run: window plus its own random stream.
#[derive(Clone, Debug)]
pub struct ActivePerturbation {
    pub spec: PerturbationSpec,
    pub window: ActiveWindow,
    rng: Rng,
}

/// Applies a list of resolved perturbations over the course of one run.
#[derive(Clone, Debug, Default)]
pub struct PerturbationEngine {
    items: Vec<ActivePerturbation>,
}

impl PerturbationEngine {
    pub fn new(specs: &[PerturbationSpec], learner: &Learner, total_steps: u64, run_seed: u64) -> Result<Self> {
        let items = specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                spec.validate(learner.task().kind(), learner.optimizer())?;
                let window = resolve_schedule(spec, total_steps)?;
                let stream_id = spec.rng_stream_id.unwrap_or(i as u64);
                Ok(ActivePerturbation {
                    spec: spec.clone(),
                    window,
                    rng: rng::stream(run_seed, Domain::Perturb, stream_id),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { items })
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn items(&self) -> &[ActivePerturbation] {
        &self.items
    }

    pub fn is_active(&self, step: u64) -> bool {
        self.items.iter().any(|p| p.window.contains(step))
    }

    /// Data then signal perturbations on the batch.
    pub fn prepare_batch(&mut self, step: u64, task: &Task, batch: &mut Batch) {
        for p in self.items.iter_mut().filter(|p| p.window.contains(step)) {
            if p.spec.dimension == Dimension::Data {
                apply_data(&p.spec, task, batch, &mut p.rng);
            }
        }
        for p in self.items.iter_mut().filter(|p| p.window.contains(step)) {
            if p.spec.dimension == Dimension::Signal && p.spec.kind != PerturbationKind::GradSignFlip {
                apply_signal(&p.spec, SignalTarget::Batch(batch), &mut p.rng);
            }
        }
    }

    /// Gradient and optimizer-state hooks for `train_step` at `step`.
    pub fn hooks(&mut self, step: u64) -> EngineHooks<'_> {
        EngineHooks { engine: self, step }
    }

    pub fn apply_parametric(&mut self, step: u64, learner: &Learner, state: &mut LearnerState) {
        for p in self.items.iter_mut().filter(|p| p.window.contains(step)) {
            if p.spec.dimension == Dimension::Parametric {
                apply_parametric(&p.spec, learner, state, &mut p.rng);
            }
        }
    }

    pub fn cursors(&self) -> Vec<RngCursor> {
        self.items.iter().map(|p| RngCursor::capture(&p.rng)).collect()
    }
}

pub struct EngineHooks<'a> {
    engine: &'a mut PerturbationEngine,
    step: u64,
}

impl StepHooks for EngineHooks<'_> {
    fn transform_grad(&mut self, grad: &mut [f64], sub_grads: &[Vec<f64>], weights: &[f64]) {
        let step = self.step;
        for p in self.engine.items.iter_mut().filter(|p| p.window.contains(step)) {
            if p.spec.kind == PerturbationKind::GradSignFlip {
                apply_signal(&p.spec, SignalTarget::Grad { grad: &mut *grad, sub_grads, weights }, &mut p.rng);
            }
        }
        for p in self.engine.items.iter_mut().filter(|p| p.window.contains(step)) {
            if p.spec.dimension == Dimension::Optimization {
                apply_optimization_grad(&p.spec, grad, &mut p.rng);
            }
        }
    }

    fn transform_state(&mut self, state: &mut LearnerState) {
        let step = self.step;
        for p in self.engine.items.iter_mut().filter(|p| p.window.contains(step)) {
            if p.spec.dimension == Dimension::Optimization {
                apply_optimization_state(&p.spec, state, &mut p.rng);
            }
        }
    }
}
