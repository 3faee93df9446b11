//! A single training run under a perturbation schedule.

use serde::{Deserialize, Serialize};

use super::config::ClosedLoopConfig;
use crate::dynamics::{diverged_floor, Checkpoint, Learner, LearnerState};
use crate::metastate::{normalize_telemetry, MonitorModel};
use crate::perturb::{PerturbationEngine, PerturbationSpec};
use crate::telemetry::{ChannelState, StepSignals, TelemetryConfig, TelemetryRecord};
use crate::Result;

/// One evaluation of the closed-loop trigger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopEvent {
    pub step: u64,
    pub deviation: f64,
    pub streak: usize,
    pub fired: bool,
    /// Learning rate in effect after this evaluation.
    pub lr: f64,
}

/// Trigger state carried across steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClosedLoopState {
    pub streak: usize,
    pub activations: usize,
}

/// Evaluates the trigger for one step and, if it fires, damps `lr` in
/// place (floored at `base_lr / 100`). The streak restarts after firing.
pub fn closed_loop_step(
    step: u64,
    deviation: f64,
    state: &mut ClosedLoopState,
    cfg: &ClosedLoopConfig,
    lr: &mut f64,
    base_lr: f64,
) -> ClosedLoopEvent {
    if deviation > cfg.threshold {
        state.streak += 1;
    } else {
        state.streak = 0;
    }
    let streak = state.streak;
    let fired = state.streak >= cfg.consecutive && state.activations < cfg.max_activations;
    if fired {
        state.activations += 1;
        state.streak = 0;
        *lr = (*lr * cfg.damp).max(base_lr / 100.0);
    }
    ClosedLoopEvent {
        step,
        deviation,
        streak,
        fired,
        lr: *lr,
    }
}

/// Everything a run produces before it is written to disk.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub id: String,
    pub seed: u64,
    /// Perturbation label, `"none"` for baselines.
    pub perturbation: String,
    pub spec: Option<PerturbationSpec>,
    pub records: Vec<TelemetryRecord>,
    pub latents: Vec<Vec<f64>>,
    pub deviations: Vec<f64>,
    pub events: Vec<ClosedLoopEvent>,
    pub final_checkpoint: Checkpoint,
    pub diverged: bool,
}

impl RunOutput {
    pub fn activations(&self) -> usize {
        self.events.iter().filter(|e| e.fired).count()
    }

    pub fn perf(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.performance).collect()
    }

    pub fn inst(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.x_inst).collect()
    }
}

/// Static inputs of a run.
pub struct RunSetup<'a> {
    pub learner: &'a Learner,
    pub total_steps: u64,
    /// Cadence of performance evaluation; 1 evaluates after every step.
    pub eval_every: u64,
    pub telemetry: &'a TelemetryConfig,
    pub monitor: Option<&'a MonitorModel>,
    pub closed_loop: &'a ClosedLoopConfig,
}

/// Trains one seed for `total_steps` steps (or until divergence) with the
/// given perturbations. Per step: batch, data and signal perturbations,
/// transition with gradient and optimizer hooks, parametric perturbations,
/// evaluation, telemetry, latent encoding, closed-loop check.
pub fn execute_run(setup: &RunSetup<'_>, id: String, seed: u64, spec: Option<&PerturbationSpec>) -> Result<RunOutput> {
    let learner = setup.learner;
    let specs: Vec<PerturbationSpec> = spec.into_iter().cloned().collect();
    let mut engine = PerturbationEngine::new(&specs, learner, setup.total_steps, seed)?;
    let mut state: LearnerState = learner.init(seed);
    let base_lr = state.lr;
    let eval = learner.task().kind().is_supervised().then(|| learner.task().eval_batch(seed));
    let mut channels = ChannelState::new(setup.telemetry.clone())?;
    let mut records = Vec::with_capacity(setup.total_steps as usize);
    let mut latents = Vec::new();
    let mut deviations = Vec::new();
    let mut events = Vec::new();
    let mut loop_state = ClosedLoopState::default();
    let mut h = setup.monitor.map(|m| vec![0.0; m.latent_dim()]);
    let mut held = None;

    for step in 0..setup.total_steps {
        let mut batch = learner.batch(seed, step);
        engine.prepare_batch(step, learner.task(), &mut batch);
        let active = engine.is_active(step);
        let (mut next, raw) = learner.train_step(&state, &batch, &mut engine.hooks(step))?;
        if !next.diverged {
            engine.apply_parametric(step, learner, &mut next);
        }
        state = next;
        let value = match held {
            Some(v) if step % setup.eval_every != 0 && !state.diverged => v,
            _ => {
                let perf = learner.evaluate_on(&state, eval.as_ref());
                state.diverged |= perf.diverged;
                if perf.value.is_finite() { perf.value } else { diverged_floor(0.0) }
            }
        };
        held = Some(value);
        let mut signals = StepSignals::from_raw(&raw, value, active, setup.telemetry.coherence)?;
        signals.diverged = state.diverged;
        let record = channels.assemble_record(step, &signals)?;
        if let (Some(model), Some(h)) = (setup.monitor, h.as_mut()) {
            *h = model.encode_step(h, &normalize_telemetry(&record, &model.norm))?;
            let d = model.deviation_score(h);
            latents.push(h.clone());
            deviations.push(d);
            if setup.closed_loop.enabled {
                events.push(closed_loop_step(
                    step,
                    d,
                    &mut loop_state,
                    setup.closed_loop,
                    &mut state.lr,
                    base_lr,
                ));
            }
        }
        records.push(record);
        if state.diverged {
            break;
        }
    }
    Ok(RunOutput {
        id,
        seed,
        perturbation: spec.map_or_else(|| "none".to_string(), PerturbationSpec::label),
        spec: spec.cloned(),
        records,
        latents,
        deviations,
        events,
        diverged: state.diverged,
        final_checkpoint: Checkpoint {
            state,
            rng_cursors: engine.cursors(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(max: usize) -> ClosedLoopConfig {
        ClosedLoopConfig {
            enabled: true,
            max_activations: max,
            ..ClosedLoopConfig::default()
        }
    }

    fn drive(devs: &[f64], c: &ClosedLoopConfig) -> (Vec<ClosedLoopEvent>, f64) {
        let mut st = ClosedLoopState::default();
        let mut lr = 0.1;
        let ev = devs
            .iter()
            .enumerate()
            .map(|(t, &d)| closed_loop_step(t as u64, d, &mut st, c, &mut lr, 0.1))
            .collect();
        (ev, lr)
    }

    #[test]
    fn quiescent_below_threshold() {
        let (ev, lr) = drive(&[5.9; 100], &cfg(3));
        assert_eq!(ev.len(), 100);
        assert!(ev.iter().all(|e| !e.fired));
        assert_eq!(lr, 0.1);
    }

    #[test]
    fn fires_once_at_the_mth_step() {
        let mut devs = vec![0.0; 20];
        devs[5..10].iter_mut().for_each(|d| *d = 7.0);
        let (ev, lr) = drive(&devs, &cfg(3));
        let fired: Vec<u64> = ev.iter().filter(|e| e.fired).map(|e| e.step).collect();
        assert_eq!(fired, vec![9]);
        assert_eq!(lr, 0.05);
    }

    #[test]
    fn budget_caps_activations() {
        let mut devs = vec![0.0; 40];
        devs[5..10].iter_mut().for_each(|d| *d = 7.0);
        devs[20..30].iter_mut().for_each(|d| *d = 7.0);
        let (ev, _) = drive(&devs, &cfg(1));
        assert_eq!(ev.iter().filter(|e| e.fired).count(), 1);
        let (ev, _) = drive(&devs, &cfg(10));
        assert_eq!(ev.iter().filter(|e| e.fired).count(), 3);
    }

    #[test]
    fn damping_is_floored() {
        let (_, lr) = drive(&[100.0; 200], &cfg(100));
        assert_eq!(lr, 0.001);
    }

    #[test]
    fn sparse_evaluation_holds_performance() {
        use crate::dynamics::{LearnerConfig, Task, TaskKind, TaskSpec};
        let task = Task::new(TaskSpec {
            kind: TaskKind::Logistic,
            dim: 4,
            classes: 3,
            batch_size: 16,
            eval_size: 32,
            ..TaskSpec::default()
        })
        .unwrap();
        let learner = Learner::new(task, LearnerConfig::default()).unwrap();
        let telemetry = TelemetryConfig::default();
        let off = ClosedLoopConfig::default();
        let run = |eval_every| {
            let setup = RunSetup {
                learner: &learner,
                total_steps: 40,
                eval_every,
                telemetry: &telemetry,
                monitor: None,
                closed_loop: &off,
            };
            execute_run(&setup, "r".into(), 3, None).unwrap().records
        };
        let every = run(1);
        let sparse = run(5);
        for (a, b) in every.iter().zip(&sparse) {
            let anchor = &every[(a.step - a.step % 5) as usize];
            assert_eq!(b.performance, anchor.performance);
            assert_eq!(b.loss, a.loss);
        }
    }
}
