//! Online meta-state channels and per-step telemetry records.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dynamics::StepRaw;
use crate::linalg::{all_finite, dot, norm};
use crate::{Error, Result};

/// How gradient coherence is reduced over the K sub-batch gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoherenceMode {
    /// Mean cosine over all K(K-1)/2 pairs.
    #[default]
    Pairwise,
    /// Mean cosine of each sub-batch gradient to the mean gradient.
    ToMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TelemetryConfig {
    /// EMA weight of the performance trend `x_gen`.
    pub gen_alpha: f64,
    /// EMA decay of the update-magnitude memory `x_mem`.
    pub mem_decay: f64,
    /// Trailing window of the instability index `x_inst`.
    pub inst_window: usize,
    pub coherence: CoherenceMode,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        Self {
            gen_alpha: 0.1,
            mem_decay: 0.99,
            inst_window: 50,
            coherence: CoherenceMode::Pairwise,
        }
    }
}

impl TelemetryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gen_alpha > 0.0 && self.gen_alpha <= 1.0) {
            return Err(Error::Config(format!(
                "telemetry.gen_alpha must lie in (0, 1], got {}",
                self.gen_alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.mem_decay) {
            return Err(Error::Config("telemetry.mem_decay must lie in [0, 1]".into()));
        }
        if self.inst_window == 0 {
            return Err(Error::Config("telemetry.inst_window must be positive".into()));
        }
        Ok(())
    }
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub step: u64,
    #[serde(rename = "J")]
    pub performance: f64,
    pub loss: f64,
    pub x_gen: f64,
    pub x_inst: f64,
    pub x_grad: f64,
    pub x_mem: f64,
    pub update_norm: f64,
    pub entropy: Option<f64>,
    pub perturb_active: bool,
    pub diverged: bool,
}

impl TelemetryRecord {
    pub const CHANNELS: [&'static str; 6] = ["x_gen", "x_inst", "x_grad", "x_mem", "loss", "update_norm"];

    /// Raw monitor input vector `[x_gen, x_inst, x_grad, x_mem, loss, update_norm]`.
    pub fn channel_vector(&self) -> [f64; 6] {
        [
            self.x_gen,
            self.x_inst,
            self.x_grad,
            self.x_mem,
            self.loss,
            self.update_norm,
        ]
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean pairwise cosine similarity of the sub-batch gradients.
///
/// A zero or non-finite vector has cosine 0 with everything.
pub fn gradient_coherence(grads: &[Vec<f64>]) -> Result<f64> {
    gradient_coherence_with(grads, CoherenceMode::Pairwise)
}

pub fn gradient_coherence_with(grads: &[Vec<f64>], mode: CoherenceMode) -> Result<f64> {
    if grads.len() < 2 {
        return Err(Error::Contract(format!(
            "gradient coherence needs at least 2 gradients, got {}",
            grads.len()
        )));
    }
    let len = grads[0].len();
    if let Some(bad) = grads.iter().position(|g| g.len() != len) {
        return Err(Error::Contract(format!(
            "gradient {bad} has length {} but gradient 0 has length {len}",
            grads[bad].len()
        )));
    }
    let value = match mode {
        CoherenceMode::Pairwise => {
            let mut sum = 0.0;
            let mut pairs = 0usize;
            for i in 0..grads.len() {
                for j in i + 1..grads.len() {
                    sum += cosine(&grads[i], &grads[j]);
                    pairs += 1;
                }
            }
            sum / pairs as f64
        }
        CoherenceMode::ToMean => {
            let mut mean = vec![0.0; len];
            for g in grads {
                if all_finite(g) {
                    for (m, v) in mean.iter_mut().zip(g) {
                        *m += v / grads.len() as f64;
                    }
                }
            }
            grads.iter().map(|g| cosine(g, &mean)).sum::<f64>() / grads.len() as f64
        }
    };
    Ok(value.clamp(-1.0, 1.0))
}

/// Population variance of the trailing `window` values (or all values when
/// fewer are available).
pub fn instability_index(history: &[f64], window: usize) -> f64 {
    if history.is_empty() {
        return 0.0;
    }
    let n = window.min(history.len());
    let tail = &history[history.len() - n..];
    let mean = tail.iter().sum::<f64>() / n as f64;
    tail.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64
}

/// EMA step of the performance trend.
pub fn performance_trend(prev_trend: f64, new_perf: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("trend alpha must lie in (0, 1], got {alpha}")));
    }
    Ok(alpha * new_perf + (1.0 - alpha) * prev_trend)
}

/// EMA step of the update-magnitude memory.
pub fn state_persistence(prev_mem: f64, update_norm: f64, decay: f64) -> f64 {
    decay * prev_mem + (1.0 - decay) * update_norm
}

/// Values a step contributes to the channels, before smoothing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSignals {
    pub performance: f64,
    pub loss: f64,
    pub x_grad: f64,
    pub update_norm: f64,
    pub entropy: Option<f64>,
    pub diverged: bool,
    pub perturb_active: bool,
}

impl StepSignals {
    /// Extracts step signals from a raw transition. Non-finite loss of a
    /// diverged step is replaced by `-performance` so the record stays finite.
    pub fn from_raw(raw: &StepRaw, performance: f64, perturb_active: bool, mode: CoherenceMode) -> Result<Self> {
        let x_grad = gradient_coherence_with(&raw.sub_grads, mode)?;
        let loss = if raw.loss.is_finite() { raw.loss } else { -performance };
        Ok(Self {
            performance,
            loss,
            x_grad,
            update_norm: raw.update_norm,
            entropy: raw.entropy.filter(|e| e.is_finite()),
            diverged: raw.diverged,
            perturb_active,
        })
    }
}

/// Running channel state of one run; turns step signals into records.
#[derive(Clone, Debug)]
pub struct ChannelState {
    config: TelemetryConfig,
    trend: Option<f64>,
    mem: f64,
    window: VecDeque<f64>,
    last_step: Option<u64>,
}

impl ChannelState {
    pub fn new(config: TelemetryConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            window: VecDeque::with_capacity(config.inst_window),
            config,
            trend: None,
            mem: 0.0,
            last_step: None,
        })
    }

    /// Updates all channels with this step and assembles the record.
    pub fn assemble_record(&mut self, step: u64, signals: &StepSignals) -> Result<TelemetryRecord> {
        if let Some(last) = self.last_step {
            if step <= last {
                return Err(Error::Contract(format!(
                    "telemetry step {step} does not follow step {last}"
                )));
            }
        }
        let perf = signals.performance;
        let x_gen = match self.trend {
            None => perf,
            Some(prev) => performance_trend(prev, perf, self.config.gen_alpha)?,
        };
        self.trend = Some(x_gen);
        if self.window.len() == self.config.inst_window {
            self.window.pop_front();
        }
        self.window.push_back(perf);
        let x_inst = instability_index(self.window.make_contiguous(), self.config.inst_window);
        self.mem = state_persistence(self.mem, signals.update_norm, self.config.mem_decay);
        self.last_step = Some(step);
        Ok(TelemetryRecord {
            step,
            performance: perf,
            loss: signals.loss,
            x_gen,
            x_inst,
            x_grad: signals.x_grad,
            x_mem: self.mem,
            update_norm: signals.update_norm,
            entropy: signals.entropy,
            perturb_active: signals.perturb_active,
            diverged: signals.diverged,
        })
    }
}

/// Recomputes the smoothed channels of a logged stream from its raw columns
/// (`J`, `loss`, `x_grad`, `update_norm`).
pub fn recompute_channels(records: &[TelemetryRecord], config: &TelemetryConfig) -> Result<Vec<TelemetryRecord>> {
    let mut state = ChannelState::new(config.clone())?;
    records
        .iter()
        .map(|r| {
            state.assemble_record(
                r.step,
                &StepSignals {
                    performance: r.performance,
                    loss: r.loss,
                    x_grad: r.x_grad,
                    update_norm: r.update_norm,
                    entropy: r.entropy,
                    diverged: r.diverged,
                    perturb_active: r.perturb_active,
                },
            )
        })
        .collect()
}
