//! Run-level stability metrics and cross-seed aggregation.
//!
//! All metrics are pure functions of a performance sequence `J`, the
//! instability channel `x_inst` and the latent trajectory `h`, indexed by
//! step. `t_s` is the injection step.
//!
//! | metric | definition |
//! |---|---|
//! | `T_c` | first `t >= t_s` with `J < J_pre - 2 sigma_pre` for `delta` steps |
//! | `P_div` | fraction of seeds with `T_c < t_max / 2` |
//! | `R_rec` | `(J(end) - J(t_min)) / (J_pre - J(t_min))`, non-collapsed runs only |
//! | `RT` | steps from `t_s` to a sustained re-entry into the band, `-1` if never left |
//! | `SIP` | post-injection max of `x_inst` over its baseline mean |
//! | `MSD` | `max ||h_t - h_{t_s}||` over the horizon |

use serde::{Deserialize, Serialize};

use crate::linalg::distance;
use crate::{Error, Result};

pub const DEFAULT_BASELINE_WINDOW: usize = 200;
pub const DEFAULT_DELTA: usize = 100;
pub const DEFAULT_HORIZON: usize = 500;
pub const DEFAULT_SUSTAIN: usize = 10;
pub const DEFAULT_PRECOLLAPSE_WINDOW: usize = 200;
/// Floor on the SIP divisor.
pub const SIP_FLOOR: f64 = 1e-12;

/// Metric parameters. Defaults follow the audit protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub baseline_window: usize,
    pub delta: usize,
    pub horizon: usize,
    pub sustain: usize,
    pub precollapse_window: usize,
    /// Horizon for `P_div`; the run length when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_max: Option<usize>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            baseline_window: DEFAULT_BASELINE_WINDOW,
            delta: DEFAULT_DELTA,
            horizon: DEFAULT_HORIZON,
            sustain: DEFAULT_SUSTAIN,
            precollapse_window: DEFAULT_PRECOLLAPSE_WINDOW,
            t_max: None,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("baseline_window", self.baseline_window),
            ("delta", self.delta),
            ("horizon", self.horizon),
            ("sustain", self.sustain),
            ("precollapse_window", self.precollapse_window),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("metrics.{name} must be positive")));
            }
        }
        if self.baseline_window < 2 {
            return Err(Error::Config("metrics.baseline_window must be at least 2".into()));
        }
        Ok(())
    }
}

/// Pre-injection reference level of `J`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineStats {
    pub j_pre: f64,
    /// Population standard deviation over the window.
    pub sigma_pre: f64,
    pub window_len: usize,
}

impl BaselineStats {
    /// Degenerate-baseline floor `1e-9 * max(1, |J_pre|)`.
    pub fn eps_abs(&self) -> f64 {
        1e-9 * self.j_pre.abs().max(1.0)
    }

    /// Lower edge of the pre-perturbation band, `J_pre - 2 max(sigma_pre, eps)`.
    pub fn threshold(&self) -> f64 {
        self.j_pre - 2.0 * self.sigma_pre.max(self.eps_abs())
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean and population std of `J` over `[max(0, t_s - window), t_s - 1]`.
pub fn baseline_stats(perf: &[f64], t_s: usize, window: usize) -> Result<BaselineStats> {
    let end = t_s.min(perf.len());
    let start = t_s.saturating_sub(window);
    if end < start + 2 {
        return Err(Error::MetricUndefined(format!(
            "baseline needs at least 2 pre-injection steps, have {} (t_s = {t_s})",
            end.saturating_sub(start)
        )));
    }
    let w = &perf[start..end];
    let m = mean(w);
    let var = w.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / w.len() as f64;
    Ok(BaselineStats {
        j_pre: m,
        sigma_pre: var.sqrt(),
        window_len: w.len(),
    })
}

/// Collapse time `T_c`, or `None` if the run never collapses.
///
/// A `diverged` run whose below-threshold tail reaches the end of the record
/// collapses even if the tail is shorter than `delta`.
pub fn collapse_time(perf: &[f64], t_s: usize, base: &BaselineStats, delta: usize, diverged: bool) -> Option<usize> {
    let threshold = base.threshold();
    let mut run_start = None;
    for (t, &j) in perf.iter().enumerate().skip(t_s) {
        if j < threshold {
            let start = *run_start.get_or_insert(t);
            if t + 1 - start >= delta {
                return Some(start);
            }
        } else {
            run_start = None;
        }
    }
    if diverged {
        run_start
    } else {
        None
    }
}

/// Fraction of entries with `T_c < t_max / 2`.
pub fn divergence_probability(collapse_times: &[Option<usize>], t_max: usize) -> Result<f64> {
    if collapse_times.is_empty() {
        return Err(Error::MetricUndefined("divergence probability over zero runs".into()));
    }
    let early = collapse_times
        .iter()
        .filter(|t| matches!(t, Some(t) if (*t as f64) < t_max as f64 / 2.0))
        .count();
    Ok(early as f64 / collapse_times.len() as f64)
}

/// Recovery rate of a non-collapsed run. A run that never dips below
/// `J_pre` (within `eps`) has `R_rec = 1`.
pub fn recovery_rate(perf: &[f64], t_s: usize, base: &BaselineStats, delta: usize, diverged: bool) -> Result<f64> {
    if collapse_time(perf, t_s, base, delta, diverged).is_some() {
        return Err(Error::MetricUndefined("recovery rate of a collapsed run".into()));
    }
    if t_s >= perf.len() {
        return Err(Error::MetricUndefined(format!(
            "no steps after injection ({t_s} >= {})",
            perf.len()
        )));
    }
    let mut j_min = perf[t_s];
    for &j in &perf[t_s + 1..] {
        if j < j_min {
            j_min = j;
        }
    }
    let j_end = perf[perf.len() - 1];
    let depth = base.j_pre - j_min;
    if depth < base.eps_abs() {
        return Ok(1.0);
    }
    Ok((j_end - j_min) / depth)
}

/// Recovery time in steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryTime {
    /// `-1` if the band is never left; the remaining run length if it is
    /// never re-entered.
    pub value: f64,
    pub recovered: bool,
}

/// Steps from `t_s` until `J` re-enters the band `[J_pre - 2 sigma_pre, inf)`
/// and stays there for `sustain` consecutive steps.
pub fn recovery_time(perf: &[f64], t_s: usize, base: &BaselineStats, sustain: usize) -> RecoveryTime {
    let threshold = base.threshold();
    let start = t_s.min(perf.len());
    let Some(exit) = perf[start..].iter().position(|&j| j < threshold).map(|i| i + start) else {
        return RecoveryTime {
            value: -1.0,
            recovered: true,
        };
    };
    let mut streak = 0;
    for (t, &j) in perf.iter().enumerate().skip(exit + 1) {
        if j >= threshold {
            streak += 1;
            if streak == sustain {
                return RecoveryTime {
                    value: (t + 1 - sustain - t_s) as f64,
                    recovered: true,
                };
            }
        } else {
            streak = 0;
        }
    }
    RecoveryTime {
        value: perf.len().saturating_sub(t_s) as f64,
        recovered: false,
    }
}

/// Spike intensity of the instability channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeIntensity {
    pub ratio: f64,
    /// Raw post-injection maximum of `x_inst`.
    pub peak: f64,
    pub baseline_mean: f64,
    /// Baseline mean fell below the divisor floor.
    pub baseline_quiet: bool,
}

/// Max of `x_inst` over `steps` divided by `max(baseline mean, 1e-12)`, the
/// baseline being `[max(0, t_s - baseline_window), t_s - 1]`.
pub fn spike_intensity_over(
    inst: &[f64],
    t_s: usize,
    baseline_window: usize,
    steps: std::ops::RangeInclusive<usize>,
) -> Result<SpikeIntensity> {
    let b_end = t_s.min(inst.len());
    let b_start = t_s.saturating_sub(baseline_window);
    if b_end <= b_start {
        return Err(Error::MetricUndefined(format!("no instability baseline before step {t_s}")));
    }
    let hi = (*steps.end()).min(inst.len().saturating_sub(1));
    let lo = *steps.start();
    if lo > hi || lo >= inst.len() {
        return Err(Error::MetricUndefined(format!("instability channel missing at step {lo}")));
    }
    let baseline_mean = mean(&inst[b_start..b_end]);
    let mut peak = inst[lo];
    for &v in &inst[lo + 1..=hi] {
        if v > peak {
            peak = v;
        }
    }
    let baseline_quiet = baseline_mean < SIP_FLOOR;
    Ok(SpikeIntensity {
        ratio: peak / baseline_mean.max(SIP_FLOOR),
        peak,
        baseline_mean,
        baseline_quiet,
    })
}

/// SIP over `[t_s, t_s + horizon]`.
pub fn spike_intensity(inst: &[f64], t_s: usize, horizon: usize, baseline_window: usize) -> Result<SpikeIntensity> {
    spike_intensity_over(inst, t_s, baseline_window, t_s..=t_s + horizon)
}

/// Latent deviation from the injection-time state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDeviation {
    pub value: f64,
    /// The record ended before the requested horizon.
    pub truncated: bool,
}

/// `max ||h_t - h_{t_s}||` for `t` in `steps`, clipped to the record.
pub fn meta_state_deviation_over(
    latents: &[Vec<f64>],
    t_s: usize,
    steps: std::ops::RangeInclusive<usize>,
) -> Result<LatentDeviation> {
    let Some(anchor) = latents.get(t_s) else {
        return Err(Error::MetricUndefined(format!("latent missing at injection step {t_s}")));
    };
    let want = *steps.end();
    let hi = want.min(latents.len() - 1);
    let mut value = 0.0;
    for h in latents.iter().take(hi + 1).skip(*steps.start()) {
        let d = distance(h, anchor);
        if d > value {
            value = d;
        }
    }
    Ok(LatentDeviation {
        value,
        truncated: want > hi,
    })
}

/// `D_meta` over `[t_s, t_s + horizon]`.
pub fn meta_state_deviation(latents: &[Vec<f64>], t_s: usize, horizon: usize) -> Result<LatentDeviation> {
    meta_state_deviation_over(latents, t_s, t_s..=t_s + horizon)
}

/// Fixed window used to compare collapsing and non-collapsing runs.
///
/// Collapsing runs use the `len` steps ending at `T_c`; runs that do not
/// collapse use the first `len` steps after injection. Both are clipped to
/// `[t_s, end]`.
pub fn precollapse_window(t_s: usize, collapse: Option<usize>, len: usize, run_len: usize) -> std::ops::RangeInclusive<usize> {
    let last = run_len.saturating_sub(1);
    match collapse {
        Some(t_c) => t_c.saturating_sub(len).max(t_s)..=t_c.min(last),
        None => t_s..=(t_s + len).min(last),
    }
}

/// First step whose deviation score exceeds `kappa`.
pub fn first_alarm(scores: &[f64], kappa: f64) -> Option<usize> {
    scores.iter().position(|&d| d > kappa)
}

/// Everything [`summarize`] needs about one run.
#[derive(Clone, Copy, Debug)]
pub struct RunSeries<'a> {
    pub perf: &'a [f64],
    pub inst: &'a [f64],
    pub latents: &'a [Vec<f64>],
    /// Per-step deviation scores, when a monitor was available.
    pub deviation: Option<&'a [f64]>,
    pub t_s: usize,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub collapse_time: Option<usize>,
    pub baseline: BaselineStats,
    /// Raw maximum of `x_inst` over the post-injection horizon.
    pub instability_peak: f64,
    pub recovery_rate: Option<f64>,
    pub recovery_time: f64,
    pub recovered: bool,
    pub spike_intensity: f64,
    pub baseline_quiet: bool,
    pub meta_state_deviation: f64,
    pub msd_truncated: bool,
    /// MSD and SIP restricted to the pre-collapse window.
    pub precollapse_msd: f64,
    pub precollapse_sip: f64,
    pub first_alarm: Option<usize>,
    pub diverged: bool,
    pub run_len: usize,
}

pub fn summarize(series: &RunSeries<'_>, cfg: &MetricsConfig, kappa: f64) -> Result<RunMetrics> {
    let RunSeries {
        perf,
        inst,
        latents,
        deviation,
        t_s,
        diverged,
    } = *series;
    if inst.len() != perf.len() || latents.len() != perf.len() {
        return Err(Error::Contract(format!(
            "series lengths differ: J {}, x_inst {}, latents {}",
            perf.len(),
            inst.len(),
            latents.len()
        )));
    }
    let base = baseline_stats(perf, t_s, cfg.baseline_window)?;
    let collapse = collapse_time(perf, t_s, &base, cfg.delta, diverged);
    let recovery_rate = match collapse {
        Some(_) => None,
        None => Some(recovery_rate(perf, t_s, &base, cfg.delta, diverged)?),
    };
    let rt = recovery_time(perf, t_s, &base, cfg.sustain);
    let sip = spike_intensity(inst, t_s, cfg.horizon, cfg.baseline_window)?;
    let msd = meta_state_deviation(latents, t_s, cfg.horizon)?;
    let window = precollapse_window(t_s, collapse, cfg.precollapse_window, perf.len());
    let pre_msd = meta_state_deviation_over(latents, t_s, window.clone())?;
    let pre_sip = spike_intensity_over(inst, t_s, cfg.baseline_window, window)?;
    Ok(RunMetrics {
        collapse_time: collapse,
        baseline: base,
        instability_peak: sip.peak,
        recovery_rate,
        recovery_time: rt.value,
        recovered: rt.recovered,
        spike_intensity: sip.ratio,
        baseline_quiet: sip.baseline_quiet,
        meta_state_deviation: msd.value,
        msd_truncated: msd.truncated,
        precollapse_msd: pre_msd.value,
        precollapse_sip: pre_sip.ratio,
        first_alarm: deviation.and_then(|d| first_alarm(d, kappa)),
        diverged,
        run_len: perf.len(),
    })
}

/// One summarized run with the labels it is grouped by.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub config_hash: String,
    pub learner: String,
    pub perturbation: String,
    pub seed: u64,
    pub metrics: RunMetrics,
}

/// Mean and standard error of the mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: Option<f64>,
    pub se: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let m = mean(values);
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean: Some(m),
            se: Some(se),
            n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub runs: usize,
    pub precollapse_msd: Stat,
    pub precollapse_sip: Stat,
}

fn group(runs: &[&RunMetrics]) -> GroupSummary {
    let msd: Vec<f64> = runs.iter().map(|m| m.precollapse_msd).collect();
    let sip: Vec<f64> = runs.iter().map(|m| m.precollapse_sip).collect();
    GroupSummary {
        runs: runs.len(),
        precollapse_msd: Stat::of(&msd),
        precollapse_sip: Stat::of(&sip),
    }
}

/// Cross-seed summary of one (learner, perturbation) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub learner: String,
    pub perturbation: String,
    pub seeds: Vec<u64>,
    pub p_div: f64,
    pub collapsed: usize,
    pub collapse_time: Stat,
    pub recovery_rate: Stat,
    pub recovery_time: Stat,
    pub spike_intensity: Stat,
    pub meta_state_deviation: Stat,
    pub collapse_group: GroupSummary,
    pub stable_group: GroupSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub config_hash: String,
    pub t_max: usize,
    pub cells: Vec<CellSummary>,
}

/// Groups runs by (learner, perturbation) in first-seen order.
pub fn aggregate(entries: &[RunEntry], t_max: usize) -> Result<AuditReport> {
    let Some(first) = entries.first() else {
        return Err(Error::Contract("aggregate over zero runs".into()));
    };
    if let Some(other) = entries.iter().find(|e| e.config_hash != first.config_hash) {
        return Err(Error::Contract(format!(
            "runs from different configs cannot be aggregated ({} vs {})",
            first.config_hash, other.config_hash
        )));
    }
    let mut keys: Vec<(&str, &str)> = Vec::new();
    for e in entries {
        let key = (e.learner.as_str(), e.perturbation.as_str());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let cells = keys
        .into_iter()
        .map(|(learner, perturbation)| {
            let runs: Vec<&RunEntry> = entries
                .iter()
                .filter(|e| e.learner == learner && e.perturbation == perturbation)
                .collect();
            let metrics: Vec<&RunMetrics> = runs.iter().map(|e| &e.metrics).collect();
            let collapses: Vec<Option<usize>> = metrics.iter().map(|m| m.collapse_time).collect();
            let pick = |f: &dyn Fn(&RunMetrics) -> Option<f64>| -> Stat {
                Stat::of(&metrics.iter().filter_map(|m| f(m)).collect::<Vec<_>>())
            };
            let (collapsed, stable): (Vec<&RunMetrics>, Vec<&RunMetrics>) =
                metrics.iter().partition(|m| m.collapse_time.is_some());
            Ok(CellSummary {
                learner: learner.to_string(),
                perturbation: perturbation.to_string(),
                seeds: runs.iter().map(|e| e.seed).collect(),
                p_div: divergence_probability(&collapses, t_max)?,
                collapsed: collapsed.len(),
                collapse_time: pick(&|m| m.collapse_time.map(|t| t as f64)),
                recovery_rate: pick(&|m| m.recovery_rate),
                recovery_time: pick(&|m| Some(m.recovery_time)),
                spike_intensity: pick(&|m| Some(m.spike_intensity)),
                meta_state_deviation: pick(&|m| Some(m.meta_state_deviation)),
                collapse_group: group(&collapsed),
                stable_group: group(&stable),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AuditReport {
        config_hash: first.config_hash.clone(),
        t_max,
        cells,
    })
}
