//! Audit configuration file.
//!
//! ```toml
//! name = "sign-flip-mlp"
//! total_steps = 1000
//! seeds = [0, 1, 2]
//!
//! [task]
//! kind = "mlp-classify"
//!
//! [learner]
//! optimizer = "sgd"
//! lr = 0.5
//!
//! [[perturbations]]
//! dimension = "signal"
//! kind = "grad-sign-flip"
//!
//! [monitor]
//! source = "fit-fresh"
//!
//! [closed_loop]
//! enabled = true
//! ```
//!
//! Every table rejects unknown keys. Overrides use dotted keys
//! (`learner.lr=0.1`, `perturbations.0.magnitude=0.2`) and are applied to
//! the parsed document before it is validated.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{LearnerConfig, Task, TaskSpec};
use crate::metastate::MonitorConfig;
use crate::metrics::MetricsConfig;
use crate::perturb::{resolve_schedule, PerturbationSpec};
use crate::telemetry::TelemetryConfig;
use crate::{Error, Result};

/// Where the latent monitor comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorSection {
    /// `"fit-fresh"` or a path to a saved `.sbmm` model.
    pub source: String,
    /// Seeds of the unperturbed runs the monitor is fitted on. Must be
    /// disjoint from the audit seeds.
    pub fit_seeds: Vec<u64>,
    pub latent_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub window: usize,
    pub seed: u64,
}

pub const FIT_FRESH: &str = "fit-fresh";

impl Default for MonitorSection {
    fn default() -> Self {
        let m = MonitorConfig::default();
        Self {
            source: FIT_FRESH.into(),
            fit_seeds: (10_000..10_006).collect(),
            latent_dim: m.latent_dim,
            epochs: m.epochs,
            lr: m.lr,
            window: m.window,
            seed: m.seed,
        }
    }
}

impl MonitorSection {
    pub fn model_config(&self) -> MonitorConfig {
        MonitorConfig {
            latent_dim: self.latent_dim,
            epochs: self.epochs,
            lr: self.lr,
            window: self.window,
            seed: self.seed,
        }
    }

    pub fn saved_path(&self) -> Option<PathBuf> {
        (self.source != FIT_FRESH).then(|| PathBuf::from(&self.source))
    }
}

/// Conditional learning-rate damping driven by latent deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedLoopConfig {
    pub enabled: bool,
    /// Deviation threshold `kappa`.
    pub threshold: f64,
    /// Consecutive above-threshold steps required to fire.
    pub consecutive: usize,
    /// Multiplicative learning-rate factor applied on each activation.
    pub damp: f64,
    pub max_activations: usize,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            threshold: 6.0,
            consecutive: 5,
            damp: 0.5,
            max_activations: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub name: String,
    pub total_steps: usize,
    pub seeds: Vec<u64>,
    /// Evaluate J every this many steps; in between the last value is held.
    #[serde(default = "one")]
    pub eval_every: usize,
    pub task: TaskSpec,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub perturbations: Vec<PerturbationSpec>,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub telemetry: TelemetryConfig,
    #[serde(default)]
    pub monitor: MonitorSection,
    #[serde(default)]
    pub closed_loop: ClosedLoopConfig,
}

fn one() -> usize {
    1
}

impl AuditConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        Self::from_value(value)
    }

    fn from_value(value: toml::Value) -> Result<Self> {
        let cfg: AuditConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, applies `key=value` overrides and, when given,
    /// replaces the seed list with `seed_env` (comma-separated).
    pub fn load(path: &Path, overrides: &[String], seed_env: Option<&str>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: toml::Value = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        if let Some(seeds) = seed_env {
            let parsed = seeds
                .split(',')
                .map(|s| s.trim().parse::<i64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Config(format!("SB_SEED must be a comma-separated list of integers, got {seeds:?}")))?;
            set_path(&mut value, "seeds", toml::Value::Array(parsed.into_iter().map(toml::Value::Integer).collect()))?;
        }
        Self::from_value(value)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// sha256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn t_max(&self) -> usize {
        self.metrics.t_max.unwrap_or(self.total_steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("seed {} appears more than once", w[0])));
        }
        self.metrics.validate()?;
        self.telemetry.validate()?;
        if self.total_steps < 2 * self.metrics.baseline_window {
            return Err(Error::Config(format!(
                "total_steps ({}) must be at least twice metrics.baseline_window ({})",
                self.total_steps, self.metrics.baseline_window
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        let task = Task::new(self.task.clone())?;
        self.learner.validate(task.kind())?;
        for (i, spec) in self.perturbations.iter().enumerate() {
            spec.validate(task.kind(), self.learner.optimizer)
                .and_then(|_| resolve_schedule(spec, self.total_steps as u64))
                .map_err(|e| Error::Config(format!("perturbations.{i}: {e}")))?;
        }
        self.monitor.model_config().validate()?;
        if self.monitor.saved_path().is_none() {
            if let Some(s) = self.monitor.fit_seeds.iter().find(|s| self.seeds.contains(s)) {
                return Err(Error::Config(format!(
                    "monitor.fit_seeds must be disjoint from seeds (both contain {s})"
                )));
            }
        }
        let cl = &self.closed_loop;
        if cl.consecutive == 0 || !(cl.damp > 0.0 && cl.damp <= 1.0) || !(cl.threshold >= 0.0) {
            return Err(Error::Config(
                "closed_loop needs consecutive >= 1, damp in (0, 1] and threshold >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Label of the learner used to group report cells.
    pub fn learner_label(&self) -> String {
        let mut s = format!("{}/{}", self.task.kind.name(), self.learner.optimizer.name());
        if let Some(c) = self.learner.clip_norm {
            s.push_str(&format!("/clip={c}"));
        }
        if self.learner.entropy_coef > 0.0 {
            s.push_str(&format!("/entropy={}", self.learner.entropy_coef));
        }
        s
    }
}

/// Applies one `dotted.key=value` override. The value is parsed as a TOML
/// value when possible and as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    set_path(doc, key, value)
}

fn set_path(doc: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let unknown = || Error::Config(format!("unknown config key `{key}`"));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(unknown());
    }
    check_known(&parts).ok_or_else(unknown)?;
    let mut cur = doc;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            toml::Value::Table(t) => {
                if last {
                    t.insert(part.to_string(), value);
                    return Ok(());
                }
                t.entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(a) => {
                let idx: usize = part.parse().map_err(|_| unknown())?;
                let len = a.len();
                let slot = a.get_mut(idx).ok_or_else(|| {
                    Error::Config(format!("`{key}`: index {idx} out of range (length {len})"))
                })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(unknown()),
        };
    }
    Err(unknown())
}

/// Checks the dotted path against the schema so typos are reported by name
/// instead of surfacing as a generic deserialization error.
fn check_known(parts: &[&str]) -> Option<()> {
    const TOP: &[&str] = &[
        "name",
        "total_steps",
        "seeds",
        "eval_every",
        "task",
        "learner",
        "perturbations",
        "metrics",
        "telemetry",
        "monitor",
        "closed_loop",
    ];
    let fields = |v: serde_json::Value| -> Vec<String> {
        v.as_object().map(|o| o.keys().cloned().collect()).unwrap_or_default()
    };
    let section = |name: &str| -> Option<Vec<String>> {
        Some(match name {
            "task" => fields(serde_json::to_value(TaskSpec::default()).ok()?),
            "learner" => {
                let mut f = fields(serde_json::to_value(LearnerConfig::default()).ok()?);
                f.push("clip_norm".into());
                f
            }
            "metrics" => {
                let mut f = fields(serde_json::to_value(MetricsConfig::default()).ok()?);
                f.push("t_max".into());
                f
            }
            "telemetry" => fields(serde_json::to_value(TelemetryConfig::default()).ok()?),
            "monitor" => fields(serde_json::to_value(MonitorSection::default()).ok()?),
            "closed_loop" => fields(serde_json::to_value(ClosedLoopConfig::default()).ok()?),
            "perturbations" => [
                "dimension",
                "kind",
                "magnitude",
                "start_frac",
                "duration",
                "rng_stream_id",
                "granularity",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            _ => return None,
        })
    };
    let top = *parts.first()?;
    if !TOP.contains(&top) {
        return None;
    }
    match (top, parts.len()) {
        (_, 1) => Some(()),
        ("perturbations", 2) => parts[1].parse::<usize>().ok().map(|_| ()),
        ("perturbations", 3) => {
            parts[1].parse::<usize>().ok()?;
            section(top)?.iter().any(|f| f == parts[2]).then_some(())
        }
        ("seeds", 2) => parts[1].parse::<usize>().ok().map(|_| ()),
        ("task", 3) if parts[1] == "curvature" || parts[1] == "arm_means" => {
            parts[2].parse::<usize>().ok().map(|_| ())
        }
        ("monitor", 3) if parts[1] == "fit_seeds" => parts[2].parse::<usize>().ok().map(|_| ()),
        (_, 2) => section(top)?.iter().any(|f| f == parts[1]).then_some(()),
        _ => None,
    }
}
