//! Audit orchestration: monitor fitting, baseline and perturbed runs,
//! metrics, artifacts, replay and timing sweeps.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::artifacts::{
    self, Manifest, ManifestRun, MetricsFile, RunPaths, StreamHeader, EVENTS_FORMAT, FORMAT_VERSION,
    MANIFEST_FORMAT, TELEMETRY_FORMAT,
};
use super::config::{AuditConfig, ClosedLoopConfig};
use super::run::{closed_loop_step, execute_run, ClosedLoopEvent, ClosedLoopState, RunOutput, RunSetup};
use crate::dynamics::{Learner, Task};
use crate::metastate::{fit_monitor, MonitorModel};
use crate::metrics::{aggregate, summarize, AuditReport, RunEntry, RunMetrics, RunSeries};
use crate::perturb::injection_step;
use crate::telemetry::{recompute_channels, TelemetryRecord};
use crate::{Error, Result};

/// Execution options that do not change results.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads for run-level parallelism; 0 or 1 runs serially.
    pub jobs: usize,
    /// Raw `SB_SEED` value when it replaced the config seeds.
    pub seed_override: Option<String>,
}

/// Default injection fraction used to place the metric window of baseline
/// runs when the config has no perturbations.
pub const BASELINE_FRAC: f64 = 0.3;

#[derive(Clone, Debug)]
pub struct AuditedRun {
    pub output: Arc<RunOutput>,
    pub spec_index: Option<usize>,
    pub t_s: usize,
    pub metrics: RunMetrics,
}

pub struct AuditOutcome {
    pub config: AuditConfig,
    pub hash: String,
    pub monitor: Arc<MonitorModel>,
    pub monitor_fit_runs: usize,
    pub runs: Vec<AuditedRun>,
    pub report: AuditReport,
}

impl AuditOutcome {
    pub fn baselines(&self) -> impl Iterator<Item = &AuditedRun> {
        self.runs.iter().filter(|r| r.spec_index.is_none())
    }

    pub fn perturbed(&self, spec_index: usize) -> impl Iterator<Item = &AuditedRun> {
        self.runs.iter().filter(move |r| r.spec_index == Some(spec_index))
    }
}

/// Shared between audits of one process so baselines and monitors are
/// computed once per exact configuration.
#[derive(Default)]
pub struct AuditCache {
    baselines: Mutex<HashMap<String, Arc<RunOutput>>>,
    monitors: Mutex<HashMap<String, Arc<MonitorModel>>>,
}

impl AuditCache {
    pub fn new() -> Self {
        Self::default()
    }
}

fn digest_json<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("serializable")))
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Training(format!("cannot start {jobs} worker threads: {e}")))?;
    Ok(pool.install(f))
}

fn par_map<I: Sync, O: Send>(jobs: usize, items: &[I], f: impl Fn(&I) -> Result<O> + Sync + Send) -> Result<Vec<O>> {
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    with_pool(jobs, || items.par_iter().map(f).collect::<Result<Vec<_>>>())?
}

/// Loads or fits the monitor named by the config.
pub fn prepare_monitor(cfg: &AuditConfig, opts: &RunOptions, cache: &AuditCache) -> Result<(Arc<MonitorModel>, usize)> {
    if let Some(path) = cfg.monitor.saved_path() {
        let bytes = artifacts::read_bytes(&path)?;
        let model = MonitorModel::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { detail, .. } => Error::format(&path, detail),
            other => other,
        })?;
        return Ok((Arc::new(model), 0));
    }
    let key = digest_json(&(&cfg.task, &cfg.learner, cfg.total_steps, cfg.eval_every, &cfg.telemetry, &cfg.monitor));
    if let Some(m) = cache.monitors.lock().expect("monitor cache").get(&key) {
        return Ok((m.clone(), cfg.monitor.fit_seeds.len()));
    }
    let learner = Learner::new(Task::new(cfg.task.clone())?, cfg.learner.clone())?;
    let off = ClosedLoopConfig::default();
    let setup = RunSetup {
        learner: &learner,
        total_steps: cfg.total_steps as u64,
        eval_every: cfg.eval_every as u64,
        telemetry: &cfg.telemetry,
        monitor: None,
        closed_loop: &off,
    };
    let runs = par_map(opts.jobs, &cfg.monitor.fit_seeds, |&seed| {
        execute_run(&setup, format!("fit-{seed}"), seed, None)
    })?;
    let streams: Vec<&[TelemetryRecord]> = runs.iter().map(|r| r.records.as_slice()).collect();
    let model = Arc::new(fit_monitor(&streams, &cfg.monitor.model_config())?);
    cache.monitors.lock().expect("monitor cache").insert(key, model.clone());
    Ok((model, runs.len()))
}

/// Injection step used for the metric window of every run in the audit:
/// the spec's own for perturbed runs, the first spec's (or 30 %) for
/// baselines.
fn metric_t_s(cfg: &AuditConfig, spec_index: Option<usize>) -> Result<usize> {
    let frac = match spec_index.or((!cfg.perturbations.is_empty()).then_some(0)) {
        Some(i) => cfg.perturbations[i].start_frac,
        None => BASELINE_FRAC,
    };
    Ok(injection_step(frac, cfg.total_steps as u64)? as usize)
}

pub fn run_metrics(cfg: &AuditConfig, run: &RunOutput, t_s: usize) -> Result<RunMetrics> {
    let perf = run.perf();
    let inst = run.inst();
    summarize(
        &RunSeries {
            perf: &perf,
            inst: &inst,
            latents: &run.latents,
            deviation: Some(&run.deviations),
            t_s,
            diverged: run.diverged,
        },
        &cfg.metrics,
        cfg.closed_loop.threshold,
    )
}

/// Runs a full audit in memory.
pub fn run_audit(cfg: &AuditConfig, opts: &RunOptions) -> Result<AuditOutcome> {
    run_audit_cached(cfg, opts, &AuditCache::new())
}

pub fn run_audit_cached(cfg: &AuditConfig, opts: &RunOptions, cache: &AuditCache) -> Result<AuditOutcome> {
    cfg.validate()?;
    let hash = cfg.hash();
    let (monitor, monitor_fit_runs) = prepare_monitor(cfg, opts, cache)?;
    let learner = Learner::new(Task::new(cfg.task.clone())?, cfg.learner.clone())?;
    let setup = RunSetup {
        learner: &learner,
        total_steps: cfg.total_steps as u64,
        eval_every: cfg.eval_every as u64,
        telemetry: &cfg.telemetry,
        monitor: Some(&monitor),
        closed_loop: &cfg.closed_loop,
    };
    let monitor_key = hex::encode(Sha256::digest(monitor.to_bytes()));

    let mut jobs: Vec<(u64, Option<usize>)> = Vec::new();
    for &seed in &cfg.seeds {
        jobs.push((seed, None));
        for i in 0..cfg.perturbations.len() {
            jobs.push((seed, Some(i)));
        }
    }
    let outputs = par_map(opts.jobs, &jobs, |&(seed, spec_index)| -> Result<Arc<RunOutput>> {
        match spec_index {
            None => {
                let key = digest_json(&(
                    &cfg.task,
                    &cfg.learner,
                    seed,
                    cfg.total_steps,
                    &cfg.telemetry,
                    &monitor_key,
                    &cfg.closed_loop,
                ));
                if let Some(hit) = cache.baselines.lock().expect("baseline cache").get(&key) {
                    return Ok(hit.clone());
                }
                let run = Arc::new(execute_run(&setup, format!("seed{seed}-baseline"), seed, None)?);
                cache.baselines.lock().expect("baseline cache").insert(key, run.clone());
                Ok(run)
            }
            Some(i) => {
                let spec = &cfg.perturbations[i];
                let id = format!("seed{seed}-p{i}-{}", spec.kind.name());
                Ok(Arc::new(execute_run(&setup, id, seed, Some(spec))?))
            }
        }
    })?;

    let learner_label = cfg.learner_label();
    let mut runs = Vec::with_capacity(outputs.len());
    let mut entries = Vec::with_capacity(outputs.len());
    for ((seed, spec_index), output) in jobs.into_iter().zip(outputs) {
        let t_s = metric_t_s(cfg, spec_index)?;
        let metrics = run_metrics(cfg, &output, t_s)?;
        entries.push(RunEntry {
            config_hash: hash.clone(),
            learner: learner_label.clone(),
            perturbation: output.perturbation.clone(),
            seed,
            metrics: metrics.clone(),
        });
        runs.push(AuditedRun {
            output,
            spec_index,
            t_s,
            metrics,
        });
    }
    let report = aggregate(&entries, cfg.t_max())?;
    Ok(AuditOutcome {
        config: cfg.clone(),
        hash,
        monitor,
        monitor_fit_runs,
        runs,
        report,
    })
}

fn run_dir(run: &RunOutput) -> PathBuf {
    Path::new("runs").join(&run.id)
}

/// Writes every artifact of an audit under `dir`. If writing stops early the
/// manifest is still written, marked incomplete.
pub fn write_artifacts(outcome: &AuditOutcome, dir: &Path, opts: &RunOptions) -> Result<()> {
    let cfg = &outcome.config;
    let mut manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: FORMAT_VERSION,
        name: cfg.name.clone(),
        config_hash: outcome.hash.clone(),
        created: chrono::Utc::now().to_rfc3339(),
        seed_override: opts.seed_override.clone(),
        monitor_fit_runs: outcome.monitor_fit_runs,
        runs: Vec::new(),
        complete: false,
    };
    let result = write_all(outcome, dir, opts, &mut manifest);
    manifest.complete = result.is_ok();
    let written = artifacts::write_json(&dir.join("manifest.json"), &manifest);
    result.and(written)
}

fn write_all(outcome: &AuditOutcome, dir: &Path, opts: &RunOptions, manifest: &mut Manifest) -> Result<()> {
    let cfg = &outcome.config;
    let hash = &outcome.hash;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml()).map_err(|e| Error::io(&config_path, e))?;
    artifacts::write_bytes(&dir.join("monitor.sbmm"), &outcome.monitor.to_bytes())?;
    artifacts::write_json(&dir.join("monitor.json"), &outcome.monitor.summary())?;
    let k = outcome.monitor.latent_dim();
    let learner = cfg.learner_label();
    let seed_override = opts.seed_override.as_deref();
    for run in &outcome.runs {
        let out = &run.output;
        let rel = run_dir(out);
        let paths = RunPaths::new(dir, &rel);
        let header = |format: &str| StreamHeader::new(format, hash, &out.id, out.seed, seed_override);
        artifacts::write_telemetry(&paths.telemetry(), &header(TELEMETRY_FORMAT), &out.records)?;
        artifacts::write_bytes(&paths.latents(), &artifacts::encode_latents(&out.latents, k))?;
        artifacts::write_events(&paths.events(), &header(EVENTS_FORMAT), &out.events)?;
        artifacts::write_bytes(&paths.checkpoint(), &out.final_checkpoint.to_bytes())?;
        artifacts::write_json(
            &paths.metrics(),
            &MetricsFile {
                config_hash: hash.clone(),
                run_id: out.id.clone(),
                seed: out.seed,
                learner: learner.clone(),
                perturbation: out.perturbation.clone(),
                t_s: run.t_s,
                activations: out.activations(),
                metrics: run.metrics.clone(),
            },
        )?;
        manifest.runs.push(ManifestRun {
            id: out.id.clone(),
            seed: out.seed,
            perturbation: out.perturbation.clone(),
            spec_index: run.spec_index,
            dir: rel,
        });
    }
    artifacts::write_json(&dir.join("report.json"), &outcome.report)?;
    write_report_csv(&dir.join("report.csv"), outcome)
}

fn write_report_csv(path: &Path, outcome: &AuditOutcome) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(["learner", "perturbation", "seed", "T_c", "RT", "R_rec", "SIP", "MSD", "P_div"])
        .map_err(csv_err)?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for cell in &outcome.report.cells {
        for run in outcome.runs.iter().filter(|r| r.output.perturbation == cell.perturbation) {
            let m = &run.metrics;
            w.write_record([
                cell.learner.clone(),
                cell.perturbation.clone(),
                run.output.seed.to_string(),
                opt(m.collapse_time.map(|t| t.to_string())),
                m.recovery_time.to_string(),
                opt(m.recovery_rate.map(|r| r.to_string())),
                m.spike_intensity.to_string(),
                m.meta_state_deviation.to_string(),
                cell.p_div.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Result of a successful replay.
#[derive(Clone, Debug, Serialize)]
pub struct ReplaySummary {
    pub config_hash: String,
    pub runs_verified: usize,
    pub report: AuditReport,
}

fn compare_bits(field: &str, run: &str, step: u64, stored: f64, recomputed: f64) -> Result<()> {
    if stored.to_bits() != recomputed.to_bits() {
        return Err(Error::integrity(
            field,
            format!("run {run} step {step}: stored {stored:e}, recomputed {recomputed:e}"),
        ));
    }
    Ok(())
}

fn compare_metrics(run: &str, stored: &RunMetrics, recomputed: &RunMetrics) -> Result<()> {
    if stored == recomputed {
        return Ok(());
    }
    let a = serde_json::to_value(stored).expect("serializable");
    let b = serde_json::to_value(recomputed).expect("serializable");
    let field = a
        .as_object()
        .and_then(|o| o.iter().find(|(k, v)| b.get(k.as_str()) != Some(v)).map(|(k, _)| k.clone()))
        .unwrap_or_else(|| "metrics".into());
    Err(Error::integrity(
        format!("metrics.{field}"),
        format!(
            "run {run}: stored {} but telemetry gives {}",
            a.get(&field).cloned().unwrap_or_default(),
            b.get(&field).cloned().unwrap_or_default()
        ),
    ))
}

/// Recomputes channels, latents, closed-loop decisions and metrics from the
/// logged raw columns of every run and checks them against what was stored.
pub fn replay(dir: &Path) -> Result<ReplaySummary> {
    let config_path = dir.join("config.toml");
    let text = std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let cfg = AuditConfig::from_toml(&text)?;
    let hash = cfg.hash();
    let manifest: Manifest = artifacts::read_json(&dir.join("manifest.json"))?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != FORMAT_VERSION {
        return Err(Error::integrity(
            "version",
            format!("manifest format {} v{} is not supported", manifest.format, manifest.version),
        ));
    }
    if manifest.config_hash != hash {
        return Err(Error::integrity(
            "config_hash",
            format!("manifest records {} but config.toml hashes to {hash}", manifest.config_hash),
        ));
    }
    if !manifest.complete {
        return Err(Error::integrity("complete", "the audit did not finish writing its artifacts"));
    }
    let monitor = MonitorModel::from_bytes(&artifacts::read_bytes(&dir.join("monitor.sbmm"))?)?;
    let learner_label = cfg.learner_label();
    let mut entries = Vec::with_capacity(manifest.runs.len());
    for entry in &manifest.runs {
        let paths = RunPaths::new(dir, &entry.dir);
        let (header, records) = artifacts::read_telemetry(&paths.telemetry())?;
        header.check(&paths.telemetry(), TELEMETRY_FORMAT, &hash)?;
        let stored: MetricsFile = artifacts::read_json(&paths.metrics())?;
        if stored.config_hash != hash {
            return Err(Error::integrity("config_hash", format!("{}", paths.metrics().display())));
        }

        let channels = recompute_channels(&records, &cfg.telemetry)?;
        let latents = monitor.encode_stream(&channels);
        let deviations: Vec<f64> = latents.iter().map(|h| monitor.deviation_score(h)).collect();
        let diverged = channels.last().is_some_and(|r| r.diverged);
        let replayed = RunOutput {
            id: entry.id.clone(),
            seed: entry.seed,
            perturbation: entry.perturbation.clone(),
            spec: entry.spec_index.map(|i| cfg.perturbations[i].clone()),
            records: channels,
            latents,
            deviations,
            events: Vec::new(),
            final_checkpoint: crate::dynamics::Checkpoint::from_bytes(&artifacts::read_bytes(&paths.checkpoint())?)?,
            diverged,
        };
        let t_s = metric_t_s(&cfg, entry.spec_index)?;
        let metrics = run_metrics(&cfg, &replayed, t_s)?;
        compare_metrics(&entry.id, &stored.metrics, &metrics)?;

        for (s, r) in records.iter().zip(&replayed.records) {
            compare_bits("x_gen", &entry.id, s.step, s.x_gen, r.x_gen)?;
            compare_bits("x_inst", &entry.id, s.step, s.x_inst, r.x_inst)?;
            compare_bits("x_mem", &entry.id, s.step, s.x_mem, r.x_mem)?;
        }
        let stored_latents = artifacts::decode_latents(&artifacts::read_bytes(&paths.latents())?, &paths.latents())?;
        if stored_latents != replayed.latents {
            return Err(Error::integrity("latents", format!("run {} latent trajectory differs", entry.id)));
        }
        let (events_header, events) = artifacts::read_events(&paths.events())?;
        events_header.check(&paths.events(), EVENTS_FORMAT, &hash)?;
        let expected = replay_events(&replayed.deviations, &cfg.closed_loop, cfg.learner.lr);
        if events != expected {
            return Err(Error::integrity(
                "closed_loop",
                format!("run {} closed-loop log differs from the recomputed decisions", entry.id),
            ));
        }
        entries.push(RunEntry {
            config_hash: hash.clone(),
            learner: learner_label.clone(),
            perturbation: entry.perturbation.clone(),
            seed: entry.seed,
            metrics,
        });
    }
    let report = aggregate(&entries, cfg.t_max())?;
    let stored_report: AuditReport = artifacts::read_json(&dir.join("report.json"))?;
    if stored_report != report {
        return Err(Error::integrity("report", "stored report differs from the recomputed one"));
    }
    Ok(ReplaySummary {
        config_hash: hash,
        runs_verified: entries.len(),
        report,
    })
}

fn replay_events(deviations: &[f64], cfg: &ClosedLoopConfig, base_lr: f64) -> Vec<ClosedLoopEvent> {
    if !cfg.enabled {
        return Vec::new();
    }
    let mut state = ClosedLoopState::default();
    let mut lr = base_lr;
    deviations
        .iter()
        .enumerate()
        .map(|(t, &d)| closed_loop_step(t as u64, d, &mut state, cfg, &mut lr, base_lr))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub start_frac: f64,
    pub t_s: usize,
    pub p_div: f64,
    pub collapsed: usize,
    pub mean_recovery_time: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub perturbation: String,
    pub rows: Vec<SweepRow>,
}

/// Repeats the audit with the single perturbation moved to each start
/// fraction. Baselines and the monitor are shared across fractions.
pub fn timing_sweep(cfg: &AuditConfig, fracs: &[f64], opts: &RunOptions) -> Result<(SweepReport, Vec<AuditOutcome>)> {
    if cfg.perturbations.len() != 1 {
        return Err(Error::Config(format!(
            "a timing sweep needs exactly one perturbation, the config has {}",
            cfg.perturbations.len()
        )));
    }
    if fracs.is_empty() {
        return Err(Error::Config("a timing sweep needs at least one start fraction".into()));
    }
    let mut fracs = fracs.to_vec();
    fracs.sort_by(f64::total_cmp);
    let cache = AuditCache::new();
    let mut rows = Vec::new();
    let mut outcomes = Vec::new();
    for &frac in &fracs {
        let mut c = cfg.clone();
        c.perturbations[0].start_frac = frac;
        let outcome = run_audit_cached(&c, opts, &cache)?;
        let cell = outcome
            .report
            .cells
            .iter()
            .find(|cell| cell.perturbation == c.perturbations[0].label())
            .expect("perturbed cell present");
        rows.push(SweepRow {
            start_frac: frac,
            t_s: injection_step(frac, c.total_steps as u64)? as usize,
            p_div: cell.p_div,
            collapsed: cell.collapsed,
            mean_recovery_time: cell.recovery_time.mean,
        });
        outcomes.push(outcome);
    }
    Ok((
        SweepReport {
            config_hash: cfg.hash(),
            perturbation: cfg.perturbations[0].kind.name().into(),
            rows,
        },
        outcomes,
    ))
}
