//! Audit orchestration.
//!
//! [`run_audit`] fits (or loads) the latent monitor, executes one baseline
//! and one perturbed run per seed and perturbation, reduces each run to
//! [`crate::metrics::RunMetrics`] and aggregates them. [`write_artifacts`]
//! persists the result; [`replay`] recomputes everything derived from the
//! logged raw columns and checks it against what was stored.
//!
//! Runs are independent and may execute on a thread pool; results are
//! collected in job order so output is identical for any `jobs` value.

pub mod artifacts;
mod audit;
pub mod config;
pub mod export;
mod run;

pub use audit::{
    prepare_monitor, replay, run_audit, run_audit_cached, run_metrics, timing_sweep, write_artifacts, AuditCache,
    AuditOutcome, AuditedRun, ReplaySummary, RunOptions, SweepReport, SweepRow, BASELINE_FRAC,
};
pub use config::{apply_override, AuditConfig, ClosedLoopConfig, MonitorSection};
pub use run::{closed_loop_step, execute_run, ClosedLoopEvent, ClosedLoopState, RunOutput, RunSetup};
