//! Plot data and cross-audit tables built from stored artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::artifacts::{self, Manifest, MetricsFile, RunPaths};
use crate::metrics::{AuditReport, Stat};
use crate::{Error, Result};

/// What [`export_csv`] writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExportKind {
    /// Performance and loss per step.
    Trajectories,
    /// Telemetry channels per step.
    Channels,
    /// Latent coordinates per step.
    Latents,
}

impl std::str::FromStr for ExportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trajectories" => Ok(Self::Trajectories),
            "channels" => Ok(Self::Channels),
            "latents" => Ok(Self::Latents),
            other => Err(Error::Config(format!(
                "unknown export kind {other:?} (expected trajectories, channels or latents)"
            ))),
        }
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::format(path, e.to_string())
}

/// Writes one CSV covering every run of an audit directory.
pub fn export_csv<W: std::io::Write>(dir: &Path, what: ExportKind, out: W) -> Result<()> {
    let manifest: Manifest = artifacts::read_json(&dir.join("manifest.json"))?;
    let mut w = csv::Writer::from_writer(out);
    let err = csv_err(dir);
    let mut header_done = false;
    for run in &manifest.runs {
        let paths = RunPaths::new(dir, &run.dir);
        match what {
            ExportKind::Trajectories | ExportKind::Channels => {
                let (_, records) = artifacts::read_telemetry(&paths.telemetry())?;
                if !header_done {
                    let cols: &[&str] = if what == ExportKind::Trajectories {
                        &["run_id", "perturbation", "step", "J", "loss", "perturb_active", "diverged"]
                    } else {
                        &["run_id", "perturbation", "step", "x_gen", "x_inst", "x_grad", "x_mem", "update_norm", "entropy"]
                    };
                    w.write_record(cols).map_err(&err)?;
                    header_done = true;
                }
                for r in &records {
                    let mut row = vec![run.id.clone(), run.perturbation.clone(), r.step.to_string()];
                    if what == ExportKind::Trajectories {
                        row.extend([
                            r.performance.to_string(),
                            r.loss.to_string(),
                            r.perturb_active.to_string(),
                            r.diverged.to_string(),
                        ]);
                    } else {
                        row.extend([
                            r.x_gen.to_string(),
                            r.x_inst.to_string(),
                            r.x_grad.to_string(),
                            r.x_mem.to_string(),
                            r.update_norm.to_string(),
                            r.entropy.map(|e| e.to_string()).unwrap_or_default(),
                        ]);
                    }
                    w.write_record(&row).map_err(&err)?;
                }
            }
            ExportKind::Latents => {
                let latents = artifacts::decode_latents(&artifacts::read_bytes(&paths.latents())?, &paths.latents())?;
                let k = latents.first().map_or(0, Vec::len);
                if !header_done {
                    let mut cols = vec!["run_id".to_string(), "perturbation".into(), "step".into()];
                    cols.extend((0..k).map(|i| format!("h{i}")));
                    w.write_record(&cols).map_err(&err)?;
                    header_done = true;
                }
                for (t, h) in latents.iter().enumerate() {
                    let mut row = vec![run.id.clone(), run.perturbation.clone(), t.to_string()];
                    row.extend(h.iter().map(f64::to_string));
                    w.write_record(&row).map_err(&err)?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(dir, e))
}

/// Collapse-versus-stable comparison for one perturbation cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    pub source: PathBuf,
    pub learner: String,
    pub perturbation: String,
    pub collapsed: usize,
    pub stable: usize,
    pub collapse_msd: Stat,
    pub stable_msd: Stat,
    /// `collapse_msd / stable_msd` when both groups are present.
    pub msd_ratio: Option<f64>,
    pub collapse_sip: Stat,
    pub stable_sip: Stat,
    /// Fraction of collapsed runs whose first deviation alarm precedes `T_c`.
    pub alarm_before_collapse: Option<f64>,
}

/// Regroups stored run metrics into collapse and stable groups over the
/// fixed pre-collapse window.
pub fn analyze(dirs: &[PathBuf]) -> Result<Vec<AnalysisRow>> {
    let mut rows = Vec::new();
    for dir in dirs {
        let manifest: Manifest = artifacts::read_json(&dir.join("manifest.json"))?;
        let mut files = Vec::new();
        for run in &manifest.runs {
            files.push(artifacts::read_json::<MetricsFile>(&RunPaths::new(dir, &run.dir).metrics())?);
        }
        let mut cells: Vec<(String, String)> = Vec::new();
        for f in &files {
            let key = (f.learner.clone(), f.perturbation.clone());
            if !cells.contains(&key) {
                cells.push(key);
            }
        }
        for (learner, perturbation) in cells {
            let group: Vec<&MetricsFile> = files
                .iter()
                .filter(|f| f.learner == learner && f.perturbation == perturbation)
                .collect();
            let (col, stab): (Vec<&MetricsFile>, Vec<&MetricsFile>) =
                group.iter().partition(|f| f.metrics.collapse_time.is_some());
            let stat = |g: &[&MetricsFile], f: fn(&MetricsFile) -> f64| Stat::of(&g.iter().map(|m| f(m)).collect::<Vec<_>>());
            let collapse_msd = stat(&col, |m| m.metrics.precollapse_msd);
            let stable_msd = stat(&stab, |m| m.metrics.precollapse_msd);
            let alarm = (!col.is_empty()).then(|| {
                let early = col
                    .iter()
                    .filter(|f| match (f.metrics.first_alarm, f.metrics.collapse_time) {
                        (Some(a), Some(t)) => a < t,
                        _ => false,
                    })
                    .count();
                early as f64 / col.len() as f64
            });
            rows.push(AnalysisRow {
                source: dir.clone(),
                learner,
                perturbation,
                collapsed: col.len(),
                stable: stab.len(),
                msd_ratio: match (collapse_msd.mean, stable_msd.mean) {
                    (Some(c), Some(s)) if s > 0.0 => Some(c / s),
                    _ => None,
                },
                collapse_msd,
                stable_msd,
                collapse_sip: stat(&col, |m| m.metrics.precollapse_sip),
                stable_sip: stat(&stab, |m| m.metrics.precollapse_sip),
                alarm_before_collapse: alarm,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub source: PathBuf,
    pub config_hash: String,
    pub learner: String,
    pub perturbation: String,
    pub p_div: f64,
    pub recovery_time: Option<f64>,
    pub spike_intensity: Option<f64>,
    pub meta_state_deviation: Option<f64>,
}

/// Flattens several `report.json` files into one table.
pub fn compare(reports: &[PathBuf]) -> Result<Vec<CompareRow>> {
    let mut rows = Vec::new();
    for path in reports {
        let report: AuditReport = artifacts::read_json(path)?;
        for cell in report.cells {
            rows.push(CompareRow {
                source: path.clone(),
                config_hash: report.config_hash.clone(),
                learner: cell.learner,
                perturbation: cell.perturbation,
                p_div: cell.p_div,
                recovery_time: cell.recovery_time.mean,
                spike_intensity: cell.spike_intensity.mean,
                meta_state_deviation: cell.meta_state_deviation.mean,
            });
        }
    }
    Ok(rows)
}
