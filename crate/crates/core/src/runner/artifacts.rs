//! On-disk formats of an audit.
//!
//! ```text
//! <out>/
//!   config.toml          effective config after overrides
//!   manifest.json        config hash, run list, completion flag
//!   monitor.sbmm         binary monitor model
//!   monitor.json         readable monitor summary
//!   report.json          AuditReport
//!   report.csv           one row per run
//!   runs/<id>/telemetry.jsonl
//!   runs/<id>/latents.sblt
//!   runs/<id>/closed_loop.jsonl
//!   runs/<id>/metrics.json
//!   runs/<id>/final.sbck
//! ```
//!
//! JSON Lines files start with a header line carrying the format name,
//! version and config hash. Wall-clock time appears only in headers so data
//! lines are byte-stable across reruns.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::run::ClosedLoopEvent;
use crate::metrics::RunMetrics;
use crate::telemetry::TelemetryRecord;
use crate::{Error, Result};

pub const TELEMETRY_FORMAT: &str = "stabench-telemetry";
pub const EVENTS_FORMAT: &str = "stabench-closed-loop";
pub const MANIFEST_FORMAT: &str = "stabench-audit";
pub const FORMAT_VERSION: u32 = 1;

const LATENT_MAGIC: &[u8; 4] = b"SBLT";
const LATENT_VERSION: u16 = 1;

/// First line of every JSON Lines artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub run_id: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_override: Option<String>,
    pub wall_clock: String,
}

impl StreamHeader {
    pub fn new(format: &str, config_hash: &str, run_id: &str, seed: u64, seed_override: Option<&str>) -> Self {
        Self {
            format: format.into(),
            version: FORMAT_VERSION,
            config_hash: config_hash.into(),
            run_id: run_id.into(),
            seed,
            seed_override: seed_override.map(str::to_string),
            wall_clock: chrono::Utc::now().to_rfc3339(),
        }
    }

    /// Checks format, version and config hash against expectations.
    pub fn check(&self, path: &Path, format: &str, config_hash: &str) -> Result<()> {
        if self.format != format {
            return Err(Error::format(path, format!("expected format {format:?}, found {:?}", self.format)));
        }
        if self.version != FORMAT_VERSION {
            return Err(Error::integrity(
                "version",
                format!("{}: version {} is not supported", path.display(), self.version),
            ));
        }
        if self.config_hash != config_hash {
            return Err(Error::integrity(
                "config_hash",
                format!("{}: header hash {} does not match config {config_hash}", path.display(), self.config_hash),
            ));
        }
        Ok(())
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: &StreamHeader, rows: &[T]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, header).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_all(b"\n").map_err(io)?;
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(StreamHeader, Vec<T>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty file, missing header line"))?
        .map_err(|e| Error::io(path, e))?;
    let header: StreamHeader =
        serde_json::from_str(&first).map_err(|e| Error::format(path, format!("header: {e}")))?;
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 2)))?);
    }
    Ok((header, rows))
}

pub fn write_telemetry(path: &Path, header: &StreamHeader, records: &[TelemetryRecord]) -> Result<()> {
    write_jsonl(path, header, records)
}

pub fn read_telemetry(path: &Path) -> Result<(StreamHeader, Vec<TelemetryRecord>)> {
    read_jsonl(path)
}

pub fn write_events(path: &Path, header: &StreamHeader, events: &[ClosedLoopEvent]) -> Result<()> {
    write_jsonl(path, header, events)
}

pub fn read_events(path: &Path) -> Result<(StreamHeader, Vec<ClosedLoopEvent>)> {
    read_jsonl(path)
}

/// `"SBLT" | version u16 | k u32 | n u64 | f64 x (n k) | sha256 prefix [u8; 8]`
pub fn encode_latents(latents: &[Vec<f64>], k: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(18 + 8 * k * latents.len() + 8);
    out.extend_from_slice(LATENT_MAGIC);
    out.extend_from_slice(&LATENT_VERSION.to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(latents.len() as u64).to_le_bytes());
    for h in latents {
        for v in h {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest[..8]);
    out
}

pub fn decode_latents(bytes: &[u8], path: &Path) -> Result<Vec<Vec<f64>>> {
    if bytes.len() < 26 || &bytes[..4] != LATENT_MAGIC {
        return Err(Error::format(path, "not a latent trajectory (bad magic)"));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 8);
    if Sha256::digest(body)[..8] != *sum {
        return Err(Error::integrity("latents", format!("{}: checksum mismatch", path.display())));
    }
    let version = u16::from_le_bytes([body[4], body[5]]);
    if version != LATENT_VERSION {
        return Err(Error::integrity("version", format!("{}: latent version {version}", path.display())));
    }
    let k = u32::from_le_bytes(body[6..10].try_into().expect("4 bytes")) as usize;
    let n = u64::from_le_bytes(body[10..18].try_into().expect("8 bytes")) as usize;
    let data = &body[18..];
    if Some(data.len()) != n.checked_mul(k).and_then(|x| x.checked_mul(8)) {
        return Err(Error::format(path, format!("expected {n} frames of {k} values")));
    }
    let mut frames = Vec::with_capacity(n);
    for frame in data.chunks_exact(8 * k.max(1)).take(n) {
        frames.push(
            frame
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
        );
    }
    if k == 0 {
        frames = vec![Vec::new(); n];
    }
    Ok(frames)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Stored per-run metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub config_hash: String,
    pub run_id: String,
    pub seed: u64,
    pub learner: String,
    pub perturbation: String,
    pub t_s: usize,
    pub activations: usize,
    pub metrics: RunMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub id: String,
    pub seed: u64,
    pub perturbation: String,
    /// Index into the config's perturbation list; absent for baselines.
    pub spec_index: Option<usize>,
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub config_hash: String,
    pub created: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed_override: Option<String>,
    pub monitor_fit_runs: usize,
    pub runs: Vec<ManifestRun>,
    /// False when writing stopped early; the run list covers what exists.
    pub complete: bool,
}

pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path, rel: &Path) -> Self {
        Self { dir: root.join(rel) }
    }

    pub fn telemetry(&self) -> PathBuf {
        self.dir.join("telemetry.jsonl")
    }

    pub fn latents(&self) -> PathBuf {
        self.dir.join("latents.sblt")
    }

    pub fn events(&self) -> PathBuf {
        self.dir.join("closed_loop.jsonl")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.json")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("final.sbck")
    }
}
