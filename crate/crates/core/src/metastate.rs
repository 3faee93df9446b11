//! Latent meta-state monitor.
//!
//! A single-layer recurrence `h_{t+1} = tanh(A h_t + B y_t)` with readout
//! `C h_t ~ y_t`, where `y_t` is the z-scored channel vector
//! `[x_gen, x_inst, x_grad, x_mem, loss, update_norm]`. The model is fitted
//! on unperturbed runs by truncated backpropagation through time and is never
//! refitted during an audit.
//!
//! Latent trajectories are indexed like telemetry: `latents[t]` is the state
//! after ingesting `y_t`.

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{LearnerConfig, OptState, OptimizerKind};
use crate::linalg::{matvec, matvec_t, Matrix};
use crate::rng::{self, Domain};
use crate::telemetry::TelemetryRecord;
use crate::{Error, Result};

/// Width of the monitor input.
pub const CHANNELS: usize = 6;
pub const STD_FLOOR: f64 = 1e-8;
pub const MIN_RUNS: usize = 3;
pub const MIN_STEPS: usize = 500;

const MAGIC: &[u8; 4] = b"SBMM";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    pub latent_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Truncation length for backpropagation through time.
    pub window: usize,
    pub seed: u64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            epochs: 40,
            lr: 0.01,
            window: 32,
            seed: 0,
        }
    }
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.window == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "monitor latent_dim, window and epochs must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("monitor lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Per-channel normalisation fitted on baseline telemetry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose std was raised to the floor.
    pub degenerate: Vec<bool>,
}

impl NormStats {
    pub fn fit(runs: &[&[TelemetryRecord]]) -> Self {
        let n: usize = runs.iter().map(|r| r.len()).sum();
        let mut mean = vec![0.0; CHANNELS];
        for rec in runs.iter().flat_map(|r| r.iter()) {
            for (m, v) in mean.iter_mut().zip(rec.channel_vector()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; CHANNELS];
        for rec in runs.iter().flat_map(|r| r.iter()) {
            for ((s, v), m) in var.iter_mut().zip(rec.channel_vector()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut degenerate = vec![false; CHANNELS];
        let std = var
            .iter()
            .zip(degenerate.iter_mut())
            .map(|(s, flag)| {
                let sd = (s / n as f64).sqrt();
                if sd < STD_FLOOR || !sd.is_finite() {
                    *flag = true;
                    STD_FLOOR
                } else {
                    sd
                }
            })
            .collect();
        Self { mean, std, degenerate }
    }

    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(y, (m, s))| m + s * y)
            .collect()
    }
}

/// `(raw - mean) / std` per channel.
pub fn normalize_telemetry(record: &TelemetryRecord, stats: &NormStats) -> Vec<f64> {
    record
        .channel_vector()
        .iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .map(|(v, (m, s))| (v - m) / s)
        .collect()
}

/// Mean and per-coordinate std of baseline latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: usize,
    pub window: usize,
    pub lr: f64,
    pub seed: u64,
    /// Mean squared one-step error over all baseline steps after training.
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonitorModel {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub norm: NormStats,
    pub baseline_latent: LatentStats,
    pub meta: TrainMeta,
}

/// Human-readable description written next to the binary model.
#[derive(Clone, Debug, Serialize)]
pub struct MonitorSummary<'a> {
    pub latent_dim: usize,
    pub channels: [&'static str; CHANNELS],
    pub spectral_norm: f64,
    pub norm: &'a NormStats,
    pub baseline_latent: &'a LatentStats,
    pub train: &'a TrainMeta,
}

impl MonitorModel {
    pub fn latent_dim(&self) -> usize {
        self.a.rows
    }

    /// `tanh(A h + B y)`.
    pub fn encode_step(&self, h: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let k = self.latent_dim();
        if h.len() != k || y.len() != self.b.cols {
            return Err(Error::Contract(format!(
                "monitor expects h of length {k} and y of length {}, got {} and {}",
                self.b.cols,
                h.len(),
                y.len()
            )));
        }
        Ok(self.pre_activation(h, y).into_iter().map(f64::tanh).collect())
    }

    fn pre_activation(&self, h: &[f64], y: &[f64]) -> Vec<f64> {
        let k = self.latent_dim();
        let mut a = vec![0.0; k];
        let mut b = vec![0.0; k];
        matvec(&self.a.data, k, k, h, &mut a);
        matvec(&self.b.data, k, self.b.cols, y, &mut b);
        a.iter().zip(&b).map(|(x, y)| x + y).collect()
    }

    /// Latent trajectory of a telemetry stream starting from `h = 0`.
    pub fn encode_stream(&self, records: &[TelemetryRecord]) -> Vec<Vec<f64>> {
        let mut h = vec![0.0; self.latent_dim()];
        records
            .iter()
            .map(|rec| {
                let y = normalize_telemetry(rec, &self.norm);
                h = self.pre_activation(&h, &y).into_iter().map(f64::tanh).collect();
                h.clone()
            })
            .collect()
    }

    /// Euclidean norm of the per-coordinate z-scores against the baseline.
    pub fn deviation_score(&self, h: &[f64]) -> f64 {
        h.iter()
            .zip(self.baseline_latent.mean.iter().zip(&self.baseline_latent.std))
            .map(|(h, (m, s))| {
                let z = (h - m) / s;
                z * z
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Mean squared error of `C h_t` against `y_t` over a stream.
    pub fn one_step_loss(&self, records: &[TelemetryRecord]) -> f64 {
        let (sum, count) = self.loss_sum(records);
        sum / count as f64
    }

    fn loss_sum(&self, records: &[TelemetryRecord]) -> (f64, usize) {
        let k = self.latent_dim();
        let m = self.c.rows;
        let mut h = vec![0.0; k];
        let mut pred = vec![0.0; m];
        let mut sum = 0.0;
        for rec in records {
            let y = normalize_telemetry(rec, &self.norm);
            matvec(&self.c.data, m, k, &h, &mut pred);
            sum += pred.iter().zip(&y).map(|(p, y)| (p - y) * (p - y)).sum::<f64>();
            h = self.pre_activation(&h, &y).into_iter().map(f64::tanh).collect();
        }
        (sum, records.len() * m)
    }

    pub fn spectral_norm(&self) -> f64 {
        spectral_norm(&self.a)
    }

    pub fn summary(&self) -> MonitorSummary<'_> {
        MonitorSummary {
            latent_dim: self.latent_dim(),
            channels: TelemetryRecord::CHANNELS,
            spectral_norm: self.spectral_norm(),
            norm: &self.norm,
            baseline_latent: &self.baseline_latent,
            train: &self.meta,
        }
    }

    /// Versioned little-endian blob with a sha256 prefix trailer.
    pub fn to_bytes(&self) -> Vec<u8> {
        let k = self.latent_dim();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(k as u32).to_le_bytes());
        out.extend_from_slice(&(self.b.cols as u32).to_le_bytes());
        let floats = self
            .a
            .data
            .iter()
            .chain(&self.b.data)
            .chain(&self.c.data)
            .chain(&self.norm.mean)
            .chain(&self.norm.std)
            .chain(&self.baseline_latent.mean)
            .chain(&self.baseline_latent.std);
        for f in floats {
            out.extend_from_slice(&f.to_le_bytes());
        }
        out.extend(self.norm.degenerate.iter().map(|&d| u8::from(d)));
        out.extend_from_slice(&(self.meta.epochs as u64).to_le_bytes());
        out.extend_from_slice(&(self.meta.window as u64).to_le_bytes());
        out.extend_from_slice(&self.meta.lr.to_le_bytes());
        out.extend_from_slice(&self.meta.seed.to_le_bytes());
        out.extend_from_slice(&self.meta.final_loss.to_le_bytes());
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest[..8]);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            path: "<monitor>".into(),
            detail,
        };
        if bytes.len() < 4 + 2 + 8 + 8 || &bytes[..4] != MAGIC {
            return Err(bad("not a monitor model (bad magic)".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 8);
        if Sha256::digest(body)[..8] != *sum {
            return Err(bad("monitor checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported monitor version {version}")));
        }
        let k = r.u32()? as usize;
        let m = r.u32()? as usize;
        let a = Matrix::from_vec(k, k, r.floats(k * k)?);
        let b = Matrix::from_vec(k, m, r.floats(k * m)?);
        let c = Matrix::from_vec(m, k, r.floats(m * k)?);
        let mean = r.floats(m)?;
        let std = r.floats(m)?;
        let lat_mean = r.floats(k)?;
        let lat_std = r.floats(k)?;
        let degenerate = r.take(m)?.iter().map(|&d| d != 0).collect();
        let meta = TrainMeta {
            epochs: r.u64()? as usize,
            window: r.u64()? as usize,
            lr: r.f64()?,
            seed: r.u64()?,
            final_loss: r.f64()?,
        };
        if r.pos != body.len() {
            return Err(bad("trailing bytes in monitor model".into()));
        }
        Ok(Self {
            a,
            b,
            c,
            norm: NormStats { mean, std, degenerate },
            baseline_latent: LatentStats {
                mean: lat_mean,
                std: lat_std,
            },
            meta,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Format {
            path: "<monitor>".into(),
            detail: "truncated monitor model".into(),
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> f64 {
    let d = DMatrix::from_row_slice(m.rows, m.cols, &m.data);
    d.singular_values().iter().cloned().fold(0.0, f64::max)
}

/// Fits a monitor on unperturbed telemetry streams.
pub fn fit_monitor(runs: &[&[TelemetryRecord]], cfg: &MonitorConfig) -> Result<MonitorModel> {
    cfg.validate()?;
    if runs.len() < MIN_RUNS || runs.iter().any(|r| r.len() < MIN_STEPS) {
        return Err(Error::Training(format!(
            "monitor fitting needs at least {MIN_RUNS} baseline runs of at least {MIN_STEPS} steps; got {} runs with lengths {:?}",
            runs.len(),
            runs.iter().map(|r| r.len()).collect::<Vec<_>>()
        )));
    }
    let k = cfg.latent_dim;
    let m = CHANNELS;
    let norm = NormStats::fit(runs);
    let ys: Vec<Vec<Vec<f64>>> = runs
        .iter()
        .map(|r| r.iter().map(|rec| normalize_telemetry(rec, &norm)).collect())
        .collect();

    let mut rng = rng::stream(cfg.seed, Domain::Monitor, 0);
    let mut draw = |n: usize, bound: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
    let mut model = MonitorModel {
        a: Matrix::from_vec(k, k, draw(k * k, 0.5 / (k as f64).sqrt())),
        b: Matrix::from_vec(k, m, draw(k * m, 1.0 / (m as f64).sqrt())),
        c: Matrix::from_vec(m, k, draw(m * k, 1.0 / (k as f64).sqrt())),
        norm,
        baseline_latent: LatentStats {
            mean: vec![0.0; k],
            std: vec![1.0; k],
        },
        meta: TrainMeta {
            epochs: cfg.epochs,
            window: cfg.window,
            lr: cfg.lr,
            seed: cfg.seed,
            final_loss: f64::NAN,
        },
    };
    clamp_spectrum(&mut model.a);

    let adam = LearnerConfig {
        optimizer: OptimizerKind::Adam,
        ..LearnerConfig::default()
    };
    let n_params = k * k + k * m + m * k;
    let mut opt = OptState::zeros(OptimizerKind::Adam, n_params);
    let mut params = vec![0.0; n_params];
    let mut updates = 0u64;
    for _ in 0..cfg.epochs {
        for stream in &ys {
            let mut h = vec![0.0; k];
            for chunk in stream.chunks(cfg.window) {
                let (grad, h_next) = chunk_gradient(&model, &h, chunk);
                h = h_next;
                pack(&model, &mut params);
                updates += 1;
                opt.apply(&adam, &mut params, &grad, cfg.lr, updates);
                unpack(&mut model, &params);
            }
        }
        clamp_spectrum(&mut model.a);
    }

    let (mut sum, mut count) = (0.0, 0);
    for run in runs {
        let (s, c) = model.loss_sum(run);
        sum += s;
        count += c;
    }
    model.meta.final_loss = sum / count as f64;
    model.baseline_latent = latent_stats(&model, runs);
    Ok(model)
}

fn latent_stats(model: &MonitorModel, runs: &[&[TelemetryRecord]]) -> LatentStats {
    let k = model.latent_dim();
    let latents: Vec<Vec<f64>> = runs.iter().flat_map(|r| model.encode_stream(r)).collect();
    let n = latents.len() as f64;
    let mut mean = vec![0.0; k];
    for h in &latents {
        for (m, v) in mean.iter_mut().zip(h) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; k];
    for h in &latents {
        for ((s, v), m) in var.iter_mut().zip(h).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    LatentStats { mean, std }
}

fn clamp_spectrum(a: &mut Matrix) {
    let s = spectral_norm(a);
    if s > 1.0 {
        a.data.iter_mut().for_each(|x| *x /= s);
    }
}

fn pack(model: &MonitorModel, out: &mut [f64]) {
    let (a, rest) = out.split_at_mut(model.a.data.len());
    let (b, c) = rest.split_at_mut(model.b.data.len());
    a.copy_from_slice(&model.a.data);
    b.copy_from_slice(&model.b.data);
    c.copy_from_slice(&model.c.data);
}

fn unpack(model: &mut MonitorModel, params: &[f64]) {
    let (a, rest) = params.split_at(model.a.data.len());
    let (b, c) = rest.split_at(model.b.data.len());
    model.a.data.copy_from_slice(a);
    model.b.data.copy_from_slice(b);
    model.c.data.copy_from_slice(c);
}

/// Gradient of the chunk's mean squared one-step error with respect to
/// `[A, B, C]` (row-major, concatenated), holding the incoming state fixed.
/// Also returns the state carried into the next chunk.
fn chunk_gradient(model: &MonitorModel, h0: &[f64], ys: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let k = model.latent_dim();
    let m = model.c.rows;
    let len = ys.len();
    let scale = 2.0 / (len * m) as f64;
    let mut hs = Vec::with_capacity(len + 1);
    hs.push(h0.to_vec());
    let mut errs = Vec::with_capacity(len);
    let mut pred = vec![0.0; m];
    for (i, y) in ys.iter().enumerate() {
        matvec(&model.c.data, m, k, &hs[i], &mut pred);
        errs.push(pred.iter().zip(y).map(|(p, y)| scale * (p - y)).collect::<Vec<_>>());
        let next = model.pre_activation(&hs[i], y).into_iter().map(f64::tanh).collect();
        hs.push(next);
    }
    let mut d_a = vec![0.0; k * k];
    let mut d_b = vec![0.0; k * m];
    let mut d_c = vec![0.0; m * k];
    let mut dh_next = vec![0.0; k];
    let mut da = vec![0.0; k];
    let mut dh = vec![0.0; k];
    let mut back = vec![0.0; k];
    for i in (0..len).rev() {
        let h = &hs[i];
        for r in 0..k {
            let hn = hs[i + 1][r];
            da[r] = dh_next[r] * (1.0 - hn * hn);
            for c in 0..k {
                d_a[r * k + c] += da[r] * h[c];
            }
            for c in 0..m {
                d_b[r * m + c] += da[r] * ys[i][c];
            }
        }
        let e = &errs[i];
        for r in 0..m {
            for c in 0..k {
                d_c[r * k + c] += e[r] * h[c];
            }
        }
        matvec_t(&model.a.data, k, k, &da, &mut dh);
        matvec_t(&model.c.data, m, k, e, &mut back);
        for (d, b) in dh.iter_mut().zip(&back) {
            *d += b;
        }
        dh_next.copy_from_slice(&dh);
    }
    let mut grad = d_a;
    grad.extend(d_b);
    grad.extend(d_c);
    (grad, hs.pop().expect("at least h0"))
}
