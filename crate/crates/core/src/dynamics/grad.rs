//! Losses and analytic gradients for every learner kind.

use std::ops::Range;

use super::task::{Batch, Targets, Task, TaskKind};
use super::RewardBaseline;
use crate::linalg::{axpy, dot, log_sum_exp, matvec, matvec_t, softmax};

/// Arms chosen and advantages realised for one bandit batch.
///
/// Sampling is separated from differentiation so the surrogate objective can
/// be checked against finite differences with the draw held fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyDraw {
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Samples one arm per row by inverse CDF of `softmax(logits + logit_noise)`.
pub fn policy_draw(task: &Task, logits: &[f64], batch: &Batch, baseline: RewardBaseline) -> PolicyDraw {
    let Targets::Bandit {
        noise,
        offsets,
        logit_noise,
    } = &batch.targets
    else {
        panic!("policy_draw called on a non-bandit batch");
    };
    let spec = task.spec();
    let clean = softmax(logits);
    let mut actions = Vec::with_capacity(batch.len());
    let mut rewards = Vec::with_capacity(batch.len());
    let mut shifted = vec![0.0; logits.len()];
    for r in 0..batch.len() {
        let probs = match logit_noise {
            Some(ln) => {
                for (s, (l, n)) in shifted.iter_mut().zip(logits.iter().zip(ln.row(r))) {
                    *s = l + n;
                }
                softmax(&shifted)
            }
            None => clean.clone(),
        };
        let u = batch.inputs.data[r];
        let mut acc = 0.0;
        let mut arm = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                arm = i;
                break;
            }
        }
        actions.push(arm);
        rewards.push(spec.arm_means[arm] + spec.reward_std * noise[r] + offsets[r]);
    }
    let b = match baseline {
        RewardBaseline::None => 0.0,
        RewardBaseline::BatchMean => rewards.iter().sum::<f64>() / rewards.len() as f64,
    };
    let advantages = rewards.iter().map(|r| r - b).collect();
    PolicyDraw {
        actions,
        rewards,
        advantages,
    }
}

/// Entropy of `softmax(logits)` and the log-probabilities.
pub(crate) fn policy_entropy(logits: &[f64]) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let log_p: Vec<f64> = logits.iter().map(|l| l - lse).collect();
    let h = -log_p.iter().map(|lp| lp.exp() * lp).sum::<f64>();
    (h, log_p)
}

/// REINFORCE surrogate `-(1/n) sum A_i log pi(a_i) - c H(pi)` over `rows` and its
/// gradient with respect to the logits.
pub fn policy_surrogate(
    logits: &[f64],
    draw: &PolicyDraw,
    rows: Range<usize>,
    entropy_coef: f64,
) -> (f64, Vec<f64>) {
    let (h, log_p) = policy_entropy(logits);
    let p: Vec<f64> = log_p.iter().map(|lp| lp.exp()).collect();
    let n = rows.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for r in rows {
        let a = draw.actions[r];
        let adv = draw.advantages[r];
        loss -= adv * log_p[a];
        // d(-A log pi(a)) = -A (e_a - pi)
        grad[a] -= adv;
        axpy(adv, &p, &mut grad);
    }
    loss /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    loss -= entropy_coef * h;
    for j in 0..logits.len() {
        grad[j] += entropy_coef * p[j] * (log_p[j] + h);
    }
    (loss, grad)
}

/// Mean loss and gradient over `rows` of a supervised batch.
pub fn sub_batch_loss_grad(task: &Task, params: &[f64], batch: &Batch, rows: Range<usize>) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; params.len()];
    let n = rows.len() as f64;
    let mut loss = 0.0;
    match task.kind() {
        TaskKind::Quadratic => {
            let lambda = task.curvature();
            let mut mean_offset = vec![0.0; params.len()];
            for r in rows {
                let xi = batch.inputs.row(r);
                for j in 0..params.len() {
                    let d = params[j] - xi[j];
                    loss += 0.5 * lambda[j] * d * d;
                    mean_offset[j] += xi[j];
                }
            }
            for j in 0..params.len() {
                grad[j] = lambda[j] * (params[j] - mean_offset[j] / n);
            }
            return (loss / n, grad);
        }
        TaskKind::Logistic => {
            let s = task.spec();
            let (w, b) = params.split_at(s.classes * s.dim);
            let (gw, gb) = grad.split_at_mut(s.classes * s.dim);
            let mut z = vec![0.0; s.classes];
            for r in rows {
                let x = batch.inputs.row(r);
                matvec(w, s.classes, s.dim, x, &mut z);
                axpy(1.0, b, &mut z);
                let t = soft_row(batch, r);
                let (l, dz) = cross_entropy(&z, t);
                loss += l;
                for c in 0..s.classes {
                    axpy(dz[c], x, &mut gw[c * s.dim..(c + 1) * s.dim]);
                    gb[c] += dz[c];
                }
            }
        }
        TaskKind::MlpClassify => {
            let s = task.spec();
            let (h_dim, d, c_dim) = (s.hidden, s.dim, s.classes);
            let (w1, rest) = params.split_at(h_dim * d);
            let (b1, rest) = rest.split_at(h_dim);
            let (w2, b2) = rest.split_at(c_dim * h_dim);
            let (gw1, grest) = grad.split_at_mut(h_dim * d);
            let (gb1, grest) = grest.split_at_mut(h_dim);
            let (gw2, gb2) = grest.split_at_mut(c_dim * h_dim);
            let mut hidden = vec![0.0; h_dim];
            let mut z = vec![0.0; c_dim];
            let mut dh = vec![0.0; h_dim];
            for r in rows {
                let x = batch.inputs.row(r);
                matvec(w1, h_dim, d, x, &mut hidden);
                for (hv, bv) in hidden.iter_mut().zip(b1) {
                    *hv = (*hv + bv).tanh();
                }
                matvec(w2, c_dim, h_dim, &hidden, &mut z);
                axpy(1.0, b2, &mut z);
                let (l, dz) = cross_entropy(&z, soft_row(batch, r));
                loss += l;
                for c in 0..c_dim {
                    axpy(dz[c], &hidden, &mut gw2[c * h_dim..(c + 1) * h_dim]);
                    gb2[c] += dz[c];
                }
                matvec_t(w2, c_dim, h_dim, &dz, &mut dh);
                for j in 0..h_dim {
                    let da = dh[j] * (1.0 - hidden[j] * hidden[j]);
                    axpy(da, x, &mut gw1[j * d..(j + 1) * d]);
                    gb1[j] += da;
                }
            }
        }
        TaskKind::BanditPolicy => panic!("use policy_surrogate for the policy learner"),
    }
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

/// Mean loss only, used for evaluation.
pub(crate) fn mean_loss(task: &Task, params: &[f64], batch: &Batch) -> f64 {
    match task.kind() {
        TaskKind::Quadratic => {
            let lambda = task.curvature();
            let mut total = 0.0;
            for r in 0..batch.len() {
                let xi = batch.inputs.row(r);
                for j in 0..params.len() {
                    let d = params[j] - xi[j];
                    total += 0.5 * lambda[j] * d * d;
                }
            }
            total / batch.len() as f64
        }
        TaskKind::Logistic | TaskKind::MlpClassify => {
            let logits = classifier_logits(task, params, batch);
            let classes = task.spec().classes;
            let mut total = 0.0;
            for r in 0..batch.len() {
                let z = &logits[r * classes..(r + 1) * classes];
                total += cross_entropy_loss(z, soft_row(batch, r));
            }
            total / batch.len() as f64
        }
        TaskKind::BanditPolicy => panic!("policy learner has no supervised loss"),
    }
}

fn classifier_logits(task: &Task, params: &[f64], batch: &Batch) -> Vec<f64> {
    let s = task.spec();
    let mut out = vec![0.0; batch.len() * s.classes];
    match task.kind() {
        TaskKind::Logistic => {
            let (w, b) = params.split_at(s.classes * s.dim);
            for r in 0..batch.len() {
                let z = &mut out[r * s.classes..(r + 1) * s.classes];
                matvec(w, s.classes, s.dim, batch.inputs.row(r), z);
                axpy(1.0, b, z);
            }
        }
        TaskKind::MlpClassify => {
            let (h_dim, d, c_dim) = (s.hidden, s.dim, s.classes);
            let (w1, rest) = params.split_at(h_dim * d);
            let (b1, rest) = rest.split_at(h_dim);
            let (w2, b2) = rest.split_at(c_dim * h_dim);
            let mut hidden = vec![0.0; h_dim];
            for r in 0..batch.len() {
                matvec(w1, h_dim, d, batch.inputs.row(r), &mut hidden);
                for (hv, bv) in hidden.iter_mut().zip(b1) {
                    *hv = (*hv + bv).tanh();
                }
                let z = &mut out[r * c_dim..(r + 1) * c_dim];
                matvec(w2, c_dim, h_dim, &hidden, z);
                axpy(1.0, b2, z);
            }
        }
        _ => unreachable!(),
    }
    out
}

fn soft_row(batch: &Batch, r: usize) -> &[f64] {
    match &batch.targets {
        Targets::Soft { classes, probs } => &probs[r * classes..(r + 1) * classes],
        _ => panic!("classifier batch without soft targets"),
    }
}

fn cross_entropy_loss(z: &[f64], t: &[f64]) -> f64 {
    let lse = log_sum_exp(z);
    lse * t.iter().sum::<f64>() - dot(t, z)
}

/// Soft-target cross-entropy and its gradient with respect to the logits.
fn cross_entropy(z: &[f64], t: &[f64]) -> (f64, Vec<f64>) {
    let mass: f64 = t.iter().sum();
    let p = softmax(z);
    let loss = cross_entropy_loss(z, t);
    let dz = p.iter().zip(t).map(|(pi, ti)| pi * mass - ti).collect();
    (loss, dz)
}
