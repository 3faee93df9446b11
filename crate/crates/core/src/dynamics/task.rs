//! Tasks and their seeded data streams.
//!
//! A batch is a pure function of `(task spec, run seed, step index)`. The
//! teacher structure of the supervised tasks (class prototypes) is drawn from
//! `task_seed`, so runs with different seeds share one data distribution.

use std::ops::Range;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::rng::{self, Domain, Rng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Quadratic,
    Logistic,
    MlpClassify,
    BanditPolicy,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Quadratic => "quadratic",
            TaskKind::Logistic => "logistic",
            TaskKind::MlpClassify => "mlp-classify",
            TaskKind::BanditPolicy => "bandit-policy",
        }
    }

    pub fn is_classifier(self) -> bool {
        matches!(self, TaskKind::Logistic | TaskKind::MlpClassify)
    }

    pub fn is_supervised(self) -> bool {
        !matches!(self, TaskKind::BanditPolicy)
    }
}

/// Task description. Fields that do not apply to `kind` are ignored.
///
/// | field | used by |
/// |---|---|
/// | `dim` | quadratic (parameter dim), classifiers (input dim) |
/// | `curvature`, `curvature_min`, `curvature_max`, `grad_noise` | quadratic |
/// | `classes`, `separation`, `input_scale`, `label_noise`, `clusters_per_class` | classifiers |
/// | `hidden` | mlp-classify |
/// | `arm_means`, `reward_std` | bandit-policy |
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub dim: usize,
    /// Explicit Hessian eigenvalues; when empty a geometric spectrum between
    /// `curvature_min` and `curvature_max` is used.
    pub curvature: Vec<f64>,
    pub curvature_min: f64,
    pub curvature_max: f64,
    /// Std of the per-sample minimiser offset of the stochastic quadratic.
    pub grad_noise: f64,
    pub classes: usize,
    pub hidden: usize,
    pub separation: f64,
    pub input_scale: f64,
    pub label_noise: f64,
    pub clusters_per_class: usize,
    pub arm_means: Vec<f64>,
    pub reward_std: f64,
    pub batch_size: usize,
    pub eval_size: usize,
    pub task_seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Quadratic,
            dim: 10,
            curvature: Vec::new(),
            curvature_min: 0.1,
            curvature_max: 10.0,
            grad_noise: 0.0,
            classes: 4,
            hidden: 16,
            separation: 2.0,
            input_scale: 1.0,
            label_noise: 0.0,
            clusters_per_class: 1,
            arm_means: vec![1.0, 0.0, 0.0],
            reward_std: 0.1,
            batch_size: 64,
            eval_size: 256,
            task_seed: 0,
        }
    }
}

/// One named parameter block (a layer or a whole vector).
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: &'static str,
    pub range: Range<usize>,
    /// Fan-in of the block; `None` means the block is zero-initialised.
    pub fan_in: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Quadratic: the offsets live in `inputs`.
    None,
    /// Row-major `rows x classes` target distributions (one-hot unless smoothed).
    Soft { classes: usize, probs: Vec<f64> },
    /// Bandit draws. `inputs` holds one uniform per row for inverse-CDF arm
    /// selection; rewards are `arm_mean + reward_std * noise + offset`.
    Bandit {
        noise: Vec<f64>,
        offsets: Vec<f64>,
        /// Optional per-row additive noise on the sampling logits.
        logit_noise: Option<Matrix>,
    },
}

/// One draw from the data stream, partitioned into sub-batches.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Targets,
    pub splits: Vec<Range<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.rows
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows == 0
    }

    /// Hard label of a classifier row (argmax of its target distribution).
    pub fn label(&self, row: usize) -> Option<usize> {
        match &self.targets {
            Targets::Soft { classes, probs } => {
                let r = &probs[row * classes..(row + 1) * classes];
                let mut best = 0;
                for (i, p) in r.iter().enumerate() {
                    if *p > r[best] {
                        best = i;
                    }
                }
                Some(best)
            }
            _ => None,
        }
    }
}

/// Contiguous partition of `n` rows into `k` near-equal sub-batches.
pub fn partition(n: usize, k: usize) -> Vec<Range<usize>> {
    let base = n / k;
    let extra = n % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// Validated task with its derived teacher structure.
#[derive(Clone, Debug)]
pub struct Task {
    spec: TaskSpec,
    curvature: Vec<f64>,
    /// `classes * clusters_per_class` prototypes of length `dim`.
    prototypes: Vec<Vec<f64>>,
}

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        validate(&spec)?;
        let curvature = match spec.kind {
            TaskKind::Quadratic if !spec.curvature.is_empty() => spec.curvature.clone(),
            TaskKind::Quadratic => geometric(spec.curvature_min, spec.curvature_max, spec.dim),
            _ => Vec::new(),
        };
        let prototypes = if spec.kind.is_classifier() {
            let mut rng = rng::stream(spec.task_seed, Domain::Data, u64::MAX);
            let count = spec.classes * spec.clusters_per_class;
            let scale = spec.separation / (spec.dim as f64).sqrt();
            (0..count)
                .map(|_| {
                    (0..spec.dim)
                        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            spec,
            curvature,
            prototypes,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn kind(&self) -> TaskKind {
        self.spec.kind
    }

    /// Hessian eigenvalues of the quadratic task.
    pub fn curvature(&self) -> &[f64] {
        &self.curvature
    }

    pub fn num_params(&self) -> usize {
        self.blocks().last().map(|b| b.range.end).unwrap_or(0)
    }

    pub fn blocks(&self) -> Vec<Block> {
        let s = &self.spec;
        match s.kind {
            TaskKind::Quadratic => vec![Block {
                name: "theta",
                range: 0..s.dim,
                fan_in: Some(s.dim),
            }],
            TaskKind::Logistic => {
                let w = s.classes * s.dim;
                vec![
                    Block {
                        name: "W",
                        range: 0..w,
                        fan_in: Some(s.dim),
                    },
                    Block {
                        name: "b",
                        range: w..w + s.classes,
                        fan_in: Some(s.dim),
                    },
                ]
            }
            TaskKind::MlpClassify => {
                let w1 = s.hidden * s.dim;
                let b1 = w1 + s.hidden;
                let w2 = b1 + s.classes * s.hidden;
                let b2 = w2 + s.classes;
                vec![
                    Block {
                        name: "W1",
                        range: 0..w1,
                        fan_in: Some(s.dim),
                    },
                    Block {
                        name: "b1",
                        range: w1..b1,
                        fan_in: Some(s.dim),
                    },
                    Block {
                        name: "W2",
                        range: b1..w2,
                        fan_in: Some(s.hidden),
                    },
                    Block {
                        name: "b2",
                        range: w2..b2,
                        fan_in: Some(s.hidden),
                    },
                ]
            }
            TaskKind::BanditPolicy => vec![Block {
                name: "logits",
                range: 0..s.arm_means.len(),
                fan_in: None,
            }],
        }
    }

    /// Training batch for `step`, split into `sub_batches` parts.
    pub fn batch(&self, seed: u64, step: u64, sub_batches: usize) -> Batch {
        let mut rng = rng::stream(seed, Domain::Data, step);
        let mut batch = self.draw(&mut rng, self.spec.batch_size);
        batch.splits = partition(batch.len(), sub_batches);
        batch
    }

    /// Evaluation sample; a pure function of `eval_seed`.
    pub fn eval_batch(&self, eval_seed: u64) -> Batch {
        let mut rng = rng::stream(eval_seed, Domain::Eval, 0);
        let mut batch = self.draw(&mut rng, self.spec.eval_size);
        batch.splits = partition(batch.len(), 1);
        batch
    }

    fn draw(&self, rng: &mut Rng, n: usize) -> Batch {
        let s = &self.spec;
        match s.kind {
            TaskKind::Quadratic => {
                let mut inputs = Matrix::zeros(n, s.dim);
                if s.grad_noise > 0.0 {
                    for v in inputs.data.iter_mut() {
                        *v = s.grad_noise * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                Batch {
                    inputs,
                    targets: Targets::None,
                    splits: Vec::new(),
                }
            }
            TaskKind::Logistic | TaskKind::MlpClassify => {
                let mut inputs = Matrix::zeros(n, s.dim);
                let mut probs = vec![0.0; n * s.classes];
                for r in 0..n {
                    let class = rng.random_range(0..s.classes);
                    let cluster = rng.random_range(0..s.clusters_per_class);
                    let proto = &self.prototypes[class * s.clusters_per_class + cluster];
                    for (x, m) in inputs.row_mut(r).iter_mut().zip(proto) {
                        *x = s.input_scale * (m + rng.sample::<f64, _>(StandardNormal));
                    }
                    let flip: f64 = rng.random();
                    let label = if flip < s.label_noise {
                        rng.random_range(0..s.classes)
                    } else {
                        class
                    };
                    probs[r * s.classes + label] = 1.0;
                }
                Batch {
                    inputs,
                    targets: Targets::Soft {
                        classes: s.classes,
                        probs,
                    },
                    splits: Vec::new(),
                }
            }
            TaskKind::BanditPolicy => {
                let mut inputs = Matrix::zeros(n, 1);
                let mut noise = vec![0.0; n];
                for r in 0..n {
                    inputs.data[r] = rng.random();
                    noise[r] = rng.sample(StandardNormal);
                }
                Batch {
                    inputs,
                    targets: Targets::Bandit {
                        noise,
                        offsets: vec![0.0; n],
                        logit_noise: None,
                    },
                    splits: Vec::new(),
                }
            }
        }
    }
}

fn geometric(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    let ratio = (hi / lo).powf(1.0 / (n - 1) as f64);
    (0..n).map(|i| lo * ratio.powi(i as i32)).collect()
}

fn validate(s: &TaskSpec) -> Result<()> {
    let fail = |msg: String| Err(Error::Config(format!("task ({}): {msg}", s.kind.name())));
    if s.batch_size == 0 || s.eval_size == 0 {
        return fail("batch_size and eval_size must be positive".into());
    }
    match s.kind {
        TaskKind::Quadratic => {
            if s.dim == 0 {
                return fail("dim must be positive".into());
            }
            if !s.curvature.is_empty() {
                if s.curvature.len() != s.dim {
                    return fail(format!(
                        "curvature has {} eigenvalues but dim is {}",
                        s.curvature.len(),
                        s.dim
                    ));
                }
                if s.curvature.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
                    return fail("curvature eigenvalues must be positive and finite".into());
                }
            } else if !(s.curvature_min > 0.0 && s.curvature_max >= s.curvature_min) {
                return fail("need 0 < curvature_min <= curvature_max".into());
            }
            if !(s.grad_noise >= 0.0) {
                return fail("grad_noise must be non-negative".into());
            }
        }
        TaskKind::Logistic | TaskKind::MlpClassify => {
            if s.dim == 0 || s.classes < 2 || s.clusters_per_class == 0 {
                return fail("need dim > 0, classes >= 2, clusters_per_class >= 1".into());
            }
            if s.kind == TaskKind::MlpClassify && s.hidden == 0 {
                return fail("hidden must be positive".into());
            }
            if !(0.0..=1.0).contains(&s.label_noise) {
                return fail("label_noise must lie in [0, 1]".into());
            }
            if !(s.input_scale > 0.0) || !(s.separation >= 0.0) {
                return fail("input_scale must be positive and separation non-negative".into());
            }
        }
        TaskKind::BanditPolicy => {
            if s.arm_means.len() < 2 {
                return fail("need at least two arms".into());
            }
            if !(s.reward_std >= 0.0) || s.arm_means.iter().any(|m| !m.is_finite()) {
                return fail("reward_std must be non-negative and arm means finite".into());
            }
        }
    }
    Ok(())
}
