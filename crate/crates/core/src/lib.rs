//! Training-stability auditing engine.
//!
//! Small self-contained learners are driven through controlled perturbations
//! while a multi-channel telemetry stream is recorded. A recurrent latent
//! monitor fitted on unperturbed runs turns that telemetry into a meta-state
//! trajectory, and the [`metrics`] module reduces each run to collapse,
//! recovery, spike and latent-deviation scores.
//!
//! The crate is organised around the training loop:
//!
//! - [`dynamics`]: micro-learners (quadratic, softmax regression, tanh MLP,
//!   softmax bandit policy) with analytic gradients and seeded data streams.
//! - [`perturb`]: declarative perturbation specs and their injection seams.
//! - [`telemetry`]: the online channels `x_gen`, `x_inst`, `x_grad`, `x_mem`.
//! - [`metastate`]: the latent monitor `h_{t+1} = tanh(A h_t + B y_t)`.
//! - [`metrics`]: run-level stability metrics and cross-seed aggregation.
//! - [`runner`]: audit orchestration, artifacts, replay and timing sweeps.

pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod metastate;
pub mod metrics;
pub mod perturb;
pub mod rng;
pub mod runner;
pub mod telemetry;

pub use error::{Error, Result};
