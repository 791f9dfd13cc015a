//! Noise predictors `ε_θ(x_t, t)`.
//!
//! Every predictor builds its output as a node in a caller-supplied
//! [`Graph`], so gradients with respect to `x_t` flow through it. Inputs are
//! either a single clip (`[n]`) or a batch (`[B, n]`) sharing one timestep.

mod analytic;
mod checkpoint;
mod mlp;
mod train;

pub use analytic::{AnalyticPrior, ExactNoise, ZeroNoise};
pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use mlp::{timestep_embedding, ArchDescriptor, HiddenActivation, MlpDenoiser, Parameterization};
pub use train::{train, TrainConfig, TrainOutcome};

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId};
use crate::diffusion::{NoiseSchedule, ScheduleError};

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("denoiser expects clips of length {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint architecture mismatch: expected {expected}, found {found}")]
    ArchitectureMismatch { expected: String, found: String },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// A noise predictor usable inside differentiable graphs.
pub trait Denoiser: Send + Sync {
    /// Length of the signals this predictor operates on.
    fn dim(&self) -> usize;

    /// Appends `ε̂ = ε_θ(x_t, t)` to `graph`.
    fn predict_eps(
        &self,
        graph: &mut Graph,
        x_t: NodeId,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<NodeId, DenoiserError>;
}

pub(crate) fn check_input(graph: &Graph, x_t: NodeId, dim: usize) -> Result<(), DenoiserError> {
    let got = *graph.value(x_t).shape().last().expect("non-empty shape");
    if got != dim || graph.value(x_t).shape().len() > 2 {
        return Err(DenoiserError::ShapeMismatch { expected: dim, got });
    }
    Ok(())
}
