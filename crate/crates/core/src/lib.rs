//! Membership inference for diffusion models by adversarial stability
//! probing.
//!
//! A clip is noised to an intermediate timestep, a time-normalized
//! perturbation is injected, and the deterministic DDIM reverse operator
//! maps both the clean and the perturbed latent back to waveforms. The
//! smallest perturbation budget that pushes a perceptual distance between
//! the two reconstructions past a calibrated threshold is the clip's
//! adversarial cost; training members tend to sit in flatter regions and
//! cost more to degrade.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod baselines;
pub mod autodiff;
pub mod calibration;
pub mod corpus;
pub mod denoiser;
pub mod diffusion;
pub mod distances;
pub mod ledger;
pub mod pipeline;
pub mod reverse;
pub mod rng;
pub mod stats;

pub use autodiff::{Array, Graph, NodeId};
pub use diffusion::{Clip, NoiseSchedule, ScheduleConfig, Split, TimestepChoice};
pub use ledger::ComputeLedger;
pub use attack::{AdvCostResult, AttackConfig, Norm, ProbeContext, Prober};
pub use baselines::{BaselineConfig, BaselineKind};
pub use calibration::{calibrate_tau, CalibrationConfig, CalibrationResult};
pub use corpus::CorpusConfig;
pub use denoiser::{ArchDescriptor, Denoiser, MlpDenoiser, TrainConfig};
pub use distances::{Metric, MetricConfig, MetricKind};
pub use pipeline::{ExperimentConfig, PipelineError, RunDir};
pub use reverse::{ReverseConfig, ReverseOperator, Stride};
pub use rng::SeedPolicy;
pub use stats::ScoreRecord;
