//! Experiment orchestration: stages that read and write a fixed run
//! directory layout.
//!
//! ```text
//! <run>/config.toml
//! <run>/corpus/manifest.json, corpus/clips/*.lsac
//! <run>/checkpoints/denoiser.lsap, checkpoints/train.json
//! <run>/calibration/calibration.json
//! <run>/scores/<attack>.jsonl, scores/parity.json
//! <run>/reports/evaluation.json, reports/report.json, reports/report.txt,
//!       reports/sweep.json, reports/timing.json
//! ```
//!
//! Every artifact except `timing.json` is a deterministic function of the
//! config.

mod config;
mod persist;
mod report;
mod stages;
mod sweep;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{apply_override, stage_seed, DenoiserConfig, EvaluationConfig, ExperimentConfig, SweepConfig};
pub use persist::{load_scores, persist_scores, SCORE_SCHEMA_VERSION};
pub use report::{
    delta_vs_best, evaluate_records, AttackEvaluation, Evaluation, ReportRow, RunReport, TprEstimate, NOT_IMPLEMENTED,
};
pub use stages::{
    attack, baseline, calibrate, denoising_loss, evaluate, gen_data, probe_context, report, run_all, train,
    ParityRecord, TrainSummary,
};
pub use sweep::{sweep, SweepCell, SweepReport};

/// Environment variable naming the default run directory.
pub const RUN_DIR_ENV: &str = "LSAP_RUN_DIR";
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("artifact error: {0}")]
    Artifact(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl PipelineError {
    /// Process exit code: 2 config, 3 artifact or fingerprint, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Artifact(_) => 3,
            PipelineError::Numerical(_) => 4,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        PipelineError::Artifact(format!("{}: {e}", path.display()))
    }
}

impl From<crate::corpus::CorpusError> for PipelineError {
    fn from(e: crate::corpus::CorpusError) -> Self {
        use crate::corpus::CorpusError as C;
        match e {
            C::InvalidConfig(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Artifact(e.to_string()),
        }
    }
}

impl From<crate::denoiser::DenoiserError> for PipelineError {
    fn from(e: crate::denoiser::DenoiserError) -> Self {
        use crate::denoiser::DenoiserError as D;
        match e {
            D::InvalidConfig(_) | D::ShapeMismatch { .. } | D::EmptyCorpus => PipelineError::Config(e.to_string()),
            D::Format(_) | D::ArchitectureMismatch { .. } | D::Io(_) => PipelineError::Artifact(e.to_string()),
            D::Diverged { .. } | D::Autodiff(_) | D::Schedule(_) => PipelineError::Numerical(e.to_string()),
        }
    }
}

impl From<crate::attack::AttackError> for PipelineError {
    fn from(e: crate::attack::AttackError) -> Self {
        use crate::attack::AttackError as A;
        match e {
            A::InvalidConfig(_) | A::ShapeMismatch { .. } => PipelineError::Config(e.to_string()),
            A::MissingCalibration => PipelineError::Artifact(e.to_string()),
            _ if e.is_numerical() => PipelineError::Numerical(e.to_string()),
            _ => PipelineError::Config(e.to_string()),
        }
    }
}

impl From<crate::calibration::CalibrationError> for PipelineError {
    fn from(e: crate::calibration::CalibrationError) -> Self {
        use crate::calibration::CalibrationError as C;
        match e {
            C::Attack(a) => a.into(),
            C::FingerprintMismatch { .. } | C::SplitViolation { .. } | C::EmptyDevSet => PipelineError::Artifact(e.to_string()),
            C::InvalidConfig(_) => PipelineError::Config(e.to_string()),
        }
    }
}

impl From<crate::baselines::BaselineError> for PipelineError {
    fn from(e: crate::baselines::BaselineError) -> Self {
        use crate::baselines::BaselineError as B;
        match e {
            B::Attack(a) => a.into(),
            B::Unattainable { .. } | B::InvalidConfig(_) => PipelineError::Config(e.to_string()),
        }
    }
}

impl From<crate::stats::StatsError> for PipelineError {
    fn from(e: crate::stats::StatsError) -> Self {
        use crate::stats::StatsError as S;
        match e {
            S::NonFiniteScore(_) => PipelineError::Numerical(e.to_string()),
            S::InvalidArgument(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Artifact(e.to_string()),
        }
    }
}

impl From<crate::distances::MetricError> for PipelineError {
    fn from(e: crate::distances::MetricError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl From<crate::diffusion::ScheduleError> for PipelineError {
    fn from(e: crate::diffusion::ScheduleError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

/// Paths of one run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Explicit path, else `$LSAP_RUN_DIR`, else the config's `output_dir`,
    /// else `./run`.
    pub fn resolve(explicit: Option<&Path>, config: &ExperimentConfig) -> Self {
        if let Some(p) = explicit {
            return Self::new(p);
        }
        if let Some(p) = std::env::var_os(RUN_DIR_ENV).filter(|v| !v.is_empty()) {
            return Self::new(PathBuf::from(p));
        }
        Self::new(config.output_dir.as_deref().unwrap_or("run"))
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoints").join("denoiser.lsap")
    }
    pub fn train_summary(&self) -> PathBuf {
        self.root.join("checkpoints").join("train.json")
    }
    pub fn calibration(&self) -> PathBuf {
        self.root.join("calibration").join("calibration.json")
    }
    pub fn scores_dir(&self) -> PathBuf {
        self.root.join("scores")
    }
    pub fn scores(&self, attack: &str) -> PathBuf {
        self.scores_dir().join(format!("{attack}.jsonl"))
    }
    pub fn parity(&self) -> PathBuf {
        self.scores_dir().join("parity.json")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn evaluation(&self) -> PathBuf {
        self.reports().join("evaluation.json")
    }
    pub fn report_json(&self) -> PathBuf {
        self.reports().join("report.json")
    }
    pub fn report_text(&self) -> PathBuf {
        self.reports().join("report.txt")
    }
    pub fn sweep(&self) -> PathBuf {
        self.reports().join("sweep.json")
    }
    pub fn timing(&self) -> PathBuf {
        self.reports().join("timing.json")
    }
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Artifact(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| PipelineError::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        PipelineError::Artifact(format!("missing artifact {} ({e}); run the producing stage first", path.display()))
    })?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Artifact(format!("{}: {e}", path.display())))
}
