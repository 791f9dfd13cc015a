//! Experiment configuration: one TOML document plus `key=value` overrides.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;
use crate::attack::AttackConfig;
use crate::baselines::{BaselineConfig, BaselineKind};
use crate::calibration::CalibrationConfig;
use crate::corpus::CorpusConfig;
use crate::denoiser::{ArchDescriptor, HiddenActivation, Parameterization, TrainConfig};
use crate::diffusion::ScheduleConfig;
use crate::distances::{Metric, MetricConfig, MetricKind};
use crate::reverse::{ReverseConfig, Stride};
use crate::rng::{fnv1a, mix64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub hidden: Vec<usize>,
    pub activation: HiddenActivation,
    pub time_embed_dim: usize,
    pub parameterization: Parameterization,
    /// Latent mode: diffuse in the first `m` DCT coefficients of each clip.
    pub latent_dim: Option<usize>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        let a = ArchDescriptor::new(1);
        Self {
            hidden: a.hidden,
            activation: a.activation,
            time_embed_dim: a.time_embed_dim,
            parameterization: a.parameterization,
            latent_dim: None,
        }
    }
}

impl DenoiserConfig {
    pub fn arch(&self, clip_len: usize) -> ArchDescriptor {
        ArchDescriptor {
            input_dim: self.latent_dim.unwrap_or(clip_len),
            hidden: self.hidden.clone(),
            activation: self.activation,
            time_embed_dim: self.time_embed_dim,
            parameterization: self.parameterization,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Confidence level of every interval.
    pub level: f64,
    pub fpr_targets: Vec<f64>,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    /// Family-wise error rate for the sweep's Holm correction.
    pub alpha: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            level: 0.95,
            fpr_targets: vec![0.01, 0.001],
            bootstrap_resamples: 2000,
            bootstrap_seed: 0,
            alpha: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub t_ratios: Vec<f64>,
    pub eta_grid: Vec<f64>,
    pub metrics: Vec<MetricKind>,
    /// Clips per split scored in each cell; `None` scores every clip.
    pub clips_per_split: Option<usize>,
    /// Attack overrides applied to every cell.
    pub steps: Option<usize>,
    pub restarts: Option<usize>,
    pub bisection_steps: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            t_ratios: vec![0.2, 0.4, 0.6, 0.8],
            eta_grid: vec![0.05, 0.1, 0.2, 0.4, 0.8],
            metrics: MetricKind::ALL.to_vec(),
            clips_per_split: Some(16),
            steps: None,
            restarts: None,
            bisection_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Every stochastic choice derives from this seed combined with the
    /// per-section `seed` fields.
    pub master_seed: u64,
    /// Worker threads for per-sample stages; 0 uses every core.
    pub workers: usize,
    /// Run directory when neither `--run-dir` nor `LSAP_RUN_DIR` is given.
    pub output_dir: Option<String>,
    pub corpus: CorpusConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub reverse: ReverseConfig,
    pub metric: MetricConfig,
    pub attack: AttackConfig,
    pub calibration: CalibrationConfig,
    pub baselines: Vec<BaselineConfig>,
    pub evaluation: EvaluationConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            workers: 0,
            output_dir: None,
            corpus: CorpusConfig::default(),
            schedule: ScheduleConfig { steps: 100, ..Default::default() },
            denoiser: DenoiserConfig::default(),
            train: TrainConfig::default(),
            reverse: ReverseConfig {
                stride: Stride::MaxCalls(25),
                checkpointing: true,
            },
            metric: MetricConfig::default(),
            attack: AttackConfig::default(),
            calibration: CalibrationConfig::default(),
            baselines: BaselineKind::ALL.iter().map(|&k| BaselineConfig::of(k)).collect(),
            evaluation: EvaluationConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// `mix64(master ^ mix64(fnv1a(purpose))) ^ local`.
pub fn stage_seed(master: u64, purpose: &str, local: u64) -> u64 {
    mix64(master ^ mix64(fnv1a(purpose.as_bytes()))) ^ local
}

fn config_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads `path` (or the defaults) and applies `key.path=value`
    /// overrides in order.
    pub fn load(path: Option<&std::path::Path>, overrides: &[String]) -> Result<Self, PipelineError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?,
            None => Self::default().to_toml(),
        };
        let mut value: toml::Value = toml::from_str(&text).map_err(config_err)?;
        // Fill in defaults first so overrides can address absent sections.
        let base: Self = value.clone().try_into().map_err(config_err)?;
        value = toml::Value::try_from(&base).map_err(config_err)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let config: Self = value.try_into().map_err(config_err)?;
        config.validate()?;
        Ok(config)
    }

    /// SHA-256 of the serialized config.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.corpus.validate().map_err(config_err)?;
        self.schedule.build().map_err(config_err)?;
        let arch = self.denoiser.arch(self.corpus.clip_len);
        arch.validate().map_err(config_err)?;
        if let Some(m) = self.denoiser.latent_dim {
            if m == 0 || m > self.corpus.clip_len {
                return Err(config_err(format!("latent_dim {m} must be in [1, clip_len]")));
            }
        }
        self.attack.validate().map_err(config_err)?;
        self.calibration.validate().map_err(config_err)?;
        if self.calibration.metric != self.attack.metric || self.calibration.timestep != self.attack.timestep {
            return Err(config_err("calibration metric and timestep must match the attack's"));
        }
        for b in &self.baselines {
            b.validate().map_err(config_err)?;
        }
        for kind in MetricKind::ALL {
            let m = Metric::new(kind, &self.metric).map_err(config_err)?;
            if m.min_len() > self.corpus.clip_len {
                return Err(config_err(format!(
                    "metric {kind} needs clips of at least {} samples, clip_len is {}",
                    m.min_len(),
                    self.corpus.clip_len
                )));
            }
        }
        let e = &self.evaluation;
        if !(e.level > 0.0 && e.level < 1.0) || !(e.alpha > 0.0 && e.alpha < 1.0) || e.bootstrap_resamples == 0 {
            return Err(config_err("evaluation level and alpha must lie in (0, 1), resamples ≥ 1"));
        }
        if e.fpr_targets.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(config_err("fpr targets must lie in (0, 1)"));
        }
        let s = &self.sweep;
        if s.t_ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(config_err("sweep t_ratios must lie in (0, 1]"));
        }
        if s.eta_grid.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(config_err("sweep eta_grid values must be > 0"));
        }
        if s.clips_per_split == Some(0) {
            return Err(config_err("sweep clips_per_split must be ≥ 1"));
        }
        Ok(())
    }

    /// Corpus config with the master seed folded in.
    pub fn effective_corpus(&self) -> CorpusConfig {
        CorpusConfig {
            seed: stage_seed(self.master_seed, "corpus", self.corpus.seed),
            ..self.corpus.clone()
        }
    }

    pub fn effective_train(&self) -> TrainConfig {
        TrainConfig {
            seed: stage_seed(self.master_seed, "train", self.train.seed),
            ..self.train.clone()
        }
    }

    pub fn effective_calibration(&self) -> CalibrationConfig {
        CalibrationConfig {
            seed: stage_seed(self.master_seed, "calibration", self.calibration.seed),
            ..self.calibration.clone()
        }
    }

    pub fn init_seed(&self) -> u64 {
        stage_seed(self.master_seed, "init", 0)
    }

    pub fn probe_seed(&self) -> u64 {
        stage_seed(self.master_seed, "probe", 0)
    }
}

/// Parses the right-hand side as a TOML value, falling back to a bare
/// string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<(), PipelineError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key `{key}`")));
    }
    let mut node = root;
    for part in &path[..path.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| config_err(format!("`{key}`: `{part}` is not inside a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| config_err(format!("`{key}` does not address a table field")))?;
    table.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
