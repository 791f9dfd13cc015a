//! Noise schedules and the DDPM forward process
//! `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Array;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule parameters: {0}")]
    InvalidParameters(String),
    #[error("timestep {t} outside [1, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("timestep ratio {0} outside (0, 1]")]
    RatioOutOfRange(f64),
    #[error("shape mismatch: clip has {expected} samples, noise has {got}")]
    ShapeMismatch { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
    /// Built directly from a supplied ᾱ or β sequence.
    Custom,
}

/// Schedule parameters as they appear in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule, ScheduleError> {
        NoiseSchedule::build(self.kind, self.steps, self.beta_min, self.beta_max)
    }
}

/// Discrete cumulative schedule `ᾱ_1 … ᾱ_T`, indexed from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

impl NoiseSchedule {
    /// `linear`: β linearly spaced in `[beta_min, beta_max]`, ᾱ_t = Π(1−β_s).
    /// `cosine`: the squared-cosine ᾱ profile with offset 0.008; β is
    /// clipped at 0.999 and the β range is only validated.
    pub fn build(
        kind: ScheduleKind,
        steps: usize,
        beta_min: f64,
        beta_max: f64,
    ) -> Result<Self, ScheduleError> {
        if steps < 2 {
            return Err(ScheduleError::InvalidParameters(format!("T = {steps} < 2")));
        }
        if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
            return Err(ScheduleError::InvalidParameters(format!(
                "need 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
                .collect(),
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    ((t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                        * std::f64::consts::FRAC_PI_2)
                        .cos()
                        .powi(2)
                };
                (1..=steps)
                    .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(COSINE_MAX_BETA))
                    .collect()
            }
            ScheduleKind::Custom => {
                return Err(ScheduleError::InvalidParameters(
                    "custom schedules are built from explicit sequences".into(),
                ))
            }
        };
        let mut schedule = Self::from_betas(&betas)?;
        schedule.kind = kind;
        for w in schedule.alpha_bar.windows(2) {
            if w[1] >= w[0] {
                return Err(ScheduleError::InvalidParameters(
                    "alpha_bar not strictly decreasing".into(),
                ));
            }
        }
        Ok(schedule)
    }

    /// ᾱ_t = Π_{s≤t}(1 − β_s) for an explicit β sequence.
    pub fn from_betas(betas: &[f64]) -> Result<Self, ScheduleError> {
        if betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(ScheduleError::InvalidParameters("betas must lie in [0, 1)".into()));
        }
        let alpha_bar = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Self::from_alpha_bar(alpha_bar)
    }

    /// Explicit ᾱ sequence: values in (0, 1], nonincreasing.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self, ScheduleError> {
        if alpha_bar.is_empty() {
            return Err(ScheduleError::InvalidParameters("empty schedule".into()));
        }
        if alpha_bar.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(ScheduleError::InvalidParameters("alpha_bar must lie in (0, 1]".into()));
        }
        if alpha_bar.windows(2).any(|w| w[1] > w[0]) {
            return Err(ScheduleError::InvalidParameters("alpha_bar must be nonincreasing".into()));
        }
        Ok(Self {
            kind: ScheduleKind::Custom,
            alpha_bar,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// SHA-256 over the little-endian `ᾱ` table, hex encoded.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for a in &self.alpha_bar {
            h.update(a.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn check(&self, t: usize) -> Result<(), ScheduleError> {
        if t == 0 || t > self.steps() {
            Err(ScheduleError::TimestepOutOfRange {
                t,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, ScheduleError> {
        self.check(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    /// `σ_t = √(1 − ᾱ_t)`.
    pub fn sigma(&self, t: usize) -> Result<f64, ScheduleError> {
        Ok((1.0 - self.alpha_bar(t)?).sqrt())
    }

    /// `t = ⌊t_ratio·(T−1)⌋ + 1`.
    pub fn ratio_to_timestep(&self, t_ratio: f64) -> Result<usize, ScheduleError> {
        if !(t_ratio > 0.0 && t_ratio <= 1.0) {
            return Err(ScheduleError::RatioOutOfRange(t_ratio));
        }
        let t = (t_ratio * (self.steps() - 1) as f64).floor() as usize + 1;
        Ok(t.min(self.steps()))
    }

    pub fn resolve(&self, choice: TimestepChoice) -> Result<usize, ScheduleError> {
        match choice {
            TimestepChoice::T(t) => {
                self.check(t)?;
                Ok(t)
            }
            TimestepChoice::TRatio(r) => self.ratio_to_timestep(r),
        }
    }

    /// `√ᾱ_t·x₀ + σ_t·ε`.
    pub fn forward_noise(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Array, ScheduleError> {
        if x0.len() != eps.len() {
            return Err(ScheduleError::ShapeMismatch {
                expected: x0.len(),
                got: eps.len(),
            });
        }
        let a = self.alpha_bar(t)?;
        let (signal, noise) = (a.sqrt(), (1.0 - a).sqrt());
        Ok(Array::from_vec(
            x0.iter().zip(eps).map(|(x, e)| signal * x + noise * e).collect(),
        ))
    }
}

/// A timestep given directly or as a ratio of the schedule length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestepChoice {
    T(usize),
    TRatio(f64),
}

impl Default for TimestepChoice {
    fn default() -> Self {
        TimestepChoice::TRatio(0.6)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Member,
    DevNonmember,
    EvalNonmember,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Member => "member",
            Split::DevNonmember => "dev-nonmember",
            Split::EvalNonmember => "eval-nonmember",
        }
    }
}

/// A fixed-length waveform with identity and split label.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    pub samples: Vec<f64>,
    pub sample_rate: f64,
    pub split: Split,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_beta_hand_product() {
        let s = NoiseSchedule::from_betas(&[0.1; 4]).unwrap();
        let want = [0.9, 0.81, 0.729, 0.6561];
        for (a, w) in s.alpha_bars().iter().zip(want) {
            assert!((a - w).abs() < 1e-15);
        }
    }

    #[test]
    fn default_linear_schedule_decays_below_1e4() {
        let s = ScheduleConfig::default().build().unwrap();
        // Product oracle in log space, independent of the scan.
        let log_prod: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        assert!((s.alpha_bar(1000).unwrap() - log_prod.exp()).abs() < 1e-12);
        assert!(s.alpha_bar(1000).unwrap() < 1e-4);
    }

    #[test]
    fn both_kinds_strictly_decrease() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            let s = NoiseSchedule::build(kind, 100, 1e-4, 0.02).unwrap();
            assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            assert!(s.alpha_bar(100).unwrap() > 0.0 && s.alpha_bar(1).unwrap() < 1.0);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 1, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 10, 0.02, 1e-4).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn sigma_values() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.75, 0.36]).unwrap();
        assert_eq!(s.sigma(1).unwrap(), 0.0);
        assert!((s.sigma(2).unwrap() - 0.5).abs() < 1e-15);
        assert!((s.sigma(3).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(s.sigma(4), Err(ScheduleError::TimestepOutOfRange { .. })));
        assert!(s.sigma(0).is_err());
    }

    #[test]
    fn ratio_mapping() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.ratio_to_timestep(0.6).unwrap(), 600);
        assert_eq!(s.ratio_to_timestep(1.0).unwrap(), 1000);
        assert_eq!(s.ratio_to_timestep(0.001).unwrap(), 1);
        assert!(s.ratio_to_timestep(0.0).is_err());
        assert!(s.ratio_to_timestep(1.5).is_err());
    }

    #[test]
    fn forward_noise_arithmetic() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.36]).unwrap();
        let xt = s.forward_noise(&[1.0], 2, &[0.5]).unwrap();
        assert!((xt.data()[0] - 1.0).abs() < 1e-15);
        let xt = s.forward_noise(&[2.0], 2, &[0.0]).unwrap();
        assert!((xt.data()[0] - 1.2).abs() < 1e-15);
        let xt = s.forward_noise(&[2.0], 1, &[3.0]).unwrap();
        assert_eq!(xt.data(), &[2.0]);
        assert!(s.forward_noise(&[1.0, 2.0], 2, &[0.5]).is_err());
    }
}
