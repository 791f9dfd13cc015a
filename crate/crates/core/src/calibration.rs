//! Threshold calibration on development nonmembers.
//!
//! For each dev clip, `L` random unit-ℓ2 Gaussian directions `u` are scaled
//! by `η_ref` and injected at `x_t` with the forward noise fixed per clip;
//! `τ` is the nearest-rank percentile of the resulting degradations
//! `D(R_t(x_t), R_t(x_t + σ_t·η_ref·u))`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{inject, AttackError, ProbeContext};
use crate::autodiff::{norm_l2, Array};
use crate::diffusion::{Clip, Split, TimestepChoice};
use crate::distances::{Metric, MetricKind};
use crate::ledger::ComputeLedger;
use crate::rng::SeedPolicy;
use crate::stats::nearest_rank;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("invalid calibration config: {0}")]
    InvalidConfig(String),
    #[error("empty development set")]
    EmptyDevSet,
    #[error("clip {id} has split {split}, expected dev-nonmember")]
    SplitViolation { id: String, split: &'static str },
    #[error("calibration fingerprint mismatch: calibrated for {calibrated}, attack uses {requested}")]
    FingerprintMismatch { calibrated: String, requested: String },
    #[error(transparent)]
    Attack(#[from] AttackError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub eta_ref: f64,
    /// Directions `L` per clip.
    pub directions: usize,
    pub percentile: f64,
    pub timestep: TimestepChoice,
    pub metric: MetricKind,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            eta_ref: 0.05,
            directions: 8,
            percentile: 95.0,
            timestep: TimestepChoice::default(),
            metric: MetricKind::MrStft,
            seed: 0,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if !(self.eta_ref >= 0.0 && self.eta_ref.is_finite()) {
            return Err(CalibrationError::InvalidConfig("eta_ref must be ≥ 0".into()));
        }
        if self.directions == 0 {
            return Err(CalibrationError::InvalidConfig("directions must be ≥ 1".into()));
        }
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(CalibrationError::InvalidConfig("percentile must be in (0, 100)".into()));
        }
        Ok(())
    }
}

/// What a threshold was calibrated for; attacks must match it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub metric: MetricKind,
    pub t: usize,
    pub schedule: String,
    pub latent: bool,
}

impl std::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "metric={} t={} schedule={} space={}",
            self.metric,
            self.t,
            &self.schedule[..self.schedule.len().min(12)],
            if self.latent { "latent" } else { "waveform" }
        )
    }
}

impl Fingerprint {
    pub fn of(ctx: &ProbeContext, metric: MetricKind, t: usize) -> Self {
        Self {
            metric,
            t,
            schedule: ctx.op.schedule().fingerprint(),
            latent: ctx.codec.is_some(),
        }
    }

    pub fn ensure_matches(&self, requested: &Fingerprint) -> Result<(), CalibrationError> {
        if self != requested {
            return Err(CalibrationError::FingerprintMismatch {
                calibrated: self.to_string(),
                requested: requested.to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub tau: f64,
    pub samples: usize,
    pub directions: usize,
    pub percentile_method: String,
    /// Every degradation value, ascending.
    pub values: Vec<f64>,
    /// `τ > 0`; a zero threshold cannot separate anything.
    pub valid: bool,
    pub fingerprint: Fingerprint,
    pub config: CalibrationConfig,
    pub ledger: ComputeLedger,
}

/// Unit-ℓ2 Gaussian direction `l` for a clip.
fn direction(seeds: &SeedPolicy, clip_id: &str, t: usize, l: usize, dim: usize) -> Vec<f64> {
    let mut rng = seeds.stream(clip_id, t, "calibration-direction", l as u64);
    loop {
        let u = rng.normal_vec(dim);
        let n = norm_l2(&u);
        if n > 0.0 {
            return u.iter().map(|v| v / n).collect();
        }
    }
}

/// Degradations of one dev clip along `L` random directions.
pub fn clip_degradations(
    ctx: &ProbeContext,
    metric: &Metric,
    clip: &Clip,
    t: usize,
    config: &CalibrationConfig,
    ledger: &mut ComputeLedger,
) -> Result<Vec<f64>, CalibrationError> {
    let (_, x_t) = ctx.noised_state(clip, t, 0)?;
    let clean = ctx.reconstruct_value(&x_t, t, ledger)?;
    let dir_seeds = SeedPolicy::new(config.seed);
    let mut out = Vec::with_capacity(config.directions);
    for l in 0..config.directions {
        let u: Vec<f64> = direction(&dir_seeds, &clip.id, t, l, x_t.len())
            .into_iter()
            .map(|v| v * config.eta_ref)
            .collect();
        let state = Array::from_vec(inject(x_t.data(), &u, t, ctx.op.schedule()).map_err(CalibrationError::Attack)?);
        let pert = ctx.reconstruct_value(&state, t, ledger)?;
        out.push(metric.eval(clean.data(), pert.data()).map_err(AttackError::from)?);
        ledger.metric_evals += 1;
    }
    Ok(out)
}

pub fn calibrate_tau(
    dev_set: &[Clip],
    ctx: &ProbeContext,
    metric: &Metric,
    config: &CalibrationConfig,
) -> Result<CalibrationResult, CalibrationError> {
    config.validate()?;
    if metric.kind() != config.metric {
        return Err(CalibrationError::InvalidConfig(format!(
            "metric {} differs from configured {}",
            metric.kind(),
            config.metric
        )));
    }
    if dev_set.is_empty() {
        return Err(CalibrationError::EmptyDevSet);
    }
    if let Some(c) = dev_set.iter().find(|c| c.split != Split::DevNonmember) {
        return Err(CalibrationError::SplitViolation {
            id: c.id.clone(),
            split: c.split.as_str(),
        });
    }
    let t = ctx.op.schedule().resolve(config.timestep).map_err(AttackError::from)?;
    let per_clip: Vec<(Vec<f64>, ComputeLedger)> = dev_set
        .par_iter()
        .map(|clip| {
            let mut ledger = ComputeLedger::default();
            clip_degradations(ctx, metric, clip, t, config, &mut ledger).map(|v| (v, ledger))
        })
        .collect::<Result<_, _>>()?;
    let mut ledger = ComputeLedger::default();
    let mut values = Vec::with_capacity(dev_set.len() * config.directions);
    for (v, l) in per_clip {
        values.extend(v);
        ledger += l;
    }
    ledger.wall_clock_secs = 0.0;
    values.sort_by(f64::total_cmp);
    let tau = nearest_rank(&values, config.percentile / 100.0);
    Ok(CalibrationResult {
        tau,
        samples: dev_set.len(),
        directions: config.directions,
        percentile_method: "nearest-rank".into(),
        values,
        valid: tau > 0.0 && tau.is_finite(),
        fingerprint: Fingerprint::of(ctx, config.metric, t),
        config: config.clone(),
        ledger,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::AnalyticPrior;
    use crate::diffusion::ScheduleConfig;
    use crate::distances::{MetricConfig, StftConfig};
    use crate::reverse::{ReverseConfig, ReverseOperator, Stride};
    use std::sync::Arc;

    #[test]
    fn nearest_rank_p95_of_one_to_hundred() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 0.95), 95.0);
        assert_eq!(nearest_rank(&[4.2], 0.95), 4.2);
    }

    fn setup() -> (ProbeContext, Metric, Vec<Clip>) {
        let n = 32;
        let schedule = Arc::new(ScheduleConfig { steps: 30, ..Default::default() }.build().unwrap());
        let op = ReverseOperator::new(
            schedule,
            Arc::new(AnalyticPrior::new(vec![0.0; n], 0.3)),
            ReverseConfig { stride: Stride::MaxCalls(4), checkpointing: false },
        );
        let ctx = ProbeContext { op, codec: None, seeds: SeedPolicy::new(1) };
        let mc = MetricConfig { stft_resolutions: vec![StftConfig::hann(16)], ..Default::default() };
        let metric = Metric::new(MetricKind::MrStft, &mc).unwrap();
        let clips = (0..5)
            .map(|i| Clip {
                id: format!("dev-{i}"),
                samples: (0..n).map(|k| ((k * (i + 1)) as f64 * 0.3).sin()).collect(),
                sample_rate: 16_000.0,
                split: Split::DevNonmember,
            })
            .collect();
        (ctx, metric, clips)
    }

    #[test]
    fn tau_is_order_invariant_reproducible_and_monotone_in_percentile() {
        let (ctx, metric, clips) = setup();
        let cfg = CalibrationConfig { directions: 3, ..Default::default() };
        let a = calibrate_tau(&clips, &ctx, &metric, &cfg).unwrap();
        let mut rev = clips.clone();
        rev.reverse();
        let b = calibrate_tau(&rev, &ctx, &metric, &cfg).unwrap();
        assert_eq!(a.tau.to_bits(), b.tau.to_bits());
        assert_eq!(a.values, b.values);
        assert!(a.valid && a.values.len() == 15);
        assert_eq!(a.ledger.metric_evals, 15);
        let mut last = 0.0;
        for p in [10.0, 50.0, 90.0, 99.0] {
            let r = calibrate_tau(&clips, &ctx, &metric, &CalibrationConfig { percentile: p, ..cfg.clone() }).unwrap();
            assert!(r.tau >= last);
            last = r.tau;
        }
    }

    #[test]
    fn single_direction_single_clip_and_zero_budget() {
        let (ctx, metric, clips) = setup();
        let cfg = CalibrationConfig { directions: 1, ..Default::default() };
        let r = calibrate_tau(&clips[..1], &ctx, &metric, &cfg).unwrap();
        assert_eq!(r.values, vec![r.tau]);
        let zero = calibrate_tau(&clips, &ctx, &metric, &CalibrationConfig { eta_ref: 0.0, ..cfg }).unwrap();
        assert_eq!(zero.tau, 0.0);
        assert!(!zero.valid);
    }

    #[test]
    fn rejects_empty_and_wrong_split() {
        let (ctx, metric, mut clips) = setup();
        let cfg = CalibrationConfig::default();
        assert!(matches!(calibrate_tau(&[], &ctx, &metric, &cfg), Err(CalibrationError::EmptyDevSet)));
        clips[2].split = Split::Member;
        assert!(matches!(
            calibrate_tau(&clips, &ctx, &metric, &cfg),
            Err(CalibrationError::SplitViolation { .. })
        ));
    }

    #[test]
    fn fingerprint_mismatch_is_reported() {
        let (ctx, _, _) = setup();
        let a = Fingerprint::of(&ctx, MetricKind::MrStft, 18);
        assert!(a.ensure_matches(&a.clone()).is_ok());
        let b = Fingerprint::of(&ctx, MetricKind::MrStft, 12);
        assert!(matches!(a.ensure_matches(&b), Err(CalibrationError::FingerprintMismatch { .. })));
    }
}
