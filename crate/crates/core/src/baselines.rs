//! Loss-aligned and trajectory membership scores, and compute parity.
//!
//! All scores are negated losses or distances so that, like the adversarial
//! cost, higher means "more likely member". Repetitions draw fresh forward
//! noise from the same seed policy as the probe (repetition 0 reuses the
//! probe's `ε`) and are evaluated as one batch per chunk.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{AttackError, ProbeContext};
use crate::autodiff::{Array, Graph};
use crate::diffusion::{Clip, TimestepChoice};
use crate::distances::Metric;
use crate::ledger::ComputeLedger;
use crate::stats::ScoreRecord;

/// Rows per batched predictor call.
const CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("invalid baseline config: {0}")]
    InvalidConfig(String),
    #[error("compute parity unattainable: unit cost {unit} vs target {target} (tolerance ±5%)")]
    Unattainable { unit: f64, target: f64 },
    #[error(transparent)]
    Attack(#[from] AttackError),
}

impl From<crate::autodiff::AutodiffError> for BaselineError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        BaselineError::Attack(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    /// `−‖ε − ε_θ(x_t, t)‖²/n`.
    LossAtT,
    /// `−D(x₀, R_t(x_t))`.
    EndpointReconstruction,
    /// `−‖x_{t−t′} − x′_{t−t′}‖_p`.
    Trajectory,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [
        BaselineKind::LossAtT,
        BaselineKind::EndpointReconstruction,
        BaselineKind::Trajectory,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::LossAtT => "loss-at-t",
            BaselineKind::EndpointReconstruction => "endpoint-reconstruction",
            BaselineKind::Trajectory => "trajectory",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub timestep: TimestepChoice,
    /// Trajectory offset `t′`; `None` means `⌊t/2⌋`.
    pub offset: Option<usize>,
    /// Trajectory norm order `p ≥ 1` (`inf` allowed).
    pub norm_p: f64,
    /// Used when parity matching is off.
    pub repetitions: usize,
    /// Choose repetitions so total model calls match the probe's.
    pub match_compute: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            kind: BaselineKind::LossAtT,
            timestep: TimestepChoice::default(),
            offset: None,
            norm_p: 2.0,
            repetitions: 1,
            match_compute: true,
        }
    }
}

impl BaselineConfig {
    pub fn of(kind: BaselineKind) -> Self {
        Self { kind, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.repetitions == 0 {
            return Err(BaselineError::InvalidConfig("repetitions must be ≥ 1".into()));
        }
        if !(self.norm_p >= 1.0) {
            return Err(BaselineError::InvalidConfig(format!("norm order {} < 1", self.norm_p)));
        }
        Ok(())
    }

    /// Resolved `(t, t′)`.
    pub fn timesteps(&self, ctx: &ProbeContext) -> Result<(usize, usize), BaselineError> {
        let t = ctx.op.schedule().resolve(self.timestep).map_err(AttackError::from)?;
        let offset = self.offset.unwrap_or(t / 2);
        if self.kind == BaselineKind::Trajectory && (offset == 0 || offset >= t) {
            return Err(BaselineError::InvalidConfig(format!(
                "trajectory offset t′={offset} must satisfy 1 ≤ t−t′ < t={t}"
            )));
        }
        Ok((t, offset))
    }
}

fn lp_norm(v: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        v.iter().fold(0.0, |m, x| m.max(x.abs()))
    } else {
        v.iter().map(|x| x.abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

/// `(x₀-state, [B, d] noised batch, [B, d] noise)` for repetitions
/// `start..start+count`.
fn noised_batch(ctx: &ProbeContext, clip: &Clip, t: usize, start: usize, count: usize) -> Result<(Vec<f64>, Array, Vec<Vec<f64>>), BaselineError> {
    let mut rows = Vec::new();
    let mut eps = Vec::with_capacity(count);
    let mut x0 = Vec::new();
    for rep in start..start + count {
        let (s0, xt) = ctx.noised_state(clip, t, rep as u64)?;
        rows.extend_from_slice(xt.data());
        eps.push(ctx.forward_eps(&clip.id, clip.samples.len(), t, rep as u64));
        x0 = s0;
    }
    let d = x0.len();
    Ok((x0, Array::new(vec![count, d], rows)?, eps))
}

fn chunks(reps: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..reps).step_by(CHUNK).map(move |s| (s, CHUNK.min(reps - s)))
}

/// `−mean_r ‖ε_r − ε_θ(x_t^{(r)}, t)‖²/d` over `reps` seed repetitions.
pub fn loss_score(ctx: &ProbeContext, clip: &Clip, t: usize, reps: usize, ledger: &mut ComputeLedger) -> Result<f64, BaselineError> {
    let mut total = 0.0;
    for (start, count) in chunks(reps) {
        let (_, batch, eps) = noised_batch(ctx, clip, t, start, count)?;
        let d = batch.shape()[1];
        let mut g = Graph::new();
        let x = g.leaf(batch)?;
        let pred = ctx
            .op
            .denoiser()
            .predict_eps(&mut g, x, t, ctx.op.schedule())
            .map_err(|e| AttackError::from(crate::reverse::ReverseError::from(e)))?;
        ledger.network_calls += count as u64;
        let p = g.value(pred).data();
        for (r, e) in eps.iter().enumerate() {
            total += p[r * d..(r + 1) * d].iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d as f64;
        }
    }
    Ok(-total / reps as f64)
}

/// `−mean_r D(x₀, R_t(x_t^{(r)}))` with the configured metric.
pub fn endpoint_score(
    ctx: &ProbeContext,
    metric: &Metric,
    clip: &Clip,
    t: usize,
    reps: usize,
    ledger: &mut ComputeLedger,
) -> Result<f64, BaselineError> {
    let mut total = 0.0;
    let n = clip.samples.len();
    for (start, count) in chunks(reps) {
        let (_, batch, _) = noised_batch(ctx, clip, t, start, count)?;
        let recon = ctx.reconstruct_value(&batch, t, ledger)?;
        for r in 0..count {
            total += metric.eval(&clip.samples, &recon.data()[r * n..(r + 1) * n]).map_err(AttackError::from)?;
            ledger.metric_evals += 1;
        }
    }
    Ok(-total / reps as f64)
}

/// `−mean_r ‖x_{t−t′} − x′_{t−t′}‖_p`: the ground truth re-noises `x₀` to
/// `t−t′` with the same `ε` that formed `x_t`; the prediction takes `t′`
/// unit DDIM steps from `x_t`.
#[allow(clippy::too_many_arguments)]
pub fn trajectory_score(
    ctx: &ProbeContext,
    clip: &Clip,
    t: usize,
    offset: usize,
    p: f64,
    reps: usize,
    ledger: &mut ComputeLedger,
) -> Result<f64, BaselineError> {
    if offset == 0 || offset >= t {
        return Err(BaselineError::InvalidConfig(format!("offset {offset} invalid for t={t}")));
    }
    let target_t = t - offset;
    let schedule = ctx.op.schedule();
    let mut total = 0.0;
    for (start, count) in chunks(reps) {
        let (x0, batch, eps) = noised_batch(ctx, clip, t, start, count)?;
        let d = x0.len();
        let mut g = Graph::new();
        let mut cur = g.leaf(batch)?;
        for s in (target_t + 1..=t).rev() {
            cur = ctx.op.ddim_step_to(&mut g, cur, s, Some(s - 1)).map_err(AttackError::from)?;
            ledger.network_calls += count as u64;
        }
        let pred = g.value(cur).data();
        for (r, e) in eps.iter().enumerate() {
            let truth = schedule.forward_noise(&x0, target_t, e).map_err(AttackError::from)?;
            let diff: Vec<f64> = truth.data().iter().zip(&pred[r * d..(r + 1) * d]).map(|(a, b)| a - b).collect();
            total += lp_norm(&diff, p);
        }
    }
    Ok(-total / reps as f64)
}

/// Repetition count whose compute is closest to `target`, required to land
/// within ±5%.
pub fn match_compute(target: f64, unit: f64) -> Result<usize, BaselineError> {
    if !(target > 0.0 && unit > 0.0) {
        return Err(BaselineError::InvalidConfig(format!("target {target} and unit {unit} must be > 0")));
    }
    let reps = (target / unit).round().max(1.0) as usize;
    let achieved = reps as f64 * unit;
    if (achieved - target).abs() / target > 0.05 {
        return Err(BaselineError::Unattainable { unit, target });
    }
    Ok(reps)
}

/// Scores one clip with a baseline at a fixed repetition count.
pub fn run_baseline(
    ctx: &ProbeContext,
    metric: &Metric,
    clip: &Clip,
    config: &BaselineConfig,
    reps: usize,
) -> Result<ScoreRecord, BaselineError> {
    config.validate()?;
    if reps == 0 {
        return Err(BaselineError::InvalidConfig("repetitions must be ≥ 1".into()));
    }
    let (t, offset) = config.timesteps(ctx)?;
    let mut ledger = ComputeLedger::default();
    let score = match config.kind {
        BaselineKind::LossAtT => loss_score(ctx, clip, t, reps, &mut ledger)?,
        BaselineKind::EndpointReconstruction => endpoint_score(ctx, metric, clip, t, reps, &mut ledger)?,
        BaselineKind::Trajectory => trajectory_score(ctx, clip, t, offset, config.norm_p, reps, &mut ledger)?,
    };
    Ok(ScoreRecord {
        sample_id: clip.id.clone(),
        split: clip.split,
        attack: config.kind.as_str().to_string(),
        score,
        repetitions: reps,
        t,
        saturated: false,
        ledger,
        precheck_ledger: ComputeLedger::default(),
        secondary: BTreeMap::new(),
    })
}

/// Model calls of one repetition, measured on a warm-up clip.
pub fn unit_cost(ctx: &ProbeContext, metric: &Metric, warmup: &Clip, config: &BaselineConfig) -> Result<ComputeLedger, BaselineError> {
    Ok(run_baseline(ctx, metric, warmup, config, 1)?.ledger)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{AnalyticPrior, ExactNoise, ZeroNoise};
    use crate::diffusion::{ScheduleConfig, Split};
    use crate::distances::{MetricConfig, MetricKind};
    use crate::reverse::{ReverseConfig, ReverseOperator, SharedDenoiser, Stride};
    use crate::rng::SeedPolicy;
    use std::sync::Arc;

    fn ctx(d: SharedDenoiser) -> ProbeContext {
        let schedule = Arc::new(ScheduleConfig { steps: 40, ..Default::default() }.build().unwrap());
        ProbeContext {
            op: ReverseOperator::new(schedule, d, ReverseConfig { stride: Stride::Fixed(1), checkpointing: false }),
            codec: None,
            seeds: SeedPolicy::new(3),
        }
    }

    fn clip(n: usize) -> Clip {
        Clip {
            id: "m-1".into(),
            samples: (0..n).map(|i| (i as f64 * 0.9).cos() * 0.7).collect(),
            sample_rate: 16_000.0,
            split: Split::Member,
        }
    }

    fn exact(c: &Clip, t: usize) -> ProbeContext {
        let probe = ctx(Arc::new(ZeroNoise { dim: c.samples.len() }));
        let eps = probe.forward_eps(&c.id, c.samples.len(), t, 0);
        ctx(Arc::new(ExactNoise::new(eps)))
    }

    #[test]
    fn exact_noise_is_the_maximal_score_everywhere() {
        let c = clip(16);
        let t = 24;
        let x = exact(&c, t);
        let mc = MetricConfig { stft_resolutions: vec![crate::distances::StftConfig::hann(8)], ..Default::default() };
        let m = Metric::new(MetricKind::MrStft, &mc).unwrap();
        let mut l = ComputeLedger::default();
        assert_eq!(loss_score(&x, &c, t, 1, &mut l).unwrap(), 0.0);
        assert!(endpoint_score(&x, &m, &c, t, 1, &mut l).unwrap().abs() < 1e-9);
        for off in [1, 5, 23] {
            assert!(trajectory_score(&x, &c, t, off, 2.0, 1, &mut l).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn zero_predictor_loss_is_about_minus_one() {
        let c = clip(256);
        let z = ctx(Arc::new(ZeroNoise { dim: 256 }));
        let s = loss_score(&z, &c, 20, 40, &mut ComputeLedger::default()).unwrap();
        // Mean of 40·256 squared standard normals, se ≈ 0.009.
        assert!((s + 1.0).abs() < 0.05, "{s}");
    }

    #[test]
    fn repetitions_average_single_seed_scores() {
        let c = clip(16);
        let p = ctx(Arc::new(AnalyticPrior::new(vec![0.0; 16], 0.5)));
        let mut l = ComputeLedger::default();
        let two = loss_score(&p, &c, 30, 2, &mut l).unwrap();
        let a = loss_score(&p, &c, 30, 1, &mut l).unwrap();
        // Repetition 1 alone: drop repetition 0 from a 2-rep run.
        let b = 2.0 * two - a;
        let (_, xt, eps) = noised_batch(&p, &c, 30, 1, 1).unwrap();
        let pred = AnalyticPrior::new(vec![0.0; 16], 0.5).eps(xt.data(), 30, p.op.schedule()).unwrap();
        let direct = -pred.iter().zip(&eps[0]).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / 16.0;
        assert!((b - direct).abs() < 1e-12);
        assert_eq!(l.network_calls, 3);
    }

    /// Zero-mean Gaussian prior: each unit step is `x ↦ c_s·x`.
    #[test]
    fn trajectory_matches_scalar_recursion() {
        let c = Clip { samples: vec![0.6], ..clip(1) };
        let var = 0.4;
        let p = ctx(Arc::new(AnalyticPrior::new(vec![0.0], var)));
        let s = p.op.schedule();
        let (t, off) = (30, 12);
        let eps = p.forward_eps(&c.id, 1, t, 0)[0];
        let mut x = s.forward_noise(&[0.6], t, &[eps]).unwrap().data()[0];
        for step in (t - off + 1..=t).rev() {
            let a = s.alpha_bar(step).unwrap();
            let ap = s.alpha_bar(step - 1).unwrap();
            let k = a.sqrt() * var / (a * var + 1.0 - a);
            let e = x * (1.0 - a.sqrt() * k) / (1.0 - a).sqrt();
            let x0 = (x - (1.0 - a).sqrt() * e) / a.sqrt();
            x = ap.sqrt() * x0 + (1.0 - ap).sqrt() * e;
        }
        let truth = s.forward_noise(&[0.6], t - off, &[eps]).unwrap().data()[0];
        let got = trajectory_score(&p, &c, t, off, 2.0, 1, &mut ComputeLedger::default()).unwrap();
        assert!((got + (truth - x).abs()).abs() < 1e-9);
    }

    #[test]
    fn offset_guards() {
        let c = clip(8);
        let p = ctx(Arc::new(ZeroNoise { dim: 8 }));
        let mut l = ComputeLedger::default();
        assert!(trajectory_score(&p, &c, 10, 0, 2.0, 1, &mut l).is_err());
        assert!(trajectory_score(&p, &c, 10, 10, 2.0, 1, &mut l).is_err());
        let cfg = BaselineConfig { kind: BaselineKind::Trajectory, timestep: TimestepChoice::T(1), ..Default::default() };
        assert!(cfg.timesteps(&p).is_err());
    }

    #[test]
    fn match_compute_examples() {
        assert_eq!(match_compute(140.0, 2.0).unwrap(), 70);
        assert_eq!(match_compute(140.0, 3.0).unwrap(), 47);
        assert!(matches!(match_compute(140.0, 200.0), Err(BaselineError::Unattainable { .. })));
        for (target, unit) in [(1000.0, 7.0), (5000.0, 25.0), (147.0, 140.0)] {
            let r = match_compute(target, unit).unwrap();
            assert!((r as f64 * unit - target).abs() / target <= 0.05);
        }
    }

    #[test]
    fn records_carry_counts() {
        let c = clip(16);
        let p = ctx(Arc::new(ZeroNoise { dim: 16 }));
        let m = Metric::new(MetricKind::WaveformMse, &MetricConfig::default()).unwrap();
        let cfg = BaselineConfig { kind: BaselineKind::Trajectory, timestep: TimestepChoice::T(20), ..Default::default() };
        let r = run_baseline(&p, &m, &c, &cfg, 3).unwrap();
        assert_eq!(r.attack, "trajectory");
        assert_eq!(r.ledger.network_calls, 30);
        assert_eq!(unit_cost(&p, &m, &c, &cfg).unwrap().network_calls, 10);
        let e = run_baseline(&p, &m, &c, &BaselineConfig { kind: BaselineKind::EndpointReconstruction, timestep: TimestepChoice::T(20), ..Default::default() }, 70).unwrap();
        assert_eq!(e.ledger.reverse_passes, 70);
        assert_eq!(e.ledger.metric_evals, 70);
    }
}
