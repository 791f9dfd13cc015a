//! The adversarial stability probe.
//!
//! For a clip `x₀` and timestep `t`, the forward noise is fixed by the seed
//! policy, giving `x_t`. A perturbation `δ̃` is injected as `x_t + σ_t·δ̃`,
//! both latents are mapped back through `R_t`, and PGD searches the `ℓ_p`
//! ball of radius `η` for the largest degradation `D*(η)`. Bisection on `η`
//! then finds the smallest budget whose `D*` reaches the calibrated `τ`:
//! the adversarial cost, used directly as the membership score.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{norm_l2, Array, AutodiffError, Graph, NodeId};
use crate::diffusion::{Clip, NoiseSchedule, ScheduleError, TimestepChoice};
use crate::distances::{Metric, MetricError, MetricKind};
use crate::ledger::ComputeLedger;
use crate::reverse::{LatentCodec, ReverseError, ReverseOperator};
use crate::rng::{mix64, GaussianStream, SeedPolicy};
use crate::stats::ScoreRecord;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("no calibrated threshold τ; run calibration first")]
    MissingCalibration,
    #[error("non-finite degradation at η={eta}")]
    NonFinite { eta: f64 },
    #[error("every PGD restart hit a non-finite gradient at η={eta}")]
    AllRestartsAborted { eta: f64 },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Reverse(#[from] ReverseError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl AttackError {
    /// Numerical failures, as opposed to configuration or usage errors.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            AttackError::NonFinite { .. }
                | AttackError::AllRestartsAborted { .. }
                | AttackError::Reverse(ReverseError::NonFinite { .. } | ReverseError::DivisionGuard { .. })
                | AttackError::Autodiff(AutodiffError::NonFinite { .. })
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Norm {
    L2,
    Linf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub norm: Norm,
    pub eta_max: f64,
    /// PGD steps `K` per restart.
    pub steps: usize,
    pub restarts: usize,
    /// `β` in the step size `α = β·η/K`.
    pub step_scale: f64,
    pub momentum: f64,
    pub bisection_steps: usize,
    pub early_stop: bool,
    pub early_stop_rel: f64,
    pub early_stop_patience: usize,
    pub grad_floor: f64,
    /// Seed repetitions `S` averaged into one score.
    pub repetitions: usize,
    pub timestep: TimestepChoice,
    pub metric: MetricKind,
    /// Set from the calibration artifact.
    pub tau: Option<f64>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            norm: Norm::L2,
            eta_max: 0.8,
            steps: 12,
            restarts: 2,
            step_scale: 0.25,
            momentum: 0.9,
            bisection_steps: 10,
            early_stop: true,
            early_stop_rel: 0.01,
            early_stop_patience: 3,
            grad_floor: 1e-6,
            repetitions: 1,
            timestep: TimestepChoice::default(),
            metric: MetricKind::MrStft,
            tau: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: &str| Err(AttackError::InvalidConfig(m.to_string()));
        if !(self.eta_max > 0.0 && self.eta_max.is_finite()) {
            return bad("eta_max must be > 0");
        }
        if self.steps == 0 || self.restarts == 0 || self.bisection_steps == 0 || self.repetitions == 0 {
            return bad("steps, restarts, bisection_steps and repetitions must be ≥ 1");
        }
        if !(self.step_scale > 0.0 && self.step_scale <= 1.0) {
            return bad("step_scale must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.early_stop && (self.early_stop_patience == 0 || !(self.early_stop_rel >= 0.0)) {
            return bad("early stop needs patience ≥ 1 and a nonnegative threshold");
        }
        if let Some(tau) = self.tau {
            if !(tau > 0.0 && tau.is_finite()) {
                return bad("tau must be > 0");
            }
        }
        Ok(())
    }

    /// `α = β·η/K`.
    pub fn step_size(&self, eta: f64) -> f64 {
        self.step_scale * eta / self.steps as f64
    }

    fn tau(&self) -> Result<f64, AttackError> {
        self.validate()?;
        self.tau.ok_or(AttackError::MissingCalibration)
    }
}

/// `x_t + σ_t·δ̃`.
pub fn inject(x_t: &[f64], delta: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>, AttackError> {
    if x_t.len() != delta.len() {
        return Err(AttackError::ShapeMismatch {
            expected: x_t.len(),
            got: delta.len(),
        });
    }
    let sigma = schedule.sigma(t)?;
    Ok(x_t.iter().zip(delta).map(|(x, d)| x + sigma * d).collect())
}

/// Euclidean projection onto the `ℓ_p` ball of radius `eta`.
pub fn project(z: &[f64], norm: Norm, eta: f64) -> Vec<f64> {
    match norm {
        Norm::L2 => {
            let n = norm_l2(z);
            let s = eta / eta.max(n);
            z.iter().map(|v| v * s).collect()
        }
        Norm::Linf => z.iter().map(|v| v.clamp(-eta, eta)).collect(),
    }
}

pub fn norm_of(z: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::L2 => norm_l2(z),
        Norm::Linf => crate::autodiff::norm_linf(z),
    }
}

/// A degradation `D(δ̃)` PGD can ascend.
pub trait Objective {
    fn dim(&self) -> usize;
    /// Called at the start of every bisection level.
    fn begin_level(&mut self, _ledger: &mut ComputeLedger) -> Result<(), AttackError> {
        Ok(())
    }
    fn value(&self, delta: &[f64], ledger: &mut ComputeLedger) -> Result<f64, AttackError>;
    fn value_and_grad(&self, delta: &[f64], ledger: &mut ComputeLedger) -> Result<(f64, Vec<f64>), AttackError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    MaxSteps,
    EarlyStopImprovement,
    GradientFloor,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub best: f64,
    pub evaluations: usize,
    pub termination: Termination,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PgdResult {
    pub best_degradation: f64,
    pub best_delta: Vec<f64>,
    /// Degradation at every evaluated iterate, restarts concatenated.
    pub trace: Vec<f64>,
    /// Termination of the restart that produced the best value.
    pub termination: Termination,
    pub restarts: Vec<RestartSummary>,
}

/// Maximizes `D(δ̃)` over `‖δ̃‖_p ≤ η` with momentum PGD and random restarts.
///
/// Each restart starts from a Gaussian draw projected onto the ball, takes
/// up to `K` steps of size `βη/K` along the normalized gradient (ℓ2) or its
/// sign (ℓ∞), and evaluates the final iterate when no early stop fired. A
/// restart whose gradient turns non-finite is dropped.
pub fn pgd_max_degradation(
    objective: &dyn Objective,
    eta: f64,
    config: &AttackConfig,
    init_seed: u64,
    ledger: &mut ComputeLedger,
) -> Result<PgdResult, AttackError> {
    config.validate()?;
    if !(eta > 0.0) || eta > config.eta_max * (1.0 + 1e-12) {
        return Err(AttackError::InvalidConfig(format!("η={eta} outside (0, η_max]")));
    }
    let n = objective.dim();
    let alpha = config.step_size(eta);
    let mut result: Option<PgdResult> = None;
    let mut trace = Vec::new();
    let mut summaries = Vec::with_capacity(config.restarts);

    for restart in 0..config.restarts {
        let mut rng = GaussianStream::new(mix64(init_seed ^ mix64(restart as u64 + 1)));
        let mut delta = project(&rng.normal_vec(n), config.norm, eta);
        let mut momentum = vec![0.0; n];
        let mut best = f64::NEG_INFINITY;
        let mut best_delta = delta.clone();
        let mut stall = 0;
        let mut evaluations = 0;
        let mut termination = Termination::MaxSteps;

        let mut record = |d: f64, delta: &[f64], best: &mut f64, best_delta: &mut Vec<f64>| {
            trace.push(d);
            if d > *best {
                *best = d;
                best_delta.copy_from_slice(delta);
            }
        };

        for _ in 0..config.steps {
            let (d, grad) = match objective.value_and_grad(&delta, ledger) {
                Ok(v) => v,
                Err(e) if e.is_numerical() => {
                    termination = Termination::Aborted;
                    break;
                }
                Err(e) => return Err(e),
            };
            evaluations += 1;
            if !d.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                termination = Termination::Aborted;
                break;
            }
            let prev_best = best;
            record(d, &delta, &mut best, &mut best_delta);
            if config.early_stop && prev_best.is_finite() {
                let rel = (best - prev_best) / prev_best.abs().max(1e-300);
                stall = if rel < config.early_stop_rel { stall + 1 } else { 0 };
                if stall >= config.early_stop_patience {
                    termination = Termination::EarlyStopImprovement;
                    break;
                }
            }
            let gnorm = norm_l2(&grad);
            if gnorm < config.grad_floor {
                termination = Termination::GradientFloor;
                break;
            }
            for (m, g) in momentum.iter_mut().zip(&grad) {
                *m = config.momentum * *m + g / gnorm;
            }
            let step: Vec<f64> = match config.norm {
                Norm::L2 => {
                    let mn = norm_l2(&momentum).max(1e-12);
                    momentum.iter().map(|m| m / mn).collect()
                }
                Norm::Linf => momentum.iter().map(|m| m.signum() * (*m != 0.0) as u8 as f64).collect(),
            };
            let moved: Vec<f64> = delta.iter().zip(&step).map(|(d, s)| d + alpha * s).collect();
            delta = project(&moved, config.norm, eta);
        }
        if termination == Termination::MaxSteps {
            match objective.value(&delta, ledger) {
                Ok(d) if d.is_finite() => {
                    evaluations += 1;
                    record(d, &delta, &mut best, &mut best_delta);
                }
                Ok(_) => termination = Termination::Aborted,
                Err(e) if e.is_numerical() => termination = Termination::Aborted,
                Err(e) => return Err(e),
            }
        }
        summaries.push(RestartSummary {
            best,
            evaluations,
            termination,
        });
        if best.is_finite() && result.as_ref().is_none_or(|r| best > r.best_degradation) {
            result = Some(PgdResult {
                best_degradation: best,
                best_delta,
                trace: Vec::new(),
                termination,
                restarts: Vec::new(),
            });
        }
    }
    let mut result = result.ok_or(AttackError::AllRestartsAborted { eta })?;
    result.trace = trace;
    result.restarts = summaries;
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub eta: f64,
    pub degradation: f64,
    pub crossed: bool,
    pub termination: Termination,
}

/// Outcome of the outer search for one seed repetition.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvCostResult {
    pub c_adv: f64,
    pub lower: f64,
    pub upper: f64,
    /// `D*(η_max) < τ`: the score is pinned at `η_max`.
    pub saturated_low: bool,
    pub precheck: LevelSummary,
    pub levels: Vec<LevelSummary>,
    /// Perturbation achieving the crossing at `upper` (or the pre-check).
    pub best_delta: Vec<f64>,
    /// Bisection compute, `(K+2)·B` reverse passes at `r = 1` without early
    /// stopping.
    pub ledger: ComputeLedger,
    /// The pre-check at `η_max`, kept apart from the bisection counts.
    pub precheck_ledger: ComputeLedger,
}

/// Bisection over `[0, η_max]`: after each midpoint evaluation `u ← η` if
/// `D*(η) ≥ τ`, else `l ← η`.
///
/// `probe(η, level)` returns `D*(η)` and the maximizer. Returns `(l, u)` and
/// per-level summaries plus the maximizer at the final `u`.
pub fn bisect_budget<F>(
    eta_max: f64,
    steps: usize,
    tau: f64,
    mut probe: F,
) -> Result<(f64, f64, Vec<LevelSummary>, Option<Vec<f64>>), AttackError>
where
    F: FnMut(f64, usize) -> Result<(f64, Termination, Vec<f64>), AttackError>,
{
    let (mut l, mut u) = (0.0, eta_max);
    let mut levels = Vec::with_capacity(steps);
    let mut at_u = None;
    for level in 0..steps {
        let eta = 0.5 * (l + u);
        let (d, termination, delta) = probe(eta, level)?;
        if !d.is_finite() {
            return Err(AttackError::NonFinite { eta });
        }
        let crossed = d >= tau;
        if crossed {
            u = eta;
            at_u = Some(delta);
        } else {
            l = eta;
        }
        levels.push(LevelSummary {
            eta,
            degradation: d,
            crossed,
            termination,
        });
    }
    Ok((l, u, levels, at_u))
}

/// Smallest budget whose maximal degradation reaches `τ`, by pre-check at
/// `η_max` followed by bisection.
pub fn adversarial_cost(
    objective: &mut dyn Objective,
    config: &AttackConfig,
    seed: u64,
) -> Result<AdvCostResult, AttackError> {
    let tau = config.tau()?;
    let level_seed = |level: u64| mix64(seed ^ mix64(level.wrapping_add(0x5eed_0000)));

    let mut precheck_ledger = ComputeLedger::default();
    let started = Instant::now();
    objective.begin_level(&mut precheck_ledger)?;
    let pre = pgd_max_degradation(&*objective, config.eta_max, config, level_seed(u64::MAX), &mut precheck_ledger)?;
    precheck_ledger.wall_clock_secs = started.elapsed().as_secs_f64();
    let precheck = LevelSummary {
        eta: config.eta_max,
        degradation: pre.best_degradation,
        crossed: pre.best_degradation >= tau,
        termination: pre.termination,
    };
    if !precheck.crossed {
        return Ok(AdvCostResult {
            c_adv: config.eta_max,
            lower: config.eta_max,
            upper: config.eta_max,
            saturated_low: true,
            precheck,
            levels: Vec::new(),
            best_delta: pre.best_delta,
            ledger: ComputeLedger::default(),
            precheck_ledger,
        });
    }

    let mut ledger = ComputeLedger::default();
    let started = Instant::now();
    let (lower, upper, levels, at_u) = bisect_budget(config.eta_max, config.bisection_steps, tau, |eta, level| {
        objective.begin_level(&mut ledger)?;
        let r = pgd_max_degradation(&*objective, eta, config, level_seed(level as u64), &mut ledger)?;
        Ok((r.best_degradation, r.termination, r.best_delta))
    })?;
    ledger.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(AdvCostResult {
        c_adv: upper,
        lower,
        upper,
        saturated_low: false,
        precheck,
        levels,
        best_delta: at_u.unwrap_or(pre.best_delta),
        ledger,
        precheck_ledger,
    })
}

/// Diffusion-side machinery shared by the probe, calibration and baselines:
/// the reverse operator, the optional latent codec and the seed policy.
#[derive(Clone)]
pub struct ProbeContext {
    pub op: ReverseOperator,
    pub codec: Option<Arc<LatentCodec>>,
    pub seeds: SeedPolicy,
}

/// Seed purpose tags.
pub const FORWARD_EPS: &str = "forward-eps";
const PGD_INIT: &str = "pgd-init";

impl ProbeContext {
    /// Dimension of the space diffusion runs in.
    pub fn state_dim(&self, clip_len: usize) -> usize {
        self.codec.as_ref().map_or(clip_len, |c| c.latent_dim())
    }

    /// Forward noise `ε` for `(clip, t, repetition)`.
    pub fn forward_eps(&self, clip_id: &str, clip_len: usize, t: usize, rep: u64) -> Vec<f64> {
        self.seeds.stream(clip_id, t, FORWARD_EPS, rep).normal_vec(self.state_dim(clip_len))
    }

    /// Clean state `x₀` (or `Enc(x₀)`) and its noised version `x_t`.
    pub fn noised_state(&self, clip: &Clip, t: usize, rep: u64) -> Result<(Vec<f64>, Array), AttackError> {
        if self.op.denoiser().dim() != self.state_dim(clip.samples.len()) {
            return Err(AttackError::ShapeMismatch {
                expected: self.op.denoiser().dim(),
                got: self.state_dim(clip.samples.len()),
            });
        }
        let x0 = match &self.codec {
            Some(c) => c.encode_value(&clip.samples)?,
            None => clip.samples.clone(),
        };
        let eps = self.forward_eps(&clip.id, clip.samples.len(), t, rep);
        let xt = self.op.schedule().forward_noise(&x0, t, &eps)?;
        Ok((x0, xt))
    }

    /// Appends `Dec(R_t(state))` (or `R_t(state)`) to the graph.
    pub fn reconstruct(
        &self,
        g: &mut Graph,
        state: NodeId,
        t: usize,
        ledger: &mut ComputeLedger,
    ) -> Result<NodeId, AttackError> {
        let r = self.op.reverse_from(g, state, t, ledger)?;
        Ok(match &self.codec {
            Some(c) => c.decode(g, r, ledger)?,
            None => r,
        })
    }

    /// Numeric waveform reconstruction.
    pub fn reconstruct_value(&self, state: &Array, t: usize, ledger: &mut ComputeLedger) -> Result<Array, AttackError> {
        let mut g = Graph::new();
        let s = g.leaf(state.clone())?;
        let out = self.reconstruct(&mut g, s, t, ledger)?;
        Ok(g.value(out).clone())
    }

    /// `D(R(x_t), R(x_t + σ_t·δ̃))` for one clip, as a PGD objective.
    pub fn objective<'a>(&'a self, metric: &'a Metric, clip: &Clip, t: usize, rep: u64) -> Result<ProbeObjective<'a>, AttackError> {
        let (_, x_t) = self.noised_state(clip, t, rep)?;
        if metric.min_len() > clip.samples.len() {
            return Err(AttackError::InvalidConfig(format!(
                "metric {} needs clips of at least {} samples",
                metric.kind(),
                metric.min_len()
            )));
        }
        Ok(ProbeObjective {
            ctx: self,
            metric,
            sigma: self.op.schedule().sigma(t)?,
            t,
            x_t,
            clean: None,
        })
    }
}

/// The probe objective for one `(clip, t, repetition)`.
pub struct ProbeObjective<'a> {
    ctx: &'a ProbeContext,
    metric: &'a Metric,
    sigma: f64,
    t: usize,
    x_t: Array,
    clean: Option<Array>,
}

impl ProbeObjective<'_> {
    pub fn x_t(&self) -> &Array {
        &self.x_t
    }

    pub fn clean(&self) -> Option<&Array> {
        self.clean.as_ref()
    }

    /// Perturbed reconstruction `R(x_t + σ_t·δ̃)` as a numeric array.
    pub fn perturbed(&self, delta: &[f64], ledger: &mut ComputeLedger) -> Result<Array, AttackError> {
        let state = Array::from_vec(inject(self.x_t.data(), delta, self.t, self.ctx.op.schedule())?);
        self.ctx.reconstruct_value(&state, self.t, ledger)
    }

    /// The graph of `D(clean, R(x_t + σ_t·δ̃))` with the `δ̃` leaf and the
    /// distance node.
    pub fn build(&self, delta: &[f64], ledger: &mut ComputeLedger) -> Result<(Graph, NodeId, NodeId), AttackError> {
        let clean = self.clean.as_ref().expect("begin_level computes the clean reconstruction");
        if delta.len() != self.x_t.len() {
            return Err(AttackError::ShapeMismatch {
                expected: self.x_t.len(),
                got: delta.len(),
            });
        }
        let mut g = Graph::new();
        let d = g.leaf(Array::from_vec(delta.to_vec()))?;
        let xt = g.leaf(self.x_t.clone())?;
        let sd = g.scale(d, self.sigma)?;
        let state = g.add(xt, sd)?;
        let out = self.ctx.reconstruct(&mut g, state, self.t, ledger)?;
        let c = g.leaf(clean.clone())?;
        let dist = self.metric.distance(&mut g, c, out)?;
        ledger.metric_evals += 1;
        Ok((g, d, dist))
    }
}

impl Objective for ProbeObjective<'_> {
    fn dim(&self) -> usize {
        self.x_t.len()
    }

    fn begin_level(&mut self, ledger: &mut ComputeLedger) -> Result<(), AttackError> {
        self.clean = Some(self.ctx.reconstruct_value(&self.x_t, self.t, ledger)?);
        Ok(())
    }

    fn value(&self, delta: &[f64], ledger: &mut ComputeLedger) -> Result<f64, AttackError> {
        let (g, _, dist) = self.build(delta, ledger)?;
        Ok(g.value(dist).item())
    }

    fn value_and_grad(&self, delta: &[f64], ledger: &mut ComputeLedger) -> Result<(f64, Vec<f64>), AttackError> {
        let (g, d, dist) = self.build(delta, ledger)?;
        let grads = g.backward(dist, &[d])?;
        *ledger += self.ctx.op.backward_cost(self.t)?;
        Ok((g.value(dist).item(), grads.get(d).expect("delta grad").to_vec()))
    }
}

/// Everything needed to score clips with the probe.
#[derive(Clone)]
pub struct Prober {
    pub ctx: ProbeContext,
    pub metric: Metric,
    /// Metrics logged at the returned budget, the primary included.
    pub secondary: Vec<Metric>,
    pub config: AttackConfig,
}

pub const ATTACK_NAME: &str = "lsa-probe";

impl Prober {
    pub fn timestep(&self) -> Result<usize, AttackError> {
        Ok(self.ctx.op.schedule().resolve(self.config.timestep)?)
    }

    /// One repetition of the adversarial cost for `clip`.
    pub fn cost(&self, clip: &Clip, rep: u64) -> Result<(AdvCostResult, BTreeMap<String, f64>), AttackError> {
        let t = self.timestep()?;
        let mut obj = self.ctx.objective(&self.metric, clip, t, rep)?;
        let seed = self.ctx.seeds.derive(&clip.id, t, PGD_INIT, rep);
        let result = adversarial_cost(&mut obj, &self.config, seed)?;
        // Secondary degradations at the returned budget; not charged to the
        // attack ledger.
        let mut scratch = ComputeLedger::default();
        let clean = obj.clean().cloned().map_or_else(|| self.ctx.reconstruct_value(obj.x_t(), t, &mut scratch), Ok)?;
        let pert = obj.perturbed(&result.best_delta, &mut scratch)?;
        let mut secondary = BTreeMap::new();
        for m in &self.secondary {
            secondary.insert(m.kind().as_str().to_string(), m.eval(clean.data(), pert.data())?);
        }
        Ok((result, secondary))
    }

    /// Averages `C_adv` over `S` seed repetitions into a score record.
    pub fn score_sample(&self, clip: &Clip) -> Result<ScoreRecord, AttackError> {
        let t = self.timestep()?;
        let s = self.config.repetitions;
        let mut total = 0.0;
        let mut ledger = ComputeLedger::default();
        let mut precheck = ComputeLedger::default();
        let mut saturated = 0;
        let mut secondary: BTreeMap<String, f64> = BTreeMap::new();
        for rep in 0..s as u64 {
            let (r, sec) = self.cost(clip, rep)?;
            total += r.c_adv;
            ledger += r.ledger;
            precheck += r.precheck_ledger;
            saturated += r.saturated_low as usize;
            for (k, v) in sec {
                *secondary.entry(k).or_default() += v / s as f64;
            }
        }
        Ok(ScoreRecord {
            sample_id: clip.id.clone(),
            split: clip.split,
            attack: ATTACK_NAME.to_string(),
            score: total / s as f64,
            repetitions: s,
            t,
            saturated: saturated > 0,
            ledger,
            precheck_ledger: precheck,
            secondary,
        })
    }
}
