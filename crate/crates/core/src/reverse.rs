//! Deterministic DDIM reverse operator.
//!
//! `x̂₀(x_t, t) = (x_t − σ_t·ε̂)/√ᾱ_t` and, for σ = 0,
//! `x_{prev} = √ᾱ_prev·x̂₀ + √(1−ᾱ_prev)·ε̂`. Composing steps from `t` down to
//! 1 gives `R_t : x_t ↦ x̂₀`, built as a differentiable graph. With
//! checkpointing enabled the whole composition becomes one graph node whose
//! backward pass recomputes each step in turn, so only one step's subgraph
//! is alive at a time.

use std::rc::Rc;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Array, AutodiffError, CustomOp, Graph, NodeId};
use crate::denoiser::{Denoiser, DenoiserError};
use crate::diffusion::{NoiseSchedule, ScheduleError};
use crate::ledger::ComputeLedger;

pub type SharedDenoiser = Arc<dyn Denoiser + Send + Sync>;

const ALPHA_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ReverseError {
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("√ᾱ_{t} = {sqrt_alpha_bar:e} is below the division floor")]
    DivisionGuard { t: usize, sqrt_alpha_bar: f64 },
    #[error("non-finite value in reverse step at t={t}")]
    NonFinite { t: usize },
    #[error("codec dimension mismatch: {0}")]
    Codec(String),
    #[error("invalid reverse config: {0}")]
    InvalidConfig(String),
}

/// Spacing of the timesteps visited by `R_t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stride {
    /// Every `k`-th timestep.
    Fixed(usize),
    /// Smallest stride keeping the network calls per `R_t` at or below the
    /// given count.
    MaxCalls(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReverseConfig {
    pub stride: Stride,
    pub checkpointing: bool,
}

impl Default for ReverseConfig {
    fn default() -> Self {
        Self {
            stride: Stride::MaxCalls(50),
            checkpointing: true,
        }
    }
}

/// `[t, t−k, t−2k, …, 1]`, always ending at 1.
pub fn timestep_sequence(t: usize, stride: usize) -> Vec<usize> {
    assert!(t >= 1 && stride >= 1);
    let mut seq: Vec<usize> = (0..).map(|i| t as isize - (i * stride) as isize).take_while(|&v| v >= 1).map(|v| v as usize).collect();
    if *seq.last().unwrap() != 1 {
        seq.push(1);
    }
    seq
}

fn resolve_stride(stride: Stride, t: usize) -> Result<usize, ReverseError> {
    match stride {
        Stride::Fixed(0) | Stride::MaxCalls(0) => Err(ReverseError::InvalidConfig("stride/max calls must be ≥ 1".into())),
        Stride::Fixed(k) => Ok(k),
        Stride::MaxCalls(m) => Ok((1..=t.max(1))
            .find(|&k| timestep_sequence(t, k).len() <= m)
            .unwrap_or(t.max(1))),
    }
}

/// `R_t` for a fixed schedule, predictor and stride policy.
#[derive(Clone)]
pub struct ReverseOperator {
    schedule: Arc<NoiseSchedule>,
    denoiser: SharedDenoiser,
    config: ReverseConfig,
}

impl ReverseOperator {
    pub fn new(schedule: Arc<NoiseSchedule>, denoiser: SharedDenoiser, config: ReverseConfig) -> Self {
        Self {
            schedule,
            denoiser,
            config,
        }
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn denoiser(&self) -> &SharedDenoiser {
        &self.denoiser
    }

    pub fn config(&self) -> ReverseConfig {
        self.config
    }

    pub fn with_config(&self, config: ReverseConfig) -> Self {
        Self {
            config,
            ..self.clone()
        }
    }

    /// Timesteps visited by `R_t`; its length is the network-call count.
    pub fn sequence(&self, t: usize) -> Result<Vec<usize>, ReverseError> {
        self.schedule.alpha_bar(t)?;
        Ok(timestep_sequence(t, resolve_stride(self.config.stride, t)?))
    }

    fn predict(&self, g: &mut Graph, x: NodeId, t: usize) -> Result<NodeId, ReverseError> {
        self.denoiser
            .predict_eps(g, x, t, &self.schedule)
            .map_err(|e| match e {
                DenoiserError::Autodiff(AutodiffError::NonFinite { .. }) => ReverseError::NonFinite { t },
                other => other.into(),
            })
    }

    fn x0_from_eps(&self, g: &mut Graph, x: NodeId, eps: NodeId, t: usize) -> Result<NodeId, ReverseError> {
        let a = self.schedule.alpha_bar(t)?;
        let sa = a.sqrt();
        if sa < ALPHA_FLOOR {
            return Err(ReverseError::DivisionGuard { t, sqrt_alpha_bar: sa });
        }
        let nf = |_| ReverseError::NonFinite { t };
        let se = g.scale(eps, (1.0 - a).sqrt()).map_err(nf)?;
        let d = g.sub(x, se).map_err(nf)?;
        g.scale(d, 1.0 / sa).map_err(nf)
    }

    /// Stepwise denoised estimate `x̂₀(x_t, t)`.
    pub fn x0_hat(&self, g: &mut Graph, x: NodeId, t: usize) -> Result<NodeId, ReverseError> {
        let eps = self.predict(g, x, t)?;
        self.x0_from_eps(g, x, eps, t)
    }

    /// One deterministic step from `t` to `prev` (`None` returns `x̂₀`).
    pub fn ddim_step_to(
        &self,
        g: &mut Graph,
        x: NodeId,
        t: usize,
        prev: Option<usize>,
    ) -> Result<NodeId, ReverseError> {
        let eps = self.predict(g, x, t)?;
        let x0 = self.x0_from_eps(g, x, eps, t)?;
        let Some(prev) = prev else { return Ok(x0) };
        let ap = self.schedule.alpha_bar(prev)?;
        let nf = |_| ReverseError::NonFinite { t };
        let a = g.scale(x0, ap.sqrt()).map_err(nf)?;
        let b = g.scale(eps, (1.0 - ap).sqrt()).map_err(nf)?;
        g.add(a, b).map_err(nf)
    }

    /// `x_t ↦ x_{t−1}`; at `t = 1` returns `x̂₀`.
    pub fn ddim_step(&self, g: &mut Graph, x: NodeId, t: usize) -> Result<NodeId, ReverseError> {
        self.ddim_step_to(g, x, t, (t > 1).then(|| t - 1))
    }

    fn expand(&self, g: &mut Graph, x: NodeId, seq: &[usize]) -> Result<NodeId, ReverseError> {
        let mut cur = x;
        for (i, &t) in seq.iter().enumerate() {
            cur = self.ddim_step_to(g, cur, t, seq.get(i + 1).copied())?;
        }
        Ok(cur)
    }

    /// Appends `R_t(x)` to the graph and charges one reverse pass.
    pub fn reverse_from(
        &self,
        g: &mut Graph,
        x: NodeId,
        t: usize,
        ledger: &mut ComputeLedger,
    ) -> Result<NodeId, ReverseError> {
        let seq = self.sequence(t)?;
        let out = if self.config.checkpointing {
            let op = Rc::new(CheckpointedReverse {
                op: self.clone(),
                seq: seq.clone(),
            });
            g.custom(&[x], op).map_err(|e| match e {
                AutodiffError::NonFinite { .. } => ReverseError::NonFinite { t },
                other => other.into(),
            })?
        } else {
            self.expand(g, x, &seq)?
        };
        // A `[B, n]` input is B reverse passes.
        let rows = batch_rows(g.value(x));
        ledger.reverse_passes += rows;
        ledger.network_calls += rows * seq.len() as u64;
        Ok(out)
    }

    /// Extra model calls one backward pass through `R_t` costs.
    pub fn backward_cost(&self, t: usize) -> Result<ComputeLedger, ReverseError> {
        let calls = self.sequence(t)?.len() as u64;
        Ok(ComputeLedger {
            network_backward_calls: calls,
            // recomputation of the forward pass
            network_calls: if self.config.checkpointing { calls } else { 0 },
            ..Default::default()
        })
    }

    /// Numeric `R_t(x)` without gradient bookkeeping.
    pub fn reverse_value(&self, x: &Array, t: usize, ledger: &mut ComputeLedger) -> Result<Array, ReverseError> {
        let mut g = Graph::new();
        let leaf = g.leaf(x.clone())?;
        let out = self.reverse_from(&mut g, leaf, t, ledger)?;
        Ok(g.value(out).clone())
    }
}

pub(crate) fn batch_rows(x: &Array) -> u64 {
    if x.shape().len() == 2 { x.shape()[0] as u64 } else { 1 }
}

/// `R_t` as a single node with recomputation-based backward.
struct CheckpointedReverse {
    op: ReverseOperator,
    seq: Vec<usize>,
}

impl CheckpointedReverse {
    fn step(&self, x: &Array, i: usize) -> Result<(Graph, NodeId, NodeId), ReverseError> {
        let mut g = Graph::new();
        let leaf = g.leaf(x.clone())?;
        let out = self.op.ddim_step_to(&mut g, leaf, self.seq[i], self.seq.get(i + 1).copied())?;
        Ok((g, leaf, out))
    }

    /// Forward pass keeping only each step's input.
    fn run(&self, x: &Array) -> Result<(Vec<Array>, Array), ReverseError> {
        let mut inputs = Vec::with_capacity(self.seq.len());
        let mut cur = x.clone();
        for i in 0..self.seq.len() {
            let (g, _, out) = self.step(&cur, i)?;
            inputs.push(cur);
            cur = g.value(out).clone();
        }
        Ok((inputs, cur))
    }
}

fn to_autodiff(e: ReverseError) -> AutodiffError {
    match e {
        ReverseError::Autodiff(a) => a,
        ReverseError::Denoiser(DenoiserError::Autodiff(a)) => a,
        ReverseError::NonFinite { .. } => AutodiffError::NonFinite { op: "reverse-step" },
        _ => AutodiffError::InvalidArgument("reverse step failed"),
    }
}

impl CustomOp for CheckpointedReverse {
    fn name(&self) -> &'static str {
        "checkpointed-reverse"
    }

    fn forward(&self, inputs: &[&Array]) -> Result<Array, AutodiffError> {
        self.run(inputs[0]).map(|(_, out)| out).map_err(to_autodiff)
    }

    fn vjp(&self, inputs: &[&Array], _output: &Array, cotangent: &Array) -> Result<Vec<Array>, AutodiffError> {
        let (step_inputs, _) = self.run(inputs[0]).map_err(to_autodiff)?;
        let mut cot = cotangent.clone();
        for i in (0..self.seq.len()).rev() {
            let (g, leaf, out) = self.step(&step_inputs[i], i).map_err(to_autodiff)?;
            let grads = g.backward_with_cotangent(out, &cot, &[leaf])?;
            cot = grads.get(leaf).expect("step input grad").clone();
        }
        Ok(vec![cot])
    }
}

/// Frozen orthonormal codec standing in for a VAE: the first `m` vectors of
/// the orthonormal DCT-II basis of `ℝⁿ`.
#[derive(Clone, Debug)]
pub struct LatentCodec {
    /// `Cᵀ`, shape `[n, m]`: `z = x·Cᵀ`.
    analysis: Array,
    /// `C`, shape `[m, n]`: `x = z·C`.
    synthesis: Array,
}

impl LatentCodec {
    pub fn dct(n: usize, m: usize) -> Result<Self, ReverseError> {
        if m == 0 || m > n {
            return Err(ReverseError::Codec(format!("latent dim {m} must be in 1..={n}")));
        }
        let mut c = vec![0.0; m * n];
        for k in 0..m {
            let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            for i in 0..n {
                c[k * n + i] = s * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos();
            }
        }
        Self::from_rows(n, m, c)
    }

    /// Codec from an explicit `m×n` matrix with orthonormal rows.
    pub fn from_rows(n: usize, m: usize, rows: Vec<f64>) -> Result<Self, ReverseError> {
        let synthesis = Array::new(vec![m, n], rows)?;
        let mut t = vec![0.0; m * n];
        for k in 0..m {
            for i in 0..n {
                t[i * m + k] = synthesis.data()[k * n + i];
            }
        }
        let codec = Self {
            analysis: Array::new(vec![n, m], t)?,
            synthesis,
        };
        let err = codec.gramian_error();
        if err > 1e-10 {
            return Err(ReverseError::Codec(format!("rows not orthonormal (Gramian error {err:e})")));
        }
        Ok(codec)
    }

    pub fn signal_dim(&self) -> usize {
        self.synthesis.shape()[1]
    }

    pub fn latent_dim(&self) -> usize {
        self.synthesis.shape()[0]
    }

    /// `max |C·Cᵀ − I|`.
    pub fn gramian_error(&self) -> f64 {
        let (m, n) = (self.latent_dim(), self.signal_dim());
        let c = self.synthesis.data();
        let mut worst: f64 = 0.0;
        for a in 0..m {
            for b in 0..m {
                let dot: f64 = (0..n).map(|i| c[a * n + i] * c[b * n + i]).sum();
                worst = worst.max((dot - if a == b { 1.0 } else { 0.0 }).abs());
            }
        }
        worst
    }

    pub fn encode(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, ReverseError> {
        self.check(g.value(x).len(), self.signal_dim())?;
        let a = g.leaf(self.analysis.clone())?;
        Ok(g.matmul(x, a)?)
    }

    pub fn decode(&self, g: &mut Graph, z: NodeId, ledger: &mut ComputeLedger) -> Result<NodeId, ReverseError> {
        self.check(g.value(z).len(), self.latent_dim())?;
        let s = g.leaf(self.synthesis.clone())?;
        ledger.decoder_calls += batch_rows(g.value(z));
        Ok(g.matmul(z, s)?)
    }

    pub fn encode_value(&self, x: &[f64]) -> Result<Vec<f64>, ReverseError> {
        let mut g = Graph::new();
        let leaf = g.leaf(Array::from_vec(x.to_vec()))?;
        let z = self.encode(&mut g, leaf)?;
        Ok(g.value(z).to_vec())
    }

    fn check(&self, got: usize, want: usize) -> Result<(), ReverseError> {
        if got != want {
            return Err(ReverseError::Codec(format!("expected length {want}, got {got}")));
        }
        Ok(())
    }
}

/// `Dec(R_t(z_t + σ_t·δ̃))` with `z_t` the forward-noised `Enc(x₀)`.
///
/// Returns the decoded waveform; charges one reverse pass and one decoder
/// call.
pub fn reverse_latent(
    op: &ReverseOperator,
    codec: &LatentCodec,
    x0: &[f64],
    t: usize,
    latent_eps: &[f64],
    delta: Option<&[f64]>,
    ledger: &mut ComputeLedger,
) -> Result<Array, ReverseError> {
    if op.denoiser().dim() != codec.latent_dim() {
        return Err(ReverseError::Codec(format!(
            "denoiser operates on {} dims, codec latent is {}",
            op.denoiser().dim(),
            codec.latent_dim()
        )));
    }
    let z0 = codec.encode_value(x0)?;
    let mut zt = op.schedule().forward_noise(&z0, t, latent_eps)?.to_vec();
    if let Some(d) = delta {
        let sigma = op.schedule().sigma(t)?;
        if d.len() != zt.len() {
            return Err(ReverseError::Codec("perturbation length differs from latent".into()));
        }
        zt.iter_mut().zip(d).for_each(|(z, d)| *z += sigma * d);
    }
    let mut g = Graph::new();
    let leaf = g.leaf(Array::from_vec(zt))?;
    let z = op.reverse_from(&mut g, leaf, t, ledger)?;
    let x = codec.decode(&mut g, z, ledger)?;
    Ok(g.value(x).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::denoiser::{AnalyticPrior, ArchDescriptor, ExactNoise, MlpDenoiser};
    use crate::diffusion::ScheduleConfig;
    use crate::rng::GaussianStream;

    fn schedule(steps: usize) -> Arc<NoiseSchedule> {
        Arc::new(ScheduleConfig { steps, ..Default::default() }.build().unwrap())
    }

    fn op(s: &Arc<NoiseSchedule>, d: SharedDenoiser, stride: Stride, checkpointing: bool) -> ReverseOperator {
        ReverseOperator::new(s.clone(), d, ReverseConfig { stride, checkpointing })
    }

    #[test]
    fn sequences_end_at_one() {
        assert_eq!(timestep_sequence(1, 1), vec![1]);
        assert_eq!(timestep_sequence(5, 1), vec![5, 4, 3, 2, 1]);
        assert_eq!(timestep_sequence(10, 4), vec![10, 6, 2, 1]);
        assert_eq!(timestep_sequence(9, 4), vec![9, 5, 1]);
        for t in 1..200 {
            let k = resolve_stride(Stride::MaxCalls(25), t).unwrap();
            assert!(timestep_sequence(t, k).len() <= 25);
            if k > 1 {
                assert!(timestep_sequence(t, k - 1).len() > 25, "stride {k} not minimal at t={t}");
            }
        }
    }

    #[test]
    fn exact_noise_inverts_forward_process() {
        let s = schedule(100);
        let mut rng = GaussianStream::new(3);
        let x0 = rng.normal_vec(12);
        let eps = rng.normal_vec(12);
        for (t, stride) in [(1, Stride::Fixed(1)), (37, Stride::Fixed(1)), (60, Stride::MaxCalls(25)), (100, Stride::Fixed(7))] {
            let xt = s.forward_noise(&x0, t, &eps).unwrap();
            for ckpt in [false, true] {
                let r = op(&s, Arc::new(ExactNoise::new(eps.clone())), stride, ckpt);
                let out = r.reverse_value(&xt, t, &mut ComputeLedger::default()).unwrap();
                let err = out.data().iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(err < 1e-9, "t={t} ckpt={ckpt} err={err}");
            }
        }
    }

    /// Zero-mean Gaussian prior makes every step a scalar multiple; compose
    /// the scalars by hand.
    #[test]
    fn analytic_prior_matches_scalar_composition() {
        let s = schedule(50);
        let prior = AnalyticPrior::new(vec![0.0; 4], 0.3);
        let t = 40;
        let seq = timestep_sequence(t, 3);
        let mut c = 1.0;
        for (i, &tt) in seq.iter().enumerate() {
            let a: f64 = s.alpha_bars()[tt - 1];
            let k = a.sqrt() * 0.3 / (a * 0.3 + 1.0 - a);
            let slope = (1.0 - a.sqrt() * k) / (1.0 - a).sqrt();
            let x0 = (1.0 - (1.0 - a).sqrt() * slope) / a.sqrt();
            c *= match seq.get(i + 1) {
                Some(&p) => {
                    let ap: f64 = s.alpha_bars()[p - 1];
                    ap.sqrt() * x0 + (1.0 - ap).sqrt() * slope
                }
                None => x0,
            };
        }
        let x = Array::from_vec(vec![1.0, -0.5, 2.0, 0.25]);
        let r = op(&s, Arc::new(prior), Stride::Fixed(3), false);
        let out = r.reverse_value(&x, t, &mut ComputeLedger::default()).unwrap();
        for (o, xi) in out.data().iter().zip(x.data()) {
            assert!((o - c * xi).abs() < 1e-12, "{o} vs {}", c * xi);
        }
    }

    #[test]
    fn checkpointed_gradient_equals_unrolled_and_finite_differences() {
        let s = schedule(30);
        let arch = ArchDescriptor {
            hidden: vec![16, 16],
            time_embed_dim: 4,
            ..ArchDescriptor::new(8)
        };
        let model: SharedDenoiser = Arc::new(MlpDenoiser::init(arch, 5).unwrap());
        let x = Array::from_vec(GaussianStream::new(8).normal_vec(8));
        let mut grads = Vec::new();
        for ckpt in [false, true] {
            let r = op(&s, model.clone(), Stride::Fixed(4), ckpt);
            let mut g = Graph::new();
            let leaf = g.leaf(x.clone()).unwrap();
            let out = r.reverse_from(&mut g, leaf, 20, &mut ComputeLedger::default()).unwrap();
            let sq = g.square(out).unwrap();
            let loss = g.sum(sq).unwrap();
            grads.push(g.backward(loss, &[leaf]).unwrap().get(leaf).unwrap().clone());
            let report = finite_difference_check(&mut g, loss, leaf, 1e-5).unwrap();
            assert!(report.passes(1e-6), "ckpt={ckpt}: {report:?}");
        }
        assert!(grads[0].max_abs_diff(&grads[1]) < 1e-10);
    }

    #[test]
    fn ledger_counts_calls() {
        let s = schedule(100);
        let r = op(&s, Arc::new(ExactNoise::new(vec![0.0; 3])), Stride::MaxCalls(25), true);
        let mut ledger = ComputeLedger::default();
        r.reverse_value(&Array::from_vec(vec![0.1; 3]), 60, &mut ledger).unwrap();
        let calls = r.sequence(60).unwrap().len() as u64;
        assert!(calls <= 25);
        assert_eq!(ledger.reverse_passes, 1);
        assert_eq!(ledger.network_calls, calls);
        let b = r.backward_cost(60).unwrap();
        assert_eq!((b.network_backward_calls, b.network_calls), (calls, calls));
    }

    #[test]
    fn division_guard_trips_at_vanishing_alpha() {
        let s = Arc::new(NoiseSchedule::from_alpha_bar(vec![0.5, 1e-13]).unwrap());
        let r = op(&s, Arc::new(ExactNoise::new(vec![0.0; 2])), Stride::Fixed(1), false);
        let err = r.reverse_value(&Array::from_vec(vec![1.0, 1.0]), 2, &mut ComputeLedger::default());
        assert!(matches!(err, Err(ReverseError::DivisionGuard { t: 2, .. })));
    }

    #[test]
    fn dct_codec_is_orthonormal_and_latent_reverse_decodes() {
        let codec = LatentCodec::dct(32, 8).unwrap();
        assert!(codec.gramian_error() < 1e-12);
        assert!(LatentCodec::dct(4, 5).is_err());
        let s = schedule(40);
        let mut rng = GaussianStream::new(1);
        let x0 = rng.normal_vec(32);
        let le = rng.normal_vec(8);
        let r = op(&s, Arc::new(ExactNoise::new(le.clone())), Stride::Fixed(2), true);
        let mut ledger = ComputeLedger::default();
        let out = reverse_latent(&r, &codec, &x0, 25, &le, None, &mut ledger).unwrap();
        // Exact noise recovers Enc(x₀); decoding projects x₀ onto the span.
        let z = codec.encode_value(&x0).unwrap();
        let mut g = Graph::new();
        let zl = g.leaf(Array::from_vec(z)).unwrap();
        let proj = codec.decode(&mut g, zl, &mut ComputeLedger::default()).unwrap();
        assert!(out.max_abs_diff(g.value(proj)) < 1e-9);
        assert_eq!(ledger.decoder_calls, 1);
        assert_eq!(ledger.reverse_passes, 1);
        let wrong = op(&s, Arc::new(ExactNoise::new(vec![0.0; 32])), Stride::Fixed(2), true);
        assert!(matches!(
            reverse_latent(&wrong, &codec, &x0, 25, &le, None, &mut ledger),
            Err(ReverseError::Codec(_))
        ));
    }

    #[test]
    fn x0_hat_and_single_step_arithmetic() {
        let s = Arc::new(NoiseSchedule::from_alpha_bar(vec![0.64, 0.36]).unwrap());
        let r = op(&s, Arc::new(ExactNoise::new(vec![0.5])), Stride::Fixed(1), false);
        let mut g = Graph::new();
        let x = g.leaf(Array::from_vec(vec![1.0])).unwrap();
        let x0 = r.x0_hat(&mut g, x, 2).unwrap();
        assert!((g.value(x0).item() - 1.0).abs() < 1e-15);

        let s = schedule(80);
        let mut rng = GaussianStream::new(12);
        let (x0, eps) = (rng.normal_vec(5), rng.normal_vec(5));
        let r = op(&s, Arc::new(ExactNoise::new(eps.clone())), Stride::Fixed(1), false);
        for t in [2, 41, 80] {
            let mut g = Graph::new();
            let x = g.leaf(s.forward_noise(&x0, t, &eps).unwrap()).unwrap();
            let prev = r.ddim_step(&mut g, x, t).unwrap();
            let want = s.forward_noise(&x0, t - 1, &eps).unwrap();
            assert!(g.value(prev).max_abs_diff(&want) < 1e-9);
        }
    }

    #[test]
    fn reverse_is_bitwise_deterministic() {
        let s = schedule(50);
        let arch = ArchDescriptor { hidden: vec![8], time_embed_dim: 4, ..ArchDescriptor::new(6) };
        let r = op(&s, Arc::new(MlpDenoiser::init(arch, 2).unwrap()), Stride::Fixed(5), true);
        let x = Array::from_vec(GaussianStream::new(2).normal_vec(6));
        let a = r.reverse_value(&x, 33, &mut ComputeLedger::default()).unwrap();
        let b = r.reverse_value(&x, 33, &mut ComputeLedger::default()).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    /// A square orthonormal codec is a change of basis: the latent pipeline
    /// with prior mean μ and noise e matches the waveform pipeline with prior
    /// mean Cᵀμ and noise Cᵀe.
    #[test]
    fn square_codec_is_a_change_of_basis() {
        let n = 16;
        let codec = LatentCodec::dct(n, n).unwrap();
        let s = schedule(60);
        let mut rng = GaussianStream::new(21);
        let (x0, mu, e) = (rng.normal_vec(n), rng.normal_vec(n), rng.normal_vec(n));
        let rot = |v: &[f64]| -> Vec<f64> {
            let mut g = Graph::new();
            let z = g.leaf(Array::from_vec(v.to_vec())).unwrap();
            let x = codec.decode(&mut g, z, &mut ComputeLedger::default()).unwrap();
            g.value(x).to_vec()
        };
        let cfg = (Stride::Fixed(3), true);
        let latent = op(&s, Arc::new(AnalyticPrior::new(mu.clone(), 0.7)), cfg.0, cfg.1);
        let wave = op(&s, Arc::new(AnalyticPrior::new(rot(&mu), 0.7)), cfg.0, cfg.1);
        let a = reverse_latent(&latent, &codec, &x0, 45, &e, None, &mut ComputeLedger::default()).unwrap();
        let xt = s.forward_noise(&x0, 45, &rot(&e)).unwrap();
        let b = wave.reverse_value(&xt, 45, &mut ComputeLedger::default()).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9, "{}", a.max_abs_diff(&b));

        let zero = vec![0.0; n];
        let c = reverse_latent(&latent, &codec, &x0, 45, &e, Some(&zero), &mut ComputeLedger::default()).unwrap();
        assert_eq!(a, c);
    }
}
