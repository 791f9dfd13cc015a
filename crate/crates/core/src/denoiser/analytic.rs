use super::{check_input, Denoiser, DenoiserError};
use crate::autodiff::{Array, Graph, NodeId};
use crate::diffusion::NoiseSchedule;

/// Closed-form posterior noise predictor for an isotropic Gaussian prior
/// `x₀ ~ N(μ, τ²·I)`:
///
/// `x̂₀ = μ + k·(x_t − √ᾱ·μ)` with `k = √ᾱ·τ² / (ᾱ·τ² + σ²)`, and
/// `ε̂ = (x_t − √ᾱ·x̂₀) / σ`, which is `E[ε | x_t]` exactly.
#[derive(Clone, Debug)]
pub struct AnalyticPrior {
    pub mean: Vec<f64>,
    pub variance: f64,
}

impl AnalyticPrior {
    pub fn new(mean: Vec<f64>, variance: f64) -> Self {
        assert!(variance > 0.0, "prior variance must be positive");
        Self { mean, variance }
    }

    /// Posterior gain `k` and `(√ᾱ, σ)` at `t`.
    pub fn gain(&self, t: usize, schedule: &NoiseSchedule) -> Result<(f64, f64, f64), DenoiserError> {
        let a = schedule.alpha_bar(t)?;
        let sigma2 = 1.0 - a;
        let k = a.sqrt() * self.variance / (a * self.variance + sigma2);
        Ok((k, a.sqrt(), sigma2.sqrt()))
    }

    /// Numeric `ε̂` for a single clip, without a graph.
    pub fn eps(&self, x_t: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>, DenoiserError> {
        let (k, sa, sigma) = self.gain(t, schedule)?;
        Ok(x_t
            .iter()
            .zip(&self.mean)
            .map(|(x, m)| {
                let x0 = m + k * (x - sa * m);
                (x - sa * x0) / sigma
            })
            .collect())
    }
}

impl Denoiser for AnalyticPrior {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn predict_eps(
        &self,
        graph: &mut Graph,
        x_t: NodeId,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<NodeId, DenoiserError> {
        check_input(graph, x_t, self.dim())?;
        let (k, sa, sigma) = self.gain(t, schedule)?;
        // ε̂ = x_t·(1 − √ᾱ·k)/σ − √ᾱ·(1 − k·√ᾱ)·μ/σ
        let slope = (1.0 - sa * k) / sigma;
        let scaled = graph.scale(x_t, slope)?;
        if self.mean.iter().all(|&m| m == 0.0) {
            return Ok(scaled);
        }
        let offset: Vec<f64> = self
            .mean
            .iter()
            .map(|m| -sa * (1.0 - k * sa) * m / sigma)
            .collect();
        let offset = graph.leaf(Array::from_vec(offset))?;
        Ok(graph.add(scaled, offset)?)
    }
}

/// Test oracle that returns the exact forward noise, whatever `x_t` is.
/// With it, `x̂₀` inverts the forward process exactly at every `t`.
#[derive(Clone, Debug)]
pub struct ExactNoise {
    pub eps: Array,
}

impl ExactNoise {
    pub fn new(eps: Vec<f64>) -> Self {
        Self {
            eps: Array::from_vec(eps),
        }
    }
}

impl Denoiser for ExactNoise {
    fn dim(&self) -> usize {
        self.eps.len()
    }

    fn predict_eps(
        &self,
        graph: &mut Graph,
        x_t: NodeId,
        _t: usize,
        _schedule: &NoiseSchedule,
    ) -> Result<NodeId, DenoiserError> {
        check_input(graph, x_t, self.dim())?;
        Ok(graph.leaf(self.eps.clone())?)
    }
}

/// `ε_θ ≡ 0`.
#[derive(Clone, Copy, Debug)]
pub struct ZeroNoise {
    pub dim: usize,
}

impl Denoiser for ZeroNoise {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict_eps(
        &self,
        graph: &mut Graph,
        x_t: NodeId,
        _t: usize,
        _schedule: &NoiseSchedule,
    ) -> Result<NodeId, DenoiserError> {
        check_input(graph, x_t, self.dim)?;
        let shape = graph.value(x_t).shape().to_vec();
        Ok(graph.leaf(Array::zeros(&shape))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::GaussianStream;

    fn eval(d: &dyn Denoiser, x: &[f64], t: usize, s: &NoiseSchedule) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.leaf(Array::from_vec(x.to_vec())).unwrap();
        let e = d.predict_eps(&mut g, x, t, s).unwrap();
        g.value(e).to_vec()
    }

    #[test]
    fn standard_prior_gives_point_eight_slope() {
        let s = NoiseSchedule::from_alpha_bar(vec![0.9, 0.36]).unwrap();
        let p = AnalyticPrior::new(vec![0.0; 3], 1.0);
        let out = eval(&p, &[1.0, -2.0, 0.5], 2, &s);
        for (o, x) in out.iter().zip([1.0, -2.0, 0.5]) {
            assert!((o - 0.8 * x).abs() < 1e-14);
        }
    }

    #[test]
    fn degenerate_prior_collapses_to_mean() {
        let s = NoiseSchedule::from_alpha_bar(vec![0.9, 0.36]).unwrap();
        let mu = vec![0.3, -0.1];
        let p = AnalyticPrior::new(mu.clone(), 1e-14);
        let x = [1.0, 2.0];
        let out = eval(&p, &x, 2, &s);
        for i in 0..2 {
            let want = (x[i] - 0.6 * mu[i]) / 0.8;
            assert!((out[i] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn graph_and_numeric_paths_agree() {
        let s = NoiseSchedule::from_alpha_bar(vec![0.95, 0.7, 0.4]).unwrap();
        let p = AnalyticPrior::new(vec![0.2, -0.4, 1.0], 0.5);
        let x = [0.1, 0.7, -1.2];
        let a = eval(&p, &x, 3, &s);
        let b = p.eps(&x, 3, &s).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    /// Posterior mean of ε against Monte-Carlo: sample x₀ from the exact
    /// posterior N(m_post, v_post) and average (x_t − √ᾱ x₀)/σ.
    #[test]
    fn matches_monte_carlo_posterior_expectation() {
        let s = NoiseSchedule::build(crate::diffusion::ScheduleKind::Linear, 50, 1e-4, 0.05).unwrap();
        let mut rng = GaussianStream::new(99);
        let samples = 100_000;
        for case in 0..20 {
            let t = 1 + rng.below(50);
            let mu = rng.normal();
            let var = 0.2 + rng.uniform();
            let xt = rng.normal() * 1.5;
            let p = AnalyticPrior::new(vec![mu], var);
            let want = p.eps(&[xt], t, &s).unwrap()[0];
            let a = s.alpha_bar(t).unwrap();
            let sigma2 = 1.0 - a;
            // Bayes: x₀ | x_t ~ N(m, v) with precision 1/var + a/σ².
            let v = 1.0 / (1.0 / var + a / sigma2);
            let m = v * (mu / var + a.sqrt() * xt / sigma2);
            let draws: Vec<f64> = (0..samples)
                .map(|_| {
                    let x0 = m + v.sqrt() * rng.normal();
                    (xt - a.sqrt() * x0) / sigma2.sqrt()
                })
                .collect();
            let mean = draws.iter().sum::<f64>() / samples as f64;
            let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (samples - 1) as f64).sqrt();
            let se = sd / (samples as f64).sqrt();
            assert!((mean - want).abs() < 3.0 * se + 1e-12, "case {case}: {mean} vs {want} (se {se})");
        }
    }

    #[test]
    fn exact_noise_returns_eps_and_checks_shape() {
        let s = NoiseSchedule::from_alpha_bar(vec![0.5]).unwrap();
        let d = ExactNoise::new(vec![0.25, -1.0]);
        assert_eq!(eval(&d, &[9.0, 9.0], 1, &s), vec![0.25, -1.0]);
        let mut g = Graph::new();
        let x = g.leaf(Array::from_vec(vec![1.0; 3])).unwrap();
        assert!(matches!(
            d.predict_eps(&mut g, x, 1, &s),
            Err(DenoiserError::ShapeMismatch { expected: 2, got: 3 })
        ));
    }
}
