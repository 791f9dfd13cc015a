use serde::{Deserialize, Serialize};

use super::mlp::{MlpDenoiser, Parameterization};
use super::DenoiserError;
use crate::autodiff::{Array, AutodiffError, Graph};
use crate::diffusion::NoiseSchedule;
use crate::rng::{mix64, GaussianStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables.
    pub grad_clip: Option<f64>,
    /// Min-SNR loss weighting `min(SNR_t, γ)/SNR_t`; `None` trains on the
    /// plain ε-MSE.
    pub snr_gamma: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
            grad_clip: Some(1.0),
            snr_gamma: Some(5.0),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), DenoiserError> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(DenoiserError::InvalidConfig(format!("{self:?}")));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) || self.snr_gamma.is_some_and(|g| !(g > 0.0)) {
            return Err(DenoiserError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MlpDenoiser,
    /// Weighted training loss at every step.
    pub loss_trace: Vec<f64>,
}

/// Per-row loss weight for timestep `t`.
fn row_weight(schedule: &NoiseSchedule, t: usize, gamma: Option<f64>) -> Result<f64, DenoiserError> {
    let a = schedule.alpha_bar(t)?;
    let snr = a / (1.0 - a);
    Ok(gamma.map_or(1.0, |g| snr.min(g) / snr))
}

/// SGD with momentum on `E_{t,ε} w(t)·‖ε − ε_θ(x_t, t)‖²/n` over the corpus,
/// with `t` uniform on `{1, …, T}` and `ε ~ N(0, I)`. Deterministic given
/// `config.seed`.
pub fn train(
    init: MlpDenoiser,
    corpus: &[Vec<f64>],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<TrainOutcome, DenoiserError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(DenoiserError::EmptyCorpus);
    }
    let n = init.arch().input_dim;
    if let Some(bad) = corpus.iter().find(|c| c.len() != n) {
        return Err(DenoiserError::ShapeMismatch {
            expected: n,
            got: bad.len(),
        });
    }
    let arch = init.arch().clone();
    let mut flat = init.to_flat();
    let mut velocity = vec![0.0; flat.len()];
    let mut model = init;
    let mut loss_trace = Vec::with_capacity(config.steps);
    let b = config.batch_size;

    for step in 0..config.steps {
        let mut rng = GaussianStream::new(mix64(config.seed ^ mix64(step as u64)));
        let mut x = Vec::with_capacity(b * n);
        let mut eps = Vec::with_capacity(b * n);
        let mut ts = Vec::with_capacity(b);
        let mut weights = Vec::with_capacity(b * n);
        let mut c_in = Vec::with_capacity(b * n);
        let mut c_head = Vec::with_capacity(b * n);
        for _ in 0..b {
            let clip = &corpus[rng.below(corpus.len())];
            let t = 1 + rng.below(schedule.steps());
            let noise = rng.normal_vec(n);
            let xt = schedule.forward_noise(clip, t, &noise)?;
            let a = schedule.alpha_bar(t)?;
            let sigma = (1.0 - a).sqrt();
            let w = row_weight(schedule, t, config.snr_gamma)?;
            x.extend_from_slice(xt.data());
            eps.extend(noise);
            ts.push(t);
            weights.extend(std::iter::repeat_n(w, n));
            c_in.extend(std::iter::repeat_n(1.0 / sigma, n));
            c_head.extend(std::iter::repeat_n(a.sqrt() / sigma, n));
        }

        let diverged = |e: AutodiffError| match e {
            AutodiffError::NonFinite { .. } => DenoiserError::Diverged { step },
            other => other.into(),
        };
        let mut g = Graph::new();
        let wnodes = model.bind(&mut g)?;
        let xn = g.leaf(Array::new(vec![b, n], x)?)?;
        let emb = model.embedding_node(&mut g, &ts, true)?;
        let head = model.head(&mut g, &wnodes, xn, emb).map_err(|e| match e {
            DenoiserError::Autodiff(a) => diverged(a),
            other => other,
        })?;
        let eps_hat = match arch.parameterization {
            Parameterization::Eps => head,
            Parameterization::Sample => {
                let cin = g.leaf(Array::new(vec![b, n], c_in)?)?;
                let ch = g.leaf(Array::new(vec![b, n], c_head)?)?;
                let xs = g.mul(xn, cin)?;
                let hs = g.mul(head, ch).map_err(diverged)?;
                g.sub(xs, hs).map_err(diverged)?
            }
        };
        let target = g.leaf(Array::new(vec![b, n], eps)?)?;
        let diff = g.sub(eps_hat, target).map_err(diverged)?;
        let sq = g.square(diff).map_err(diverged)?;
        let wn = g.leaf(Array::new(vec![b, n], weights)?)?;
        let weighted = g.mul(sq, wn).map_err(diverged)?;
        let loss = g.mean(weighted).map_err(diverged)?;
        let loss_value = g.value(loss).item();
        loss_trace.push(loss_value);

        let grads = g.backward(loss, &wnodes)?;
        let mut grad_flat: Vec<f64> = wnodes
            .iter()
            .flat_map(|id| grads.get(*id).expect("weight grad").to_vec())
            .collect();
        if grad_flat.iter().any(|v| !v.is_finite()) {
            return Err(DenoiserError::Diverged { step });
        }
        if let Some(clip) = config.grad_clip {
            let norm = grad_flat.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > clip {
                let s = clip / norm;
                grad_flat.iter_mut().for_each(|v| *v *= s);
            }
        }
        for ((w, v), gr) in flat.iter_mut().zip(velocity.iter_mut()).zip(&grad_flat) {
            *v = config.momentum * *v + gr;
            *w -= config.learning_rate * *v;
        }
        model = MlpDenoiser::from_flat(arch.clone(), &flat).map_err(|_| DenoiserError::Diverged { step })?;
    }
    Ok(TrainOutcome { model, loss_trace })
}
