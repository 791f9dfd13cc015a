use serde::{Deserialize, Serialize};

use super::{check_input, Denoiser, DenoiserError};
use crate::autodiff::{Array, Graph, NodeId};
use crate::diffusion::NoiseSchedule;
use crate::rng::GaussianStream;

/// What the network head predicts. Both are exposed as `ε̂`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Parameterization {
    /// The head outputs `ε̂` directly.
    Eps,
    /// The head outputs `x̂₀`; `ε̂ = (x_t − √ᾱ_t·x̂₀)/σ_t`.
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HiddenActivation {
    Silu,
    Tanh,
}

/// Architecture of the toy MLP noise predictor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: HiddenActivation,
    pub time_embed_dim: usize,
    pub parameterization: Parameterization,
}

impl ArchDescriptor {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![128, 128],
            activation: HiddenActivation::Silu,
            time_embed_dim: 16,
            parameterization: Parameterization::Eps,
        }
    }

    /// Tensor shapes in storage order:
    /// `W_x, W_emb, b_0, (W_i, b_i)…, W_out, b_out`.
    /// `W_x` and `W_emb` are the row blocks of the first layer's weight
    /// applied to the concatenation `[x_t; emb(t)]`.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let n = self.input_dim;
        let mut shapes = vec![
            vec![n, self.hidden[0]],
            vec![self.time_embed_dim, self.hidden[0]],
            vec![self.hidden[0]],
        ];
        for w in self.hidden.windows(2) {
            shapes.push(vec![w[0], w[1]]);
            shapes.push(vec![w[1]]);
        }
        shapes.push(vec![*self.hidden.last().unwrap(), n]);
        shapes.push(vec![n]);
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        if self.input_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(DenoiserError::InvalidConfig(format!("degenerate architecture {self:?}")));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(DenoiserError::InvalidConfig("time embedding dimension must be even and > 0".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("descriptor serializes")
    }
}

/// Sinusoidal timestep embedding: `sin(t·ω_i)` then `cos(t·ω_i)`, with
/// `ω_i = 10000^(−i/(d/2))`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freq = |i: usize| (-(10000f64.ln()) * i as f64 / half as f64).exp();
    (0..half)
        .map(|i| (t as f64 * freq(i)).sin())
        .chain((0..half).map(|i| (t as f64 * freq(i)).cos()))
        .collect()
}

/// MLP noise predictor with frozen (immutable) weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpDenoiser {
    arch: ArchDescriptor,
    tensors: Vec<Array>,
}

impl MlpDenoiser {
    /// Gaussian init with variance `1/fan_in`; biases zero.
    pub fn init(arch: ArchDescriptor, seed: u64) -> Result<Self, DenoiserError> {
        arch.validate()?;
        let mut rng = GaussianStream::new(seed);
        let fan_in_first = (arch.input_dim + arch.time_embed_dim) as f64;
        let tensors = arch
            .shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let len: usize = shape.iter().product();
                let data = if shape.len() == 1 {
                    vec![0.0; len]
                } else {
                    let fan_in = if i < 2 { fan_in_first } else { shape[0] as f64 };
                    let sd = fan_in.recip().sqrt();
                    (0..len).map(|_| sd * rng.normal()).collect()
                };
                Array::new(shape, data).expect("shape from descriptor")
            })
            .collect();
        Ok(Self { arch, tensors })
    }

    pub fn from_flat(arch: ArchDescriptor, flat: &[f64]) -> Result<Self, DenoiserError> {
        arch.validate()?;
        if flat.len() != arch.param_count() {
            return Err(DenoiserError::Format(format!(
                "weight count {} does not match architecture ({})",
                flat.len(),
                arch.param_count()
            )));
        }
        if flat.iter().any(|w| !w.is_finite()) {
            return Err(DenoiserError::Format("non-finite weight".into()));
        }
        let mut offset = 0;
        let tensors = arch
            .shapes()
            .into_iter()
            .map(|shape| {
                let len: usize = shape.iter().product();
                let a = Array::new(shape, flat[offset..offset + len].to_vec()).expect("sized");
                offset += len;
                a
            })
            .collect();
        Ok(Self { arch, tensors })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn tensors(&self) -> &[Array] {
        &self.tensors
    }

    /// Binds every weight tensor as a graph leaf. Weights are checked
    /// finite on construction, so binding skips the scan.
    pub(crate) fn bind(&self, graph: &mut Graph) -> Result<Vec<NodeId>, DenoiserError> {
        Ok(self.tensors.iter().map(|t| graph.trusted_leaf(t.clone())).collect())
    }

    /// Network head output for `x` (`[n]` or `[B, n]`) given an embedding
    /// node shaped `[e]` or `[B, e]` to match.
    pub(crate) fn head(
        &self,
        graph: &mut Graph,
        weights: &[NodeId],
        x: NodeId,
        emb: NodeId,
    ) -> Result<NodeId, DenoiserError> {
        let act = |graph: &mut Graph, h: NodeId| match self.arch.activation {
            HiddenActivation::Silu => graph.silu(h),
            HiddenActivation::Tanh => graph.tanh(h),
        };
        let hx = graph.matmul(x, weights[0])?;
        let he = graph.matmul(emb, weights[1])?;
        let h = graph.add(hx, he)?;
        let h = graph.add(h, weights[2])?;
        let mut h = act(graph, h)?;
        let layers = self.arch.hidden.len();
        for l in 1..layers {
            let z = graph.matmul(h, weights[1 + 2 * l])?;
            let z = graph.add(z, weights[2 + 2 * l])?;
            h = act(graph, z)?;
        }
        let out = graph.matmul(h, weights[1 + 2 * layers])?;
        Ok(graph.add(out, weights[2 + 2 * layers])?)
    }

    pub(crate) fn embedding_node(
        &self,
        graph: &mut Graph,
        ts: &[usize],
        batched: bool,
    ) -> Result<NodeId, DenoiserError> {
        let e = self.arch.time_embed_dim;
        let data: Vec<f64> = ts.iter().flat_map(|&t| timestep_embedding(t, e)).collect();
        let arr = if batched {
            Array::new(vec![ts.len(), e], data)?
        } else {
            Array::from_vec(data)
        };
        Ok(graph.leaf(arr)?)
    }
}

impl Denoiser for MlpDenoiser {
    fn dim(&self) -> usize {
        self.arch.input_dim
    }

    fn predict_eps(
        &self,
        graph: &mut Graph,
        x_t: NodeId,
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<NodeId, DenoiserError> {
        check_input(graph, x_t, self.dim())?;
        let a = schedule.alpha_bar(t)?;
        let shape = graph.value(x_t).shape().to_vec();
        let batched = shape.len() == 2;
        let rows = if batched { shape[0] } else { 1 };
        let weights = self.bind(graph)?;
        let emb = self.embedding_node(graph, &vec![t; rows], batched)?;
        let head = self.head(graph, &weights, x_t, emb)?;
        match self.arch.parameterization {
            Parameterization::Eps => Ok(head),
            Parameterization::Sample => {
                let sigma = (1.0 - a).sqrt();
                if sigma < 1e-12 {
                    return Err(DenoiserError::InvalidConfig(format!(
                        "sample parameterization undefined at t={t} (σ_t = 0)"
                    )));
                }
                let xs = graph.scale(x_t, 1.0 / sigma)?;
                let hs = graph.scale(head, a.sqrt() / sigma)?;
                Ok(graph.sub(xs, hs)?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::diffusion::ScheduleConfig;

    fn small_arch(param: Parameterization) -> ArchDescriptor {
        ArchDescriptor {
            input_dim: 6,
            hidden: vec![5, 4],
            activation: HiddenActivation::Silu,
            time_embed_dim: 4,
            parameterization: param,
        }
    }

    #[test]
    fn flat_round_trip_and_count() {
        let arch = small_arch(Parameterization::Eps);
        let m = MlpDenoiser::init(arch.clone(), 3).unwrap();
        let flat = m.to_flat();
        assert_eq!(flat.len(), arch.param_count());
        assert_eq!(flat.len(), 6 * 5 + 4 * 5 + 5 + 5 * 4 + 4 + 4 * 6 + 6);
        assert_eq!(MlpDenoiser::from_flat(arch.clone(), &flat).unwrap(), m);
        assert!(MlpDenoiser::from_flat(arch, &flat[1..]).is_err());
    }

    #[test]
    fn embedding_layout() {
        let e = timestep_embedding(3, 4);
        assert!((e[0] - 3f64.sin()).abs() < 1e-15);
        assert!((e[1] - (3.0 * 0.01f64).sin()).abs() < 1e-15);
        assert!((e[2] - 3f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn batched_rows_match_single_calls() {
        let s = ScheduleConfig { steps: 20, ..Default::default() }.build().unwrap();
        let m = MlpDenoiser::init(small_arch(Parameterization::Sample), 5).unwrap();
        let mut rng = GaussianStream::new(1);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vec(6)).collect();
        let mut g = Graph::new();
        let xb = g.leaf(Array::new(vec![3, 6], rows.concat()).unwrap()).unwrap();
        let eb = m.predict_eps(&mut g, xb, 7, &s).unwrap();
        let batch = g.value(eb).to_vec();
        for (r, row) in rows.iter().enumerate() {
            let mut g = Graph::new();
            let x = g.leaf(Array::from_vec(row.clone())).unwrap();
            let e = m.predict_eps(&mut g, x, 7, &s).unwrap();
            for (a, b) in g.value(e).data().iter().zip(&batch[r * 6..(r + 1) * 6]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eps_norm_gradient_matches_finite_differences() {
        let s = ScheduleConfig { steps: 20, ..Default::default() }.build().unwrap();
        for param in [Parameterization::Eps, Parameterization::Sample] {
            let m = MlpDenoiser::init(small_arch(param), 11).unwrap();
            let mut g = Graph::new();
            let x = g.leaf(Array::from_vec(GaussianStream::new(2).normal_vec(6))).unwrap();
            let e = m.predict_eps(&mut g, x, 12, &s).unwrap();
            let sq = g.square(e).unwrap();
            let loss = g.sum(sq).unwrap();
            let report = finite_difference_check(&mut g, loss, x, 1e-5).unwrap();
            assert!(report.passes(1e-4), "{param:?}: {report:?}");
        }
    }

    #[test]
    fn rejects_bad_descriptor() {
        let mut arch = small_arch(Parameterization::Eps);
        arch.time_embed_dim = 3;
        assert!(MlpDenoiser::init(arch, 0).is_err());
    }
}
