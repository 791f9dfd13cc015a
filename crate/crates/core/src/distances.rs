//! Differentiable degradation metrics `D(a, b)` on waveforms.
//!
//! Spectral metrics frame the signal with a [`LinearMap`] and realize the
//! DFT as a multiply by fixed windowed cosine/sine matrices, so every metric
//! is an ordinary graph expression and gradients come for free.

use std::f64::consts::PI;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Array, AutodiffError, Graph, LinearMap, NodeId};

/// Added under the square root of spectral magnitudes.
pub const MAG_EPS: f64 = 1e-12;
const SC_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("invalid metric config: {0}")]
    InvalidConfig(String),
    #[error("inputs must have equal shapes: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("clip of length {len} is shorter than one frame ({frame})")]
    TooShort { len: usize, frame: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    WaveformMse,
    LogMelMse,
    MrStft,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::WaveformMse, MetricKind::LogMelMse, MetricKind::MrStft];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::WaveformMse => "waveform-mse",
            MetricKind::LogMelMse => "log-mel-mse",
            MetricKind::MrStft => "mr-stft",
        }
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MetricKind {
    type Err = MetricError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| MetricError::InvalidConfig(format!("unknown metric kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Window {
    Hann,
    Rectangular,
}

impl Window {
    /// Periodic window of length `len`.
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..len).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos()).collect(),
            Window::Rectangular => vec![1.0; len],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub frame_length: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub window: Window,
}

impl StftConfig {
    /// Hann window, frame = FFT size, hop = FFT/4.
    pub fn hann(fft_size: usize) -> Self {
        Self {
            frame_length: fft_size,
            hop: (fft_size / 4).max(1),
            fft_size,
            window: Window::Hann,
        }
    }

    pub fn validate(&self) -> Result<(), MetricError> {
        if self.hop == 0 || self.hop > self.frame_length || self.frame_length > self.fft_size {
            return Err(MetricError::InvalidConfig(format!(
                "need 1 ≤ hop ≤ frame length ≤ FFT size, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frames(&self, len: usize) -> Result<usize, MetricError> {
        self.validate()?;
        if len < self.frame_length {
            return Err(MetricError::TooShort {
                len,
                frame: self.frame_length,
            });
        }
        Ok(1 + (len - self.frame_length) / self.hop)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    pub bands: usize,
    pub f_min: f64,
    /// `None` means Nyquist.
    pub f_max: Option<f64>,
    pub sample_rate: f64,
    pub stft: StftConfig,
    pub floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            bands: 16,
            f_min: 0.0,
            f_max: None,
            sample_rate: 16_000.0,
            stft: StftConfig::hann(256),
            floor: 1e-5,
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelConfig {
    /// Triangular HTK-mel filterbank, `[bins, bands]` (already transposed
    /// for `power · fb`).
    pub fn filterbank(&self) -> Result<Array, MetricError> {
        self.stft.validate()?;
        let nyquist = self.sample_rate / 2.0;
        let f_max = self.f_max.unwrap_or(nyquist);
        if self.bands == 0 || !(self.floor > 0.0) || !(0.0 <= self.f_min && self.f_min < f_max && f_max <= nyquist) {
            return Err(MetricError::InvalidConfig(format!("{self:?}")));
        }
        let bins = self.stft.bins();
        let (lo, hi) = (hz_to_mel(self.f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..self.bands + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (self.bands + 1) as f64))
            .collect();
        let mut fb = vec![0.0; bins * self.bands];
        for b in 0..self.bands {
            let (l, c, r) = (edges[b], edges[b + 1], edges[b + 2]);
            for k in 0..bins {
                let f = k as f64 * self.sample_rate / self.stft.fft_size as f64;
                let w = if f <= l || f >= r {
                    0.0
                } else if f <= c {
                    (f - l) / (c - l)
                } else {
                    (r - f) / (r - c)
                };
                fb[k * self.bands + b] = w;
            }
            if (0..bins).all(|k| fb[k * self.bands + b] == 0.0) {
                return Err(MetricError::InvalidConfig(format!(
                    "mel band {b} covers no FFT bin; use fewer bands or a larger FFT"
                )));
            }
        }
        Ok(Array::new(vec![bins, self.bands], fb)?)
    }
}

/// Overlapping frames `[frames, frame_length]` of a 1-D signal.
struct Framing {
    len: usize,
    frame: usize,
    hop: usize,
    count: usize,
}

impl LinearMap for Framing {
    fn name(&self) -> &'static str {
        "framing"
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, AutodiffError> {
        if input != [self.len] {
            return Err(AutodiffError::ShapeMismatch {
                op: "framing",
                lhs: vec![self.len],
                rhs: input.to_vec(),
            });
        }
        Ok(vec![self.count, self.frame])
    }

    fn apply(&self, input: &[f64], output: &mut [f64]) {
        for f in 0..self.count {
            output[f * self.frame..(f + 1) * self.frame].copy_from_slice(&input[f * self.hop..f * self.hop + self.frame]);
        }
    }

    fn apply_transpose(&self, cotangent: &[f64], grad_input: &mut [f64]) {
        for f in 0..self.count {
            for i in 0..self.frame {
                grad_input[f * self.hop + i] += cotangent[f * self.frame + i];
            }
        }
    }
}

/// Windowed real/imaginary DFT matrices, each `[frame_length, bins]`.
#[derive(Clone, Debug)]
struct DftBasis {
    config: StftConfig,
    re: Array,
    im: Array,
}

impl DftBasis {
    fn new(config: StftConfig) -> Result<Self, MetricError> {
        config.validate()?;
        let (l, bins, n) = (config.frame_length, config.bins(), config.fft_size as f64);
        let w = config.window.coefficients(l);
        let mut re = vec![0.0; l * bins];
        let mut im = vec![0.0; l * bins];
        for i in 0..l {
            for k in 0..bins {
                // Reduce the phase index modulo the FFT size to keep the
                // argument small.
                let ph = 2.0 * PI * ((i * k) % config.fft_size) as f64 / n;
                re[i * bins + k] = w[i] * ph.cos();
                im[i * bins + k] = -w[i] * ph.sin();
            }
        }
        Ok(Self {
            config,
            re: Array::new(vec![l, bins], re)?,
            im: Array::new(vec![l, bins], im)?,
        })
    }

    /// `(re, im)` nodes, each `[frames, bins]`.
    fn transform(&self, g: &mut Graph, x: NodeId) -> Result<(NodeId, NodeId), MetricError> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 1 {
            return Err(MetricError::InvalidConfig(format!("spectral metrics take 1-D clips, got {shape:?}")));
        }
        let count = self.config.frames(shape[0])?;
        let framing = Rc::new(Framing {
            len: shape[0],
            frame: self.config.frame_length,
            hop: self.config.hop,
            count,
        });
        let frames = g.linear(x, framing)?;
        let re = g.leaf(self.re.clone())?;
        let im = g.leaf(self.im.clone())?;
        Ok((g.matmul(frames, re)?, g.matmul(frames, im)?))
    }

    fn power(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, MetricError> {
        let (re, im) = self.transform(g, x)?;
        let r2 = g.square(re)?;
        let i2 = g.square(im)?;
        Ok(g.add(r2, i2)?)
    }

    fn magnitude(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, MetricError> {
        let p = self.power(g, x)?;
        let p = g.shift(p, MAG_EPS)?;
        Ok(g.sqrt(p)?)
    }
}

/// Magnitude spectrogram `[frames, bins]`, `√(re² + im² + 1e−12)`.
pub fn spectrogram(g: &mut Graph, x: NodeId, config: &StftConfig) -> Result<NodeId, MetricError> {
    DftBasis::new(*config)?.magnitude(g, x)
}

fn check_pair(g: &Graph, a: NodeId, b: NodeId) -> Result<(), MetricError> {
    let (sa, sb) = (g.value(a).shape(), g.value(b).shape());
    if sa != sb {
        return Err(MetricError::ShapeMismatch(sa.to_vec(), sb.to_vec()));
    }
    Ok(())
}

pub fn waveform_mse(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId, MetricError> {
    check_pair(g, a, b)?;
    let d = g.sub(a, b)?;
    let s = g.square(d)?;
    Ok(g.mean(s)?)
}

pub fn log_mel_mse(g: &mut Graph, a: NodeId, b: NodeId, config: &MelConfig) -> Result<NodeId, MetricError> {
    MetricSet::log_mel(config)?.distance_nodes(g, a, b)
}

pub fn mr_stft(g: &mut Graph, a: NodeId, b: NodeId, resolutions: &[StftConfig]) -> Result<NodeId, MetricError> {
    MetricSet::mr_stft(resolutions)?.distance_nodes(g, a, b)
}

/// Resolutions and mel settings for all metric kinds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub stft_resolutions: Vec<StftConfig>,
    pub mel: MelConfig,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            stft_resolutions: [64, 128, 256].into_iter().map(StftConfig::hann).collect(),
            mel: MelConfig::default(),
        }
    }
}

/// A metric with its DFT and filterbank matrices built once.
#[derive(Clone, Debug)]
pub struct Metric {
    kind: MetricKind,
    inner: MetricSet,
}

#[derive(Clone, Debug)]
enum MetricSet {
    Waveform,
    LogMel { basis: DftBasis, filterbank: Array, floor: f64 },
    MrStft(Vec<DftBasis>),
}

impl MetricSet {
    fn log_mel(config: &MelConfig) -> Result<Self, MetricError> {
        Ok(MetricSet::LogMel {
            basis: DftBasis::new(config.stft)?,
            filterbank: config.filterbank()?,
            floor: config.floor,
        })
    }

    fn mr_stft(resolutions: &[StftConfig]) -> Result<Self, MetricError> {
        if resolutions.is_empty() {
            return Err(MetricError::InvalidConfig("MR-STFT needs at least one resolution".into()));
        }
        Ok(MetricSet::MrStft(resolutions.iter().map(|c| DftBasis::new(*c)).collect::<Result<_, _>>()?))
    }

    fn distance_nodes(&self, g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId, MetricError> {
        check_pair(g, a, b)?;
        match self {
            MetricSet::Waveform => waveform_mse(g, a, b),
            MetricSet::LogMel { basis, filterbank, floor } => {
                let fb = g.leaf(filterbank.clone())?;
                let mut logs = Vec::with_capacity(2);
                for x in [a, b] {
                    let p = basis.power(g, x)?;
                    let mel = g.matmul(p, fb)?;
                    let mel = g.shift(mel, *floor)?;
                    logs.push(g.log(mel)?);
                }
                let d = g.sub(logs[0], logs[1])?;
                let s = g.square(d)?;
                Ok(g.mean(s)?)
            }
            MetricSet::MrStft(bases) => {
                let mut total: Option<NodeId> = None;
                for basis in bases {
                    let ma = basis.magnitude(g, a)?;
                    let mb = basis.magnitude(g, b)?;
                    // Spectral convergence with the mean of both Frobenius
                    // norms in the denominator, so the distance is symmetric.
                    let diff = g.sub(ma, mb)?;
                    let num = frobenius(g, diff)?;
                    let na = frobenius(g, ma)?;
                    let nb = frobenius(g, mb)?;
                    let den = g.add(na, nb)?;
                    let den = g.scale(den, 0.5)?;
                    let den = g.shift(den, SC_EPS)?;
                    let sc = g.div(num, den)?;
                    let la = g.log(ma)?;
                    let lb = g.log(mb)?;
                    let ld = g.sub(la, lb)?;
                    let ld = g.abs(ld)?;
                    let lm = g.mean(ld)?;
                    let term = g.add(sc, lm)?;
                    total = Some(match total {
                        Some(t) => g.add(t, term)?,
                        None => term,
                    });
                }
                Ok(total.expect("at least one resolution"))
            }
        }
    }
}

fn frobenius(g: &mut Graph, x: NodeId) -> Result<NodeId, MetricError> {
    let s = g.square(x)?;
    let s = g.sum(s)?;
    Ok(g.sqrt(s)?)
}

impl Metric {
    pub fn new(kind: MetricKind, config: &MetricConfig) -> Result<Self, MetricError> {
        let inner = match kind {
            MetricKind::WaveformMse => MetricSet::Waveform,
            MetricKind::LogMelMse => MetricSet::log_mel(&config.mel)?,
            MetricKind::MrStft => MetricSet::mr_stft(&config.stft_resolutions)?,
        };
        Ok(Self { kind, inner })
    }

    pub fn kind(&self) -> MetricKind {
        self.kind
    }

    /// Appends the scalar `D(a, b)` to the graph.
    pub fn distance(&self, g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId, MetricError> {
        self.inner.distance_nodes(g, a, b)
    }

    /// Numeric `D(a, b)`.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
        let mut g = Graph::new();
        let an = g.leaf(Array::from_vec(a.to_vec()))?;
        let bn = g.leaf(Array::from_vec(b.to_vec()))?;
        let d = self.distance(&mut g, an, bn)?;
        Ok(g.value(d).item())
    }

    /// Smallest clip length the metric accepts.
    pub fn min_len(&self) -> usize {
        match &self.inner {
            MetricSet::Waveform => 1,
            MetricSet::LogMel { basis, .. } => basis.config.frame_length,
            MetricSet::MrStft(b) => b.iter().map(|b| b.config.frame_length).max().unwrap_or(1),
        }
    }
}
