//! Synthetic damped-sinusoid corpus with leakage-free splits.
//!
//! Each clip is `Σ_k a_k·sin(2π f_k t + φ_k)·e^{−d_k t}` plus a Gaussian
//! floor, peak-normalized to `[−1, 1]`. Parameters come from a seed derived
//! from the master seed and the clip id, so the corpus is a pure function of
//! its config and every split is drawn from the same distribution.
//!
//! Clip files are `"LSAC"`, `u32` version, `u64` length, `f64` sample rate,
//! then the samples, all little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffusion::{Clip, Split};
use crate::rng::SeedPolicy;

pub const CLIP_MAGIC: &[u8; 4] = b"LSAC";
pub const CLIP_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("clip file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("content hash mismatch for {id}")]
    HashMismatch { id: String },
    #[error("split violation: {}", .0.join("; "))]
    SplitViolation(Vec<String>),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub members: usize,
    pub dev_nonmembers: usize,
    pub eval_nonmembers: usize,
    pub clip_len: usize,
    pub sample_rate: f64,
    pub components: [usize; 2],
    pub frequency_hz: [f64; 2],
    /// Decay rates in 1/s.
    pub decay: [f64; 2],
    pub amplitude: [f64; 2],
    pub noise_floor: f64,
    /// Frequency range for eval nonmembers when set: a shifted-domain
    /// control.
    pub eval_frequency_hz: Option<[f64; 2]>,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            members: 64,
            dev_nonmembers: 64,
            eval_nonmembers: 64,
            clip_len: 2048,
            sample_rate: 16_000.0,
            components: [1, 4],
            frequency_hz: [80.0, 2000.0],
            decay: [0.5, 8.0],
            amplitude: [0.2, 1.0],
            noise_floor: 0.01,
            eval_frequency_hz: None,
            seed: 0,
        }
    }
}

fn range_ok(r: [f64; 2], lo: f64) -> bool {
    r[0].is_finite() && r[1].is_finite() && lo <= r[0] && r[0] <= r[1]
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidConfig(m));
        if self.clip_len == 0 || !(self.sample_rate > 0.0) {
            return bad("clip_len and sample_rate must be positive".into());
        }
        if self.components[0] > self.components[1] {
            return bad(format!("component range {:?}", self.components));
        }
        let nyquist = self.sample_rate / 2.0;
        for (name, r) in [("frequency_hz", Some(self.frequency_hz)), ("eval_frequency_hz", self.eval_frequency_hz)] {
            if let Some(r) = r {
                if !range_ok(r, 0.0) || r[1] > nyquist {
                    return bad(format!("{name} {r:?} must lie in [0, Nyquist={nyquist}]"));
                }
            }
        }
        if !range_ok(self.decay, 0.0) || !range_ok(self.amplitude, 0.0) || self.amplitude[1] <= 0.0 {
            return bad("decay and amplitude ranges must be nonnegative and ordered".into());
        }
        if !(self.noise_floor >= 0.0) {
            return bad("noise_floor must be ≥ 0".into());
        }
        if self.components[1] == 0 && self.noise_floor == 0.0 {
            return bad("zero components and zero noise floor produce silent clips".into());
        }
        if self.members == 0 || self.dev_nonmembers == 0 || self.eval_nonmembers == 0 {
            return bad("every split needs at least one clip".into());
        }
        Ok(())
    }

    pub fn split_sizes(&self) -> [(Split, usize); 3] {
        [
            (Split::Member, self.members),
            (Split::DevNonmember, self.dev_nonmembers),
            (Split::EvalNonmember, self.eval_nonmembers),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub amplitude: f64,
    pub frequency_hz: f64,
    pub phase: f64,
    pub decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub seed: u64,
    pub components: Vec<Component>,
    /// Peak before normalization.
    pub peak: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub file: String,
    pub sha256: String,
    pub params: GeneratorParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: CorpusConfig,
    pub clips: Vec<ManifestEntry>,
}

pub fn clip_id(split: Split, index: usize) -> String {
    format!("{}-{index:04}", split.as_str())
}

/// SHA-256 of the little-endian sample bytes, hex encoded.
pub fn content_hash(samples: &[f64]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn generate_clip(config: &CorpusConfig, split: Split, index: usize) -> (Clip, GeneratorParams) {
    let id = clip_id(split, index);
    let seed = SeedPolicy::new(config.seed).derive(&id, 0, "corpus", 0);
    let mut rng = crate::rng::GaussianStream::new(seed);
    let freq = match (split, config.eval_frequency_hz) {
        (Split::EvalNonmember, Some(r)) => r,
        _ => config.frequency_hz,
    };
    let count = config.components[0] + rng.below(config.components[1] - config.components[0] + 1);
    let components: Vec<Component> = (0..count)
        .map(|_| Component {
            amplitude: rng.uniform_range(config.amplitude[0], config.amplitude[1]),
            frequency_hz: rng.uniform_range(freq[0], freq[1]),
            phase: rng.uniform_range(0.0, 2.0 * std::f64::consts::PI),
            decay: rng.uniform_range(config.decay[0], config.decay[1]),
        })
        .collect();
    let mut samples: Vec<f64> = (0..config.clip_len)
        .map(|i| {
            let t = i as f64 / config.sample_rate;
            components
                .iter()
                .map(|c| c.amplitude * (2.0 * std::f64::consts::PI * c.frequency_hz * t + c.phase).sin() * (-c.decay * t).exp())
                .sum::<f64>()
                + config.noise_floor * rng.normal()
        })
        .collect();
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|s| *s /= peak);
    }
    let clip = Clip {
        id,
        samples,
        sample_rate: config.sample_rate,
        split,
    };
    (clip, GeneratorParams { seed, components, peak })
}

/// The whole corpus in memory, in manifest order (split, then index).
pub fn generate_corpus(config: &CorpusConfig) -> Result<(Manifest, Vec<Clip>), CorpusError> {
    config.validate()?;
    let mut entries = Vec::new();
    let mut clips = Vec::new();
    for (split, count) in config.split_sizes() {
        for i in 0..count {
            let (clip, params) = generate_clip(config, split, i);
            entries.push(ManifestEntry {
                id: clip.id.clone(),
                split,
                file: format!("clips/{}.lsac", clip.id),
                sha256: content_hash(&clip.samples),
                params,
            });
            clips.push(clip);
        }
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        config: config.clone(),
        clips: entries,
    };
    Ok((manifest, clips))
}

pub fn encode_clip(clip: &Clip) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * clip.samples.len());
    out.extend_from_slice(CLIP_MAGIC);
    out.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    out.extend_from_slice(&(clip.samples.len() as u64).to_le_bytes());
    out.extend_from_slice(&clip.sample_rate.to_le_bytes());
    for s in &clip.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// Samples and sample rate from a clip file's bytes.
pub fn decode_clip(bytes: &[u8], path: &str) -> Result<(Vec<f64>, f64), CorpusError> {
    let fail = |reason: &str| CorpusError::Format {
        path: path.to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 24 {
        return Err(fail("truncated header"));
    }
    if &bytes[..4] != CLIP_MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CLIP_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let rate = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if bytes.len() != 24 + n.saturating_mul(8) {
        return Err(fail("length does not match header"));
    }
    let samples = bytes[24..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((samples, rate))
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes clip files and `manifest.json` under `dir`.
pub fn write_corpus(dir: &Path, config: &CorpusConfig) -> Result<Manifest, CorpusError> {
    let (manifest, clips) = generate_corpus(config)?;
    let clip_dir = dir.join("clips");
    fs::create_dir_all(&clip_dir).map_err(io(&clip_dir))?;
    for (entry, clip) in manifest.clips.iter().zip(&clips) {
        let path = dir.join(&entry.file);
        fs::write(&path, encode_clip(clip)).map_err(io(&path))?;
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CorpusError::Manifest(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(io(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CorpusError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CorpusError::Manifest(e.to_string()))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(CorpusError::Manifest(format!("unsupported format version {}", manifest.format_version)));
    }
    Ok(manifest)
}

/// Loads every clip listed in the manifest, checking content hashes and
/// split disjointness.
pub fn load_corpus(dir: &Path) -> Result<(Manifest, Vec<Clip>), CorpusError> {
    let manifest = read_manifest(dir)?;
    verify_splits(&manifest)?;
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for e in &manifest.clips {
        let path: PathBuf = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(io(&path))?;
        let (samples, sample_rate) = decode_clip(&bytes, &path.display().to_string())?;
        if content_hash(&samples) != e.sha256 {
            return Err(CorpusError::HashMismatch { id: e.id.clone() });
        }
        clips.push(Clip {
            id: e.id.clone(),
            samples,
            sample_rate,
            split: e.split,
        });
    }
    Ok((manifest, clips))
}

/// Checks that ids are unique and no content hash appears twice.
pub fn verify_splits(manifest: &Manifest) -> Result<(), CorpusError> {
    let mut problems = Vec::new();
    let mut ids: BTreeMap<&str, Split> = BTreeMap::new();
    let mut hashes: BTreeMap<&str, (&str, Split)> = BTreeMap::new();
    for e in &manifest.clips {
        if ids.insert(&e.id, e.split).is_some() {
            problems.push(format!("duplicate id {}", e.id));
        }
        if let Some((other, split)) = hashes.insert(&e.sha256, (&e.id, e.split)) {
            if other != e.id {
                problems.push(format!(
                    "identical content in {other} ({}) and {} ({})",
                    split.as_str(),
                    e.id,
                    e.split.as_str()
                ));
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CorpusError::SplitViolation(problems))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            members: 4,
            dev_nonmembers: 3,
            eval_nonmembers: 3,
            clip_len: 256,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_hashes() {
        let (a, _) = generate_corpus(&small()).unwrap();
        let (b, _) = generate_corpus(&small()).unwrap();
        assert_eq!(a, b);
        let (c, _) = generate_corpus(&CorpusConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.clips[0].sha256, c.clips[0].sha256);
        assert!(verify_splits(&a).is_ok());
    }

    #[test]
    fn zero_components_is_pure_noise() {
        let cfg = CorpusConfig { components: [0, 0], ..small() };
        let (clip, p) = generate_clip(&cfg, Split::Member, 0);
        assert!(p.components.is_empty());
        assert!((p.peak - cfg.noise_floor * 3.0).abs() < cfg.noise_floor * 2.0);
        assert_eq!(clip.samples.iter().fold(0.0f64, |m, s| m.max(s.abs())), 1.0);
    }

    #[test]
    fn rms_is_in_unit_interval() {
        let cfg = CorpusConfig { members: 1000, ..small() };
        let (_, clips) = generate_corpus(&cfg).unwrap();
        for c in clips.iter().filter(|c| c.split == Split::Member) {
            let rms = (c.samples.iter().map(|s| s * s).sum::<f64>() / c.samples.len() as f64).sqrt();
            assert!(rms > 0.0 && rms <= 1.0, "{}: {rms}", c.id);
        }
    }

    #[test]
    fn duplicates_are_reported_with_both_ids() {
        let (mut m, _) = generate_corpus(&small()).unwrap();
        let dup = m.clips[0].sha256.clone();
        let last = m.clips.len() - 1;
        m.clips[last].sha256 = dup;
        match verify_splits(&m) {
            Err(CorpusError::SplitViolation(p)) => {
                assert!(p[0].contains("member-0000") && p[0].contains("eval-nonmember-0002"), "{p:?}");
            }
            other => panic!("{other:?}"),
        }
        let (mut m, _) = generate_corpus(&small()).unwrap();
        m.clips[1].id = m.clips[0].id.clone();
        assert!(matches!(verify_splits(&m), Err(CorpusError::SplitViolation(_))));
    }

    #[test]
    fn files_round_trip_and_detect_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_corpus(dir.path(), &small()).unwrap();
        let (m2, clips) = load_corpus(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(clips.len(), 10);
        let (_, fresh) = generate_corpus(&small()).unwrap();
        assert_eq!(clips, fresh);

        let path = dir.path().join(&m.clips[2].file);
        let mut bytes = fs::read(&path).unwrap();
        let k = bytes.len() - 3;
        bytes[k] ^= 1;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(CorpusError::HashMismatch { .. })));
        assert!(decode_clip(&bytes[..20], "x").is_err());
        assert!(decode_clip(b"NOPE00000000000000000000", "x").is_err());
    }

    #[test]
    fn config_violations() {
        assert!(CorpusConfig { components: [3, 1], ..small() }.validate().is_err());
        assert!(CorpusConfig { frequency_hz: [10.0, 9000.0], ..small() }.validate().is_err());
        assert!(CorpusConfig { components: [0, 0], noise_floor: 0.0, ..small() }.validate().is_err());
        assert!(CorpusConfig { members: 0, ..small() }.validate().is_err());
    }

    #[test]
    fn shifted_eval_range_applies_to_eval_only() {
        let cfg = CorpusConfig { eval_frequency_hz: Some([4000.0, 5000.0]), components: [2, 2], ..small() };
        let (_, pe) = generate_clip(&cfg, Split::EvalNonmember, 0);
        let (_, pm) = generate_clip(&cfg, Split::Member, 0);
        assert!(pe.components.iter().all(|c| c.frequency_hz >= 4000.0));
        assert!(pm.components.iter().all(|c| c.frequency_hz <= 2000.0));
    }
}
