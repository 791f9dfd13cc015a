//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic        4 bytes  "LSAP"
//! version      u32
//! desc_len     u32
//! descriptor   desc_len bytes of UTF-8 JSON (ArchDescriptor)
//! weight_count u64
//! weights      weight_count × f64
//! ```

use std::fs;
use std::path::Path;

use super::mlp::{ArchDescriptor, MlpDenoiser};
use super::DenoiserError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LSAP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(model: &MlpDenoiser) -> Vec<u8> {
    let desc = model.arch().to_text();
    let flat = model.to_flat();
    let mut out = Vec::with_capacity(20 + desc.len() + 8 * flat.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc.as_bytes());
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for w in flat {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DenoiserError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            DenoiserError::Format(format!("truncated checkpoint while reading {what}"))
        })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }
}

pub fn decode(bytes: &[u8]) -> Result<MlpDenoiser, DenoiserError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(DenoiserError::Format("bad magic (not an LSAP checkpoint)".into()));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(DenoiserError::Format(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let desc_len = u32::from_le_bytes(r.take(4, "descriptor length")?.try_into().unwrap()) as usize;
    let desc = std::str::from_utf8(r.take(desc_len, "descriptor")?)
        .map_err(|_| DenoiserError::Format("descriptor is not UTF-8".into()))?;
    let arch: ArchDescriptor = serde_json::from_str(desc)
        .map_err(|e| DenoiserError::Format(format!("bad descriptor: {e}")))?;
    let count = u64::from_le_bytes(r.take(8, "weight count")?.try_into().unwrap()) as usize;
    if count != arch.param_count() {
        return Err(DenoiserError::Format(format!(
            "weight count {count} does not match descriptor shapes ({})",
            arch.param_count()
        )));
    }
    let raw = r.take(count.saturating_mul(8), "weights")?;
    if r.pos != bytes.len() {
        return Err(DenoiserError::Format("trailing bytes after weights".into()));
    }
    let flat: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MlpDenoiser::from_flat(arch, &flat)
}

pub fn save_checkpoint(model: &MlpDenoiser, path: &Path) -> Result<(), DenoiserError> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MlpDenoiser, DenoiserError> {
    decode(&fs::read(path)?)
}

/// Loads and verifies the checkpoint was written for `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ArchDescriptor) -> Result<MlpDenoiser, DenoiserError> {
    let model = load_checkpoint(path)?;
    if model.arch() != expected {
        return Err(DenoiserError::ArchitectureMismatch {
            expected: expected.to_text(),
            found: model.arch().to_text(),
        });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::mlp::{HiddenActivation, Parameterization};

    fn model() -> MlpDenoiser {
        let arch = ArchDescriptor {
            input_dim: 8,
            hidden: vec![4, 4],
            activation: HiddenActivation::Silu,
            time_embed_dim: 4,
            parameterization: Parameterization::Sample,
        };
        MlpDenoiser::init(arch, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lsap");
        let m = model();
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let (a, b) = (m.to_flat(), back.to_flat());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(back.arch(), m.arch());
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let mut bytes = encode(&model());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(DenoiserError::Format(m)) if m.contains("magic")));
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode(&model());
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(DenoiserError::Format(m)) if m.contains("version")));
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = encode(&model());
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(DenoiserError::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn weight_count_must_match_shapes() {
        let mut bytes = encode(&model());
        let desc_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let at = 12 + desc_len;
        let count = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        bytes[at..at + 8].copy_from_slice(&(count - 1).to_le_bytes());
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(decode(&bytes), Err(DenoiserError::Format(m)) if m.contains("weight count")));
    }

    #[test]
    fn other_architecture_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lsap");
        let m = model();
        save_checkpoint(&m, &path).unwrap();
        let mut other = m.arch().clone();
        other.hidden = vec![8, 8];
        assert!(matches!(
            load_checkpoint_for(&path, &other),
            Err(DenoiserError::ArchitectureMismatch { .. })
        ));
        assert!(load_checkpoint_for(&path, m.arch()).is_ok());
    }
}
