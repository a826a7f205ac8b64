//! Dataset directories and parameter checkpoints.
//!
//! A dataset directory holds `meta.json` and `samples/NNNN.img.dsct`,
//! `samples/NNNN.msk.dsct`. A checkpoint is one file:
//!
//! ```text
//! "DSCK" | version u8 | manifest length u64 LE | manifest JSON | tensor blobs
//! ```
//!
//! The manifest records each parameter's name, byte offset and length
//! within the blob section, dtype and shape, plus the config hash, seed
//! and step. Blobs are ordinary tensor-file encodings.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synth::{Mask, SegSample, SynthConfig};
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::{decode_tensor, encode_tensor, read_tensor, write_tensor};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSCK";
pub const CHECKPOINT_VERSION: u8 = 1;

fn sample_path(dir: &Path, i: usize, kind: &str) -> std::path::PathBuf {
    dir.join("samples").join(format!("{i:04}.{kind}.dsct"))
}

/// Writes `samples` and `meta.json` under `dir`, returning the written
/// paths relative to `dir`.
pub fn write_dataset<T: Scalar>(dir: &Path, meta: &SynthConfig, samples: &[SegSample<T>]) -> Result<Vec<String>> {
    fs::create_dir_all(dir.join("samples"))?;
    let mut written = Vec::with_capacity(2 * samples.len() + 1);
    for (i, s) in samples.iter().enumerate() {
        write_tensor(sample_path(dir, i, "img"), &s.image)?;
        write_tensor(sample_path(dir, i, "msk"), &s.mask.to_tensor::<f32>())?;
        written.push(format!("samples/{i:04}.img.dsct"));
        written.push(format!("samples/{i:04}.msk.dsct"));
    }
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(meta)?)?;
    written.push("meta.json".into());
    Ok(written)
}

pub fn read_dataset<T: Scalar>(dir: &Path) -> Result<(SynthConfig, Vec<SegSample<T>>)> {
    let meta: SynthConfig = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    let mut samples = Vec::with_capacity(meta.n);
    for i in 0..meta.n {
        let image = read_tensor::<T>(sample_path(dir, i, "img"))?;
        let mask = Mask::from_tensor(&read_tensor::<f32>(sample_path(dir, i, "msk"))?)?;
        let want: &[usize] = &[1, meta.h, meta.w];
        if image.shape() != want || (mask.h, mask.w) != (meta.h, meta.w) {
            return Err(Error::ShapeMismatch(format!(
                "sample {i}: image {:?}, mask {}x{}, meta {}x{}",
                image.shape(),
                mask.h,
                mask.w,
                meta.h,
                meta.w
            )));
        }
        mask.check_classes(meta.k)?;
        samples.push(SegSample { image, mask });
    }
    Ok((meta, samples))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub offset: u64,
    pub length: u64,
    pub dtype: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Hex SHA-256 of the canonical model config JSON.
    pub config_hash: String,
    pub seed: u64,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    meta: CheckpointMeta,
    entries: Vec<ManifestEntry>,
}

pub fn config_hash(canonical_json: &[u8]) -> String {
    hex::encode(Sha256::digest(canonical_json))
}

pub fn encode_checkpoint<T: Scalar>(params: &[(String, Tensor<T>)], meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut blobs = Vec::new();
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params {
        let bytes = encode_tensor(t);
        entries.push(ManifestEntry {
            name: name.clone(),
            offset: blobs.len() as u64,
            length: bytes.len() as u64,
            dtype: T::DTYPE.name().to_string(),
            shape: t.shape().to_vec(),
        });
        blobs.extend(bytes);
    }
    let manifest = serde_json::to_vec(&Manifest {
        meta: meta.clone(),
        entries,
    })?;
    let mut out = Vec::with_capacity(13 + manifest.len() + blobs.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend(manifest);
    out.extend(blobs);
    Ok(out)
}

fn need(bytes: &[u8], end: usize) -> Result<()> {
    if bytes.len() < end {
        Err(Error::TruncatedPayload {
            expected: end,
            found: bytes.len(),
        })
    } else {
        Ok(())
    }
}

/// Decodes a checkpoint, converting every tensor to `T`.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(BTreeMap<String, Tensor<T>>, CheckpointMeta)> {
    need(bytes, 13)?;
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(Error::ManifestMismatch(format!("unsupported checkpoint version {}", bytes[4])));
    }
    let len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    need(bytes, 13 + len)?;
    let manifest: Manifest = serde_json::from_slice(&bytes[13..13 + len])?;
    let blobs = &bytes[13 + len..];
    let mut params = BTreeMap::new();
    for e in &manifest.entries {
        let (start, end) = (e.offset as usize, (e.offset + e.length) as usize);
        if end > blobs.len() {
            return Err(Error::TruncatedPayload {
                expected: 13 + len + end,
                found: bytes.len(),
            });
        }
        let (t, used) = decode_tensor::<T>(&blobs[start..end])?;
        if used != end - start || !t.shape().eq(&e.shape[..]) {
            return Err(Error::ManifestMismatch(format!("entry {} does not match its blob", e.name)));
        }
        if DType::F32.name() != e.dtype && DType::F64.name() != e.dtype {
            return Err(Error::ManifestMismatch(format!("entry {} has dtype {}", e.name, e.dtype)));
        }
        if params.insert(e.name.clone(), t).is_some() {
            return Err(Error::ManifestMismatch(format!("duplicate entry {}", e.name)));
        }
    }
    Ok((params, manifest.meta))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &[(String, Tensor<T>)], meta: &CheckpointMeta) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode_checkpoint(params, meta)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(BTreeMap<String, Tensor<T>>, CheckpointMeta)> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::rng::CounterRng;
    use crate::data::synth::synth_dataset;
    use crate::params::{from_named, initialize, named_tensors};
    use crate::unet::UNetConfig;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            config_hash: config_hash(b"{}"),
            seed: 3,
            step: 17,
        }
    }

    #[test]
    fn checkpoint_round_trip_bitwise() {
        let cfg = UNetConfig {
            channels: vec![4, 8],
            ..UNetConfig::default()
        };
        let p = initialize(&cfg.template::<f32>().unwrap(), 5);
        let named = named_tensors(&p);
        let bytes = encode_checkpoint(&named, &meta()).unwrap();
        let (back, m) = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(m, meta());
        let rebuilt = from_named(&p, &back).unwrap();
        for ((_, a), (_, b)) in named_tensors(&rebuilt).iter().zip(&named) {
            assert!(a.bitwise_eq(b));
        }
        assert_eq!(encode_checkpoint(&named_tensors(&rebuilt), &meta()).unwrap(), bytes);
    }

    #[test]
    fn other_widths_mismatch() {
        let small = UNetConfig {
            channels: vec![4, 8],
            ..UNetConfig::default()
        };
        let wide = UNetConfig {
            channels: vec![6, 8],
            ..UNetConfig::default()
        };
        let bytes = encode_checkpoint(&named_tensors(&small.template::<f64>().unwrap()), &meta()).unwrap();
        let (named, _) = decode_checkpoint::<f64>(&bytes).unwrap();
        assert!(matches!(from_named(&wide.template::<f64>().unwrap(), &named), Err(Error::ManifestMismatch(_))));
    }

    #[test]
    fn truncation_and_magic() {
        let t = CounterRng::new(1).uniform_tensor::<f64>(&[3, 4], -1.0, 1.0);
        let bytes = encode_checkpoint(&[("a".into(), t.clone()), ("b".into(), t)], &meta()).unwrap();
        for cut in [3, 10, 40, bytes.len() - 1] {
            assert!(
                matches!(decode_checkpoint::<f64>(&bytes[..cut]), Err(Error::TruncatedPayload { .. })),
                "cut {cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint::<f64>(&bad), Err(Error::BadMagic(_))));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            seed: 9,
            n: 3,
            h: 16,
            w: 16,
            k: 3,
            scale_mix: 0.5,
        };
        let samples = synth_dataset::<f64>(&cfg).unwrap();
        let files = write_dataset(dir.path(), &cfg, &samples).unwrap();
        assert_eq!(files.len(), 7);
        assert!(dir.path().join("samples/0002.msk.dsct").exists());
        let (meta, back) = read_dataset::<f64>(dir.path()).unwrap();
        assert_eq!(meta, cfg);
        assert_eq!(back, samples);
    }
}
