//! Checkpoints: a JSON manifest next to a binary blob of named tensors.
//!
//! Blob layout, repeated per tensor, little-endian: u32 name length, name
//! bytes (UTF-8), u32 rank, rank × u32 dims, f32 data.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LayerSpec, ScalingConfig, TrainingRecord, WeakLearner};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WEAK_FORMAT: &str = "aens-weak/1";

pub fn encode_blob<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_blob(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor<f32>)>, String> {
    let mut tensors = Vec::new();
    let mut cursor = 0usize;
    while cursor < bytes.len() {
        let read_u32 = |at: &mut usize| -> std::result::Result<usize, String> {
            let b = bytes
                .get(*at..*at + 4)
                .ok_or_else(|| format!("blob truncated at byte {at}"))?;
            *at += 4;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
        };
        let name_len = read_u32(&mut cursor)?;
        let name = bytes
            .get(cursor..cursor + name_len)
            .ok_or_else(|| format!("blob truncated in a tensor name at byte {cursor}"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| "tensor name is not UTF-8".to_string())?;
        cursor += name_len;
        let rank = read_u32(&mut cursor)?;
        let dims = (0..rank)
            .map(|_| read_u32(&mut cursor))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let len: usize = dims.iter().product();
        let raw = bytes
            .get(cursor..cursor + 4 * len)
            .ok_or_else(|| format!("blob truncated in tensor {name:?}"))?;
        cursor += 4 * len;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| format!("tensor {name:?}: {e}"))?;
        tensors.push((name, t));
    }
    Ok(tensors)
}

/// SHA-256 over the blob encoding of `tensors`, hex encoded.
pub fn checksum<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> String {
    let digest = Sha256::digest(encode_blob(tensors));
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        write!(s, "{b:02x}").expect("writing to a String");
        s
    })
}

/// Checksum of the extractor tensors only.
pub fn extractor_checksum(model: &WeakLearner) -> String {
    let names = extractor_names(model.extractor.len());
    checksum(names.iter().map(String::as_str).zip(&model.extractor))
}

pub(crate) fn extractor_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("extractor.{i}")).collect()
}

/// Path of the blob that belongs to a manifest: same stem, `.bin`.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::load(path, e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakManifest {
    pub format: String,
    pub architecture: Vec<LayerSpec>,
    pub scaling: ScalingConfig,
    pub input_size: (usize, usize),
    pub feature_dim: usize,
    pub classes: usize,
    pub frozen: bool,
    pub has_head: bool,
    pub seed: u64,
    /// Bag the learner was trained on.
    pub subset: usize,
    pub history: TrainingRecord,
    /// Accuracy on the held-out validation split, used to rank learners.
    pub validation_accuracy: Option<f64>,
    pub blob: String,
    pub checksum: String,
}

fn named_tensors(model: &WeakLearner) -> Vec<(String, &Tensor<f32>)> {
    let mut named: Vec<(String, &Tensor<f32>)> = extractor_names(model.extractor.len())
        .into_iter()
        .zip(&model.extractor)
        .collect();
    if let Some([w, b]) = &model.head {
        named.push(("head.weight".into(), w));
        named.push(("head.bias".into(), b));
    }
    named
}

pub struct WeakMeta {
    pub seed: u64,
    pub subset: usize,
    pub history: TrainingRecord,
    pub validation_accuracy: Option<f64>,
}

pub fn save_weak(model: &WeakLearner, meta: WeakMeta, manifest_path: &Path) -> Result<WeakManifest> {
    let named = named_tensors(model);
    let blob = encode_blob(named.iter().map(|(n, t)| (n.as_str(), *t)));
    let blob_file = blob_path(manifest_path);
    let manifest = WeakManifest {
        format: WEAK_FORMAT.into(),
        architecture: model.architecture.clone(),
        scaling: model.scaling,
        input_size: model.input_size,
        feature_dim: model.feature_dim,
        classes: model.classes,
        frozen: model.frozen,
        has_head: model.head.is_some(),
        seed: meta.seed,
        subset: meta.subset,
        history: meta.history,
        validation_accuracy: meta.validation_accuracy,
        blob: blob_file
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        checksum: checksum(named.iter().map(|(n, t)| (n.as_str(), *t))),
    };
    write_file(&blob_file, &blob)?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(manifest_path, json.as_bytes())?;
    Ok(manifest)
}

pub fn load_weak(manifest_path: &Path) -> Result<(WeakLearner, WeakManifest)> {
    let text = read_file(manifest_path)?;
    let manifest: WeakManifest =
        serde_json::from_slice(&text).map_err(|e| Error::load(manifest_path, format!("bad manifest: {e}")))?;
    if manifest.format != WEAK_FORMAT {
        return Err(Error::load(
            manifest_path,
            format!("expected format {WEAK_FORMAT}, found {}", manifest.format),
        ));
    }
    let blob_file = manifest_path.with_file_name(&manifest.blob);
    let tensors = decode_blob(&read_file(&blob_file)?).map_err(|r| Error::load(&blob_file, r))?;

    let expected: Vec<Vec<usize>> = manifest.architecture.iter().flat_map(LayerSpec::param_shapes).collect();
    let mut extractor = Vec::with_capacity(expected.len());
    let mut rest = tensors.into_iter();
    for (i, shape) in expected.iter().enumerate() {
        match rest.next() {
            Some((name, t)) if name == format!("extractor.{i}") && t.shape() == shape.as_slice() => extractor.push(t),
            other => {
                return Err(Error::load(
                    &blob_file,
                    format!(
                        "expected extractor.{i} of shape {shape:?}, found {:?}",
                        other.map(|(n, t)| (n, t.shape().to_vec()))
                    ),
                ))
            }
        }
    }
    let head = match (manifest.has_head, rest.next(), rest.next()) {
        (false, None, None) => None,
        (true, Some((wn, w)), Some((bn, b)))
            if wn == "head.weight"
                && bn == "head.bias"
                && w.shape() == [manifest.classes, manifest.feature_dim]
                && b.shape() == [manifest.classes] =>
        {
            Some([w, b])
        }
        _ => return Err(Error::load(&blob_file, "head tensors do not match the manifest")),
    };
    if rest.next().is_some() {
        return Err(Error::load(&blob_file, "unexpected trailing tensors"));
    }
    let model = WeakLearner {
        architecture: manifest.architecture.clone(),
        scaling: manifest.scaling,
        input_size: manifest.input_size,
        feature_dim: manifest.feature_dim,
        classes: manifest.classes,
        extractor,
        head,
        frozen: manifest.frozen,
    };
    let named = named_tensors(&model);
    if checksum(named.iter().map(|(n, t)| (n.as_str(), *t))) != manifest.checksum {
        return Err(Error::load(&blob_file, "parameter checksum mismatch"));
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_scaled_cnn, eff_tiny_base};

    #[test]
    fn blob_round_trip_is_bit_exact() {
        let a = Tensor::new(vec![2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25e-7]).unwrap();
        let b = Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let bytes = encode_blob([("a", &a), ("bias", &b)]);
        let back = decode_blob(&bytes).unwrap();
        assert_eq!(back[0].0, "a");
        assert_eq!(back[1].0, "bias");
        for (x, y) in back[0].1.data().iter().zip(a.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(back[1].1, b);
        assert!(decode_blob(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn weak_checkpoint_round_trip() {
        let model = build_scaled_cnn(&eff_tiny_base(), (32, 32), ScalingConfig::default(), 4, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weak_0.json");
        let meta = WeakMeta {
            seed: 3,
            subset: 0,
            history: TrainingRecord::default(),
            validation_accuracy: Some(0.5),
        };
        save_weak(&model, meta, &path).unwrap();
        assert!(dir.path().join("weak_0.bin").exists());
        let (back, manifest) = load_weak(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(manifest.seed, 3);

        let stripped = model.strip_head_and_freeze();
        let path2 = dir.path().join("frozen.json");
        let meta = WeakMeta {
            seed: 3,
            subset: 1,
            history: TrainingRecord::default(),
            validation_accuracy: None,
        };
        save_weak(&stripped, meta, &path2).unwrap();
        assert_eq!(load_weak(&path2).unwrap().0, stripped);
    }

    #[test]
    fn missing_or_tampered_files_are_load_errors() {
        let model = build_scaled_cnn(&eff_tiny_base(), (32, 32), ScalingConfig::default(), 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.json");
        match load_weak(&missing) {
            Err(Error::Load { path, .. }) => assert_eq!(path, missing),
            other => panic!("expected load error, got {other:?}"),
        }

        let path = dir.path().join("w.json");
        let meta = WeakMeta {
            seed: 0,
            subset: 0,
            history: TrainingRecord::default(),
            validation_accuracy: None,
        };
        save_weak(&model, meta, &path).unwrap();
        let blob = dir.path().join("w.bin");
        let mut bytes = std::fs::read(&blob).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&blob, bytes).unwrap();
        assert!(matches!(load_weak(&path), Err(Error::Load { .. })));
    }
}
