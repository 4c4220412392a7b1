//! Ensemble checkpoints: the combination layer plus references to the weak
//! checkpoints whose extractors it combines.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AdaptiveEnsemble, FineTuneRecord, LinearHead};
use crate::error::{Error, Result};
use crate::model::checkpoint::{blob_path, checksum, decode_blob, encode_blob, load_weak, read_file, write_file};
use crate::tensor::Tensor;

pub const ENSEMBLE_FORMAT: &str = "aens-ensemble/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub format: String,
    /// Weak checkpoint manifests, relative to this manifest when possible.
    pub members: Vec<String>,
    pub extractor_checksums: Vec<String>,
    pub feature_dims: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
    pub record: FineTuneRecord,
    pub blob: String,
    pub checksum: String,
}

fn relative_to(path: &Path, base: &Path) -> String {
    let base_dir = base.parent().unwrap_or(Path::new(""));
    path.strip_prefix(base_dir)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

fn resolve(member: &str, manifest: &Path) -> PathBuf {
    let p = Path::new(member);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new("")).join(p)
    }
}

fn head_tensors(head: &LinearHead) -> [(&'static str, &Tensor<f32>); 2] {
    [("combination.weight", &head.weight), ("combination.bias", &head.bias)]
}

/// Writes the combination layer. `members[i]` is the weak checkpoint that
/// extractor `i` was loaded from.
pub fn save_ensemble(
    ens: &AdaptiveEnsemble,
    members: &[PathBuf],
    record: &FineTuneRecord,
    manifest_path: &Path,
) -> Result<EnsembleManifest> {
    if members.len() != ens.len() {
        return Err(crate::error::contract_err!(
            "{} member paths for {} extractors",
            members.len(),
            ens.len()
        ));
    }
    let blob_file = blob_path(manifest_path);
    let manifest = EnsembleManifest {
        format: ENSEMBLE_FORMAT.into(),
        members: members.iter().map(|m| relative_to(m, manifest_path)).collect(),
        extractor_checksums: ens.extractor_checksums(),
        feature_dims: ens.feature_dims(),
        classes: ens.classes(),
        seed: record.seed,
        record: record.clone(),
        blob: blob_file
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        checksum: checksum(head_tensors(&ens.combination)),
    };
    write_file(&blob_file, &encode_blob(head_tensors(&ens.combination)))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(manifest_path, json.as_bytes())?;
    Ok(manifest)
}

pub fn load_ensemble(manifest_path: &Path) -> Result<(AdaptiveEnsemble, EnsembleManifest)> {
    let text = read_file(manifest_path)?;
    let manifest: EnsembleManifest =
        serde_json::from_slice(&text).map_err(|e| Error::load(manifest_path, format!("bad manifest: {e}")))?;
    if manifest.format != ENSEMBLE_FORMAT {
        return Err(Error::load(
            manifest_path,
            format!("expected format {ENSEMBLE_FORMAT}, found {}", manifest.format),
        ));
    }
    let mut learners = Vec::with_capacity(manifest.members.len());
    for (i, member) in manifest.members.iter().enumerate() {
        let path = resolve(member, manifest_path);
        let (learner, _) = load_weak(&path)?;
        let learner = learner.strip_head_and_freeze();
        let sum = crate::model::checkpoint::extractor_checksum(&learner);
        if manifest.extractor_checksums.get(i) != Some(&sum) {
            return Err(Error::load(
                &path,
                "extractor differs from the one the ensemble was trained on",
            ));
        }
        learners.push(learner);
    }

    let blob_file = manifest_path.with_file_name(&manifest.blob);
    let mut tensors = decode_blob(&read_file(&blob_file)?).map_err(|r| Error::load(&blob_file, r))?;
    let (Some((bn, bias)), Some((wn, weight)), true) = (tensors.pop(), tensors.pop(), tensors.is_empty()) else {
        return Err(Error::load(&blob_file, "expected exactly a weight and a bias"));
    };
    if wn != "combination.weight" || bn != "combination.bias" {
        return Err(Error::load(&blob_file, format!("unexpected tensors {wn:?}, {bn:?}")));
    }
    let head = LinearHead { weight, bias };
    if checksum(head_tensors(&head)) != manifest.checksum {
        return Err(Error::load(&blob_file, "parameter checksum mismatch"));
    }
    let ens = AdaptiveEnsemble::from_parts(learners, head).map_err(|e| Error::load(manifest_path, e.to_string()))?;
    Ok((ens, manifest))
}
