//! Bank-building pipeline: iterate class-partitioned volumes through the
//! frozen encoder with all blocks dense (no memory active during capture),
//! collect the post-projection (key, value) tensors at each memorized layer
//! together with the image fingerprint, and write one read-only bank per
//! class.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bank::{write_bank, LayerKv, MemoryEntry};
use crate::encoder::{encode, EncoderWeights};
use crate::error::{Error, Result};
use crate::fusion::BlockConfig;
use crate::volume::Volume;

/// One class partition of the dataset: a class id, a human-readable label,
/// and the volumes whose activations will populate that class's bank.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassDatasetManifest {
    pub class_id: u32,
    #[serde(default)]
    pub label: String,
    pub volume_paths: Vec<PathBuf>,
}

impl ClassDatasetManifest {
    /// Loads a manifest from JSON. Relative volume paths resolve against the
    /// manifest file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: ClassDatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: format!("invalid manifest: {e}"),
            })?;
        if let Some(base) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            for volume in &mut manifest.volume_paths {
                if volume.is_relative() {
                    *volume = base.join(&*volume);
                }
            }
        }
        Ok(manifest)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SkippedVolume {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct BuildReport {
    pub class_id: u32,
    pub label: String,
    pub entries_written: u64,
    pub skipped: Vec<SkippedVolume>,
    pub bank_path: PathBuf,
    pub wall_time_secs: f64,
}

/// First 16 bytes of SHA-256 over the source path string: stable provenance
/// without storing paths in the binary format.
pub fn source_id_for_path(path: &Path) -> [u8; 16] {
    let digest = Sha256::digest(path.to_string_lossy().as_bytes());
    let mut id = [0u8; 16];
    id.copy_from_slice(&digest[..16]);
    id
}

fn capture_entry(
    path: &Path,
    class_id: u32,
    weights: &EncoderWeights,
) -> std::result::Result<MemoryEntry, String> {
    let volume = Volume::load(path).map_err(|e| e.to_string())?;
    // All-dense capture pass: k = 0, no bank.
    let dense_cfg = BlockConfig {
        k: 0,
        ..BlockConfig::default()
    };
    let output = encode(&volume, weights, None, &dense_cfg).map_err(|e| e.to_string())?;
    if output.fingerprint.is_degenerate {
        return Err("degenerate zero fingerprint".into());
    }
    let layers = weights
        .config
        .memorized_layer_ids()
        .iter()
        .map(|&layer| {
            let acts = &output.activations[layer as usize];
            LayerKv {
                keys: acts.keys.clone(),
                values: acts.values.clone(),
            }
        })
        .collect();
    Ok(MemoryEntry {
        fingerprint: output.fingerprint.values,
        layers,
        class_id,
        source_id: source_id_for_path(path),
    })
}

/// Builds one class bank. Volumes are encoded in parallel but entries land
/// in manifest order, so identical inputs and seed always produce
/// byte-identical banks. Unreadable or degenerate volumes are recorded and
/// skipped; a build that writes zero entries is a hard error.
pub fn build_bank(
    manifest: &ClassDatasetManifest,
    weights: &EncoderWeights,
    out_path: &Path,
) -> Result<BuildReport> {
    if manifest.volume_paths.is_empty() {
        return Err(Error::Config(format!(
            "manifest for class {} lists no volumes",
            manifest.class_id
        )));
    }
    if weights.config.memorized_layer_ids().is_empty() {
        return Err(Error::Config(
            "encoder config has no memorizing layers; nothing to capture".into(),
        ));
    }
    let start = Instant::now();
    let results: Vec<std::result::Result<MemoryEntry, String>> = manifest
        .volume_paths
        .par_iter()
        .map(|path| capture_entry(path, manifest.class_id, weights))
        .collect();

    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for (path, result) in manifest.volume_paths.iter().zip(results) {
        match result {
            Ok(entry) => entries.push(entry),
            Err(reason) => skipped.push(SkippedVolume {
                path: path.clone(),
                reason,
            }),
        }
    }
    if entries.is_empty() {
        return Err(Error::Config(format!(
            "no entries captured for class {} ({} volumes all skipped)",
            manifest.class_id,
            skipped.len()
        )));
    }
    let geometry = weights.config.bank_geometry();
    let written = write_bank(entries, &geometry, out_path)?;
    Ok(BuildReport {
        class_id: manifest.class_id,
        label: manifest.label.clone(),
        entries_written: written,
        skipped,
        bank_path: out_path.to_path_buf(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Outcome of one class in a multi-class build.
#[derive(Debug, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum ClassBuildOutcome {
    Ok(BuildReport),
    Failed { class_id: u32, error: String },
}

/// Builds one bank per manifest, named `class_<id>.msb` under `out_dir`.
/// Classes are independent: a failure in one is reported but does not abort
/// the others. Duplicate class ids are rejected before any work starts.
pub fn build_all(
    manifests: &[ClassDatasetManifest],
    weights: &EncoderWeights,
    out_dir: &Path,
) -> Result<Vec<ClassBuildOutcome>> {
    let mut seen = std::collections::HashSet::new();
    for m in manifests {
        if !seen.insert(m.class_id) {
            return Err(Error::Config(format!(
                "duplicate class_id {} across manifests",
                m.class_id
            )));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut outcomes = Vec::with_capacity(manifests.len());
    for manifest in manifests {
        let out_path = bank_path_for_class(out_dir, manifest.class_id);
        match build_bank(manifest, weights, &out_path) {
            Ok(report) => outcomes.push(ClassBuildOutcome::Ok(report)),
            Err(e) => outcomes.push(ClassBuildOutcome::Failed {
                class_id: manifest.class_id,
                error: e.to_string(),
            }),
        }
    }
    Ok(outcomes)
}

pub fn bank_path_for_class(out_dir: &Path, class_id: u32) -> PathBuf {
    out_dir.join(format!("class_{class_id}.msb"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::BankHandle;
    use crate::encoder::EncoderConfig;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            volume_dims: [16, 16, 16],
            patch_size: 8,
            d_model: 16,
            d_ff: 32,
            num_heads: 2,
            num_layers: 2,
            memorizing_layers: vec![1],
            seed: 7,
        }
    }

    fn write_volumes(dir: &Path, count: usize, seed0: u64) -> Vec<PathBuf> {
        (0..count)
            .map(|i| {
                let path = dir.join(format!("v{i}.vol"));
                Volume::random([16, 16, 16], seed0 + i as u64)
                    .unwrap()
                    .save(&path)
                    .unwrap();
                path
            })
            .collect()
    }

    #[test]
    fn single_volume_bank_has_expected_payload() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_volumes(dir.path(), 1, 100);
        let weights = EncoderWeights::init(&tiny_config()).unwrap();
        let manifest = ClassDatasetManifest {
            class_id: 3,
            label: "triples".into(),
            volume_paths: paths,
        };
        let out = dir.path().join("c3.msb");
        let report = build_bank(&manifest, &weights, &out).unwrap();
        assert_eq!(report.entries_written, 1);
        assert!(report.skipped.is_empty());
        let bank = BankHandle::open(&out).unwrap();
        // one memorized layer: payload = 2 * n_tokens * d_model f32 values
        assert_eq!(bank.header().payload_size(), 2 * 8 * 16 * 4);
        assert_eq!(bank.index()[0].class_id, 3);
    }

    #[test]
    fn rebuilding_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_volumes(dir.path(), 3, 200);
        let weights = EncoderWeights::init(&tiny_config()).unwrap();
        let manifest = ClassDatasetManifest {
            class_id: 1,
            label: String::new(),
            volume_paths: paths,
        };
        let out1 = dir.path().join("a.msb");
        let out2 = dir.path().join("b.msb");
        build_bank(&manifest, &weights, &out1).unwrap();
        build_bank(&manifest, &weights, &out2).unwrap();
        assert_eq!(std::fs::read(out1).unwrap(), std::fs::read(out2).unwrap());
    }

    #[test]
    fn self_retrieval_finds_own_entry_at_zero_distance() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_volumes(dir.path(), 4, 300);
        let weights = EncoderWeights::init(&tiny_config()).unwrap();
        let manifest = ClassDatasetManifest {
            class_id: 1,
            label: String::new(),
            volume_paths: paths.clone(),
        };
        let out = dir.path().join("c.msb");
        build_bank(&manifest, &weights, &out).unwrap();
        let bank = BankHandle::open(&out).unwrap();
        for (i, path) in paths.iter().enumerate() {
            let volume = Volume::load(path).unwrap();
            let output = encode(
                &volume,
                &weights,
                None,
                &BlockConfig {
                    k: 0,
                    ..BlockConfig::default()
                },
            )
            .unwrap();
            let hits = bank.knn_search(&output.fingerprint.values, 1).unwrap();
            assert_eq!(hits[0].entry_id, i as u64);
            assert!(hits[0].distance <= 1e-6);
        }
    }

    #[test]
    fn unreadable_volume_is_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = write_volumes(dir.path(), 2, 400);
        paths.push(dir.path().join("missing.vol"));
        let weights = EncoderWeights::init(&tiny_config()).unwrap();
        let manifest = ClassDatasetManifest {
            class_id: 1,
            label: String::new(),
            volume_paths: paths.clone(),
        };
        let out = dir.path().join("c.msb");
        let report = build_bank(&manifest, &weights, &out).unwrap();
        assert_eq!(report.entries_written, 2);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(
            report.entries_written as usize + report.skipped.len(),
            paths.len()
        );
    }

    #[test]
    fn all_volumes_unreadable_is_hard_error() {
        let dir = tempfile::tempdir().unwrap();
        let weights = EncoderWeights::init(&tiny_config()).unwrap();
        let manifest = ClassDatasetManifest {
            class_id: 1,
            label: String::new(),
            volume_paths: vec![dir.path().join("nope.vol")],
        };
        assert!(build_bank(&manifest, &weights, &dir.path().join("x.msb")).is_err());
    }

    #[test]
    fn build_all_partitions_by_class() {
        let dir = tempfile::tempdir().unwrap();
        let weights = EncoderWeights::init(&tiny_config()).unwrap();
        let manifests: Vec<ClassDatasetManifest> = (0..3)
            .map(|c| ClassDatasetManifest {
                class_id: c,
                label: format!("class {c}"),
                volume_paths: write_volumes(dir.path(), 2, 500 + 10 * c as u64),
            })
            .collect();
        let out_dir = dir.path().join("banks");
        let outcomes = build_all(&manifests, &weights, &out_dir).unwrap();
        assert_eq!(outcomes.len(), 3);
        let mut total = 0u64;
        for (c, outcome) in outcomes.iter().enumerate() {
            match outcome {
                ClassBuildOutcome::Ok(report) => {
                    let bank = BankHandle::open(&report.bank_path).unwrap();
                    assert!(bank.index().iter().all(|r| r.class_id == c as u32));
                    total += report.entries_written;
                }
                ClassBuildOutcome::Failed { .. } => panic!("build failed"),
            }
        }
        assert_eq!(total, 6);
    }

    #[test]
    fn build_all_rejects_duplicate_class_ids() {
        let dir = tempfile::tempdir().unwrap();
        let weights = EncoderWeights::init(&tiny_config()).unwrap();
        let m = ClassDatasetManifest {
            class_id: 1,
            label: String::new(),
            volume_paths: write_volumes(dir.path(), 1, 600),
        };
        let err = build_all(&[m.clone(), m], &weights, &dir.path().join("banks")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn build_all_empty_list_is_empty_report() {
        let dir = tempfile::tempdir().unwrap();
        let weights = EncoderWeights::init(&tiny_config()).unwrap();
        let outcomes = build_all(&[], &weights, &dir.path().join("banks")).unwrap();
        assert!(outcomes.is_empty());
    }

    #[test]
    fn one_class_failure_does_not_abort_others() {
        let dir = tempfile::tempdir().unwrap();
        let weights = EncoderWeights::init(&tiny_config()).unwrap();
        let good = ClassDatasetManifest {
            class_id: 1,
            label: String::new(),
            volume_paths: write_volumes(dir.path(), 1, 700),
        };
        let bad = ClassDatasetManifest {
            class_id: 2,
            label: String::new(),
            volume_paths: vec![dir.path().join("missing.vol")],
        };
        let outcomes = build_all(&[bad, good], &weights, &dir.path().join("banks")).unwrap();
        assert!(matches!(outcomes[0], ClassBuildOutcome::Failed { class_id: 2, .. }));
        assert!(matches!(outcomes[1], ClassBuildOutcome::Ok(_)));
    }

    #[test]
    fn manifest_paths_resolve_against_manifest_directory() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("data");
        std::fs::create_dir(&sub).unwrap();
        Volume::random([8, 8, 8], 1)
            .unwrap()
            .save(&sub.join("v.vol"))
            .unwrap();
        std::fs::write(
            sub.join("m.json"),
            r#"{"class_id": 1, "label": "x", "volume_paths": ["v.vol"]}"#,
        )
        .unwrap();
        let manifest = ClassDatasetManifest::load(&sub.join("m.json")).unwrap();
        assert_eq!(manifest.volume_paths, vec![sub.join("v.vol")]);
        assert!(manifest.volume_paths[0].is_file());
    }

    #[test]
    fn source_ids_are_stable_and_distinct() {
        let a = source_id_for_path(Path::new("a.vol"));
        let b = source_id_for_path(Path::new("b.vol"));
        assert_eq!(a, source_id_for_path(Path::new("a.vol")));
        assert_ne!(a, b);
    }
}
