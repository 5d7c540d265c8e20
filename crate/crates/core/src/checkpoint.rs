//! Parameter archives: a flat little-endian `f64` file plus a JSON manifest
//! naming every tensor, its shape and offset, and the run metadata needed to
//! rebuild the model. Both files are written atomically.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{ClassIndex, Detector, DetectorHead};
use crate::error::{Error, Result};
use crate::features::{Backbone, FeatureSet};
use crate::grid::GridDims;
use crate::nn::Parameterized;
use crate::rrpn::Rrpn;
use crate::training::{ModelConfig, SourceModel};
use crate::util::{read_json, sha256_hex, write_atomic, write_json};

pub const FORMAT: &str = "rrpn-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the archive, in values.
    pub offset: usize,
}

/// Run metadata stored alongside the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub grid: GridDims,
    pub active: FeatureSet,
    pub lambda: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub blocks: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    #[serde(flatten)]
    pub meta: CheckpointMeta,
    /// Archive file name, relative to the manifest.
    pub archive: String,
    /// SHA-256 of the archive bytes.
    pub sha256: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub values: Vec<f64>,
}

/// Manifest path for a checkpoint stem (`<stem>.json`).
pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

/// Write `<stem>.bin` and `<stem>.json`.
pub fn save_checkpoint(
    stem: &Path,
    meta: CheckpointMeta,
    blocks: &[(&str, &dyn Parameterized)],
) -> Result<CheckpointManifest> {
    let mut tensors = Vec::new();
    let mut bytes = Vec::new();
    let mut offset = 0;
    for (block, params) in blocks {
        for t in params.tensors() {
            tensors.push(TensorEntry {
                name: format!("{block}.{}", t.name),
                shape: t.shape.clone(),
                offset,
            });
            offset += t.data.len();
            for v in t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let archive = stem.with_extension("bin");
    let manifest = CheckpointManifest {
        format: FORMAT.to_string(),
        blocks: blocks.iter().map(|(b, _)| b.to_string()).collect(),
        tensors,
        meta,
        archive: archive
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", stem.display())))?,
        sha256: sha256_hex(&bytes),
    };
    write_atomic(&archive, &bytes)?;
    write_json(&manifest_path(stem), &manifest)?;
    Ok(manifest)
}

impl Checkpoint {
    /// Load from a manifest path, verifying the archive hash and layout.
    pub fn load(manifest: &Path) -> Result<Self> {
        let m: CheckpointManifest = read_json(manifest)?;
        if m.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format `{}`", m.format)));
        }
        let archive = manifest.with_file_name(&m.archive);
        let bytes = std::fs::read(&archive).map_err(|e| Error::io(&archive, e))?;
        let digest = sha256_hex(&bytes);
        if digest != m.sha256 {
            return Err(Error::Checkpoint(format!(
                "{}: hash {digest} does not match manifest {}",
                archive.display(),
                m.sha256
            )));
        }
        if bytes.len() % 8 != 0 {
            return Err(Error::Checkpoint(format!("{}: truncated archive", archive.display())));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut expect = 0;
        for t in &m.tensors {
            if t.offset != expect {
                return Err(Error::Checkpoint(format!("tensor `{}` at unexpected offset", t.name)));
            }
            expect += t.shape.iter().product::<usize>();
        }
        if expect != values.len() {
            return Err(Error::Checkpoint(format!(
                "manifest describes {expect} values, archive holds {}",
                values.len()
            )));
        }
        Ok(Self { manifest: m, values })
    }

    /// Copy the stored values of `block` into `params`. Names and shapes
    /// must match exactly.
    pub fn restore(&self, block: &str, params: &mut dyn Parameterized) -> Result<()> {
        let prefix = format!("{block}.");
        let entries: Vec<&TensorEntry> = self
            .manifest
            .tensors
            .iter()
            .filter(|t| t.name.starts_with(&prefix))
            .collect();
        let expected: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|t| (format!("{prefix}{}", t.name), t.shape))
            .collect();
        if entries.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "block `{block}`: checkpoint has {} tensors, model expects {}",
                entries.len(),
                expected.len()
            )));
        }
        for (e, (name, shape)) in entries.iter().zip(&expected) {
            if &e.name != name || &e.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: checkpoint `{}` {:?}, model `{name}` {shape:?}",
                    e.name, e.shape
                )));
            }
        }
        for (dst, e) in params.tensors_mut().into_iter().zip(entries) {
            let n = dst.len();
            dst.copy_from_slice(&self.values[e.offset..e.offset + n]);
        }
        Ok(())
    }

    fn require_block(&self, block: &str) -> Result<()> {
        if self.manifest.blocks.iter().any(|b| b == block) {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("checkpoint lacks block `{block}`")))
        }
    }

    fn skeleton(&self) -> Result<(Backbone, DetectorHead, ClassIndex, ChaCha8Rng)> {
        let meta = &self.manifest.meta;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let backbone = Backbone::new(&meta.model.backbone, &mut rng)?;
        let classes = ClassIndex(meta.classes.clone());
        let head = DetectorHead::new(backbone.out_channels(), meta.model.head_hidden, classes.len(), &mut rng);
        Ok((backbone, head, classes, rng))
    }

    pub fn source_model(&self) -> Result<SourceModel> {
        for b in ["backbone", "head", "rrpn"] {
            self.require_block(b)?;
        }
        let (mut backbone, mut head, classes, mut rng) = self.skeleton()?;
        let model = &self.manifest.meta.model;
        let mut rrpn = Rrpn::new(model.volume_channels(), &model.rrpn, &mut rng)?;
        self.restore("backbone", &mut backbone)?;
        self.restore("head", &mut head)?;
        self.restore("rrpn", &mut rrpn)?;
        Ok(SourceModel {
            backbone,
            head,
            rrpn,
            classes,
        })
    }

    pub fn detector(&self) -> Result<Detector> {
        for b in ["backbone", "head"] {
            self.require_block(b)?;
        }
        let (mut backbone, mut head, classes, _) = self.skeleton()?;
        self.restore("backbone", &mut backbone)?;
        self.restore("head", &mut head)?;
        Ok(Detector {
            backbone,
            head,
            classes,
        })
    }
}

pub fn save_source_model(stem: &Path, model: &SourceModel, meta: CheckpointMeta) -> Result<CheckpointManifest> {
    save_checkpoint(
        stem,
        meta,
        &[("backbone", &model.backbone), ("head", &model.head), ("rrpn", &model.rrpn)],
    )
}

pub fn save_detector(stem: &Path, det: &Detector, meta: CheckpointMeta) -> Result<CheckpointManifest> {
    save_checkpoint(stem, meta, &[("backbone", &det.backbone), ("head", &det.head)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::BackboneConfig;
    use crate::rrpn::RrpnConfig;

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            grid: GridDims::square(8),
            active: FeatureSet::ALL,
            lambda: 10.0,
            seed: 7,
            model: ModelConfig {
                backbone: BackboneConfig {
                    input_size: 32,
                    channels: vec![4, 4, 4, 4, 4],
                    strides: vec![2, 2, 1, 1, 1],
                },
                rrpn: RrpnConfig {
                    encoder: vec![4, 4, 4],
                    decoder1: vec![4; 5],
                    decoder2: vec![4; 6],
                },
                head_hidden: 4,
                ..ModelConfig::default()
            },
            classes: vec!["cup".into(), "kite".into()],
        }
    }

    #[test]
    fn source_model_round_trip_is_bit_exact() {
        let m = meta();
        let model = SourceModel::new(&m.model, ClassIndex(m.classes.clone()), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("source");
        let manifest = save_source_model(&stem, &model, m.clone()).unwrap();
        let ck = Checkpoint::load(&manifest_path(&stem)).unwrap();
        assert_eq!(ck.manifest, manifest);
        let back = ck.source_model().unwrap();
        assert_eq!(back.backbone, model.backbone);
        assert_eq!(back.head, model.head);
        assert_eq!(back.rrpn, model.rrpn);
        assert!(ck.manifest.tensors.iter().any(|t| t.name.starts_with("rrpn.")));

        let det = ck.detector().unwrap();
        assert_eq!(det.backbone, model.backbone);
    }

    #[test]
    fn tampering_and_shape_mismatch_are_rejected() {
        let m = meta();
        let model = SourceModel::new(&m.model, ClassIndex(m.classes.clone()), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("s");
        save_source_model(&stem, &model, m.clone()).unwrap();

        let ck = Checkpoint::load(&manifest_path(&stem)).unwrap();
        let mut wide = m.model.clone();
        wide.backbone.channels = vec![4, 4, 4, 4, 6];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut other = Backbone::new(&wide.backbone, &mut rng).unwrap();
        assert!(matches!(ck.restore("backbone", &mut other), Err(Error::Checkpoint(_))));

        let bin = stem.with_extension("bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes[3] ^= 1;
        std::fs::write(&bin, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&manifest_path(&stem)), Err(Error::Checkpoint(_))));
    }
}
