//! Source-phase joint training: detector and attention network share the
//! backbone, which receives gradients from `L_det + lambda * L_att`.

use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{ImageRecord, NUM_JOINTS};
use crate::detector::{
    assign_targets, detection_loss, record_boxes, ClassIndex, DetTarget, Detector, DetectorHead, OptimConfig,
};
use crate::error::{Error, Result};
use crate::features::{Backbone, BackboneConfig, FeatureKind, FeatureSet, TupleFeaturizer, VERB_DIM};
use crate::grid::ImageDims;
use crate::images::ImageStore;
use crate::nn::{collect_tensors, sigmoid, NamedTensor, Parameterized};
use crate::rrpn::{attention_loss, attention_loss_grad_logits, gaussian_target, AttentionMap, Rrpn, RrpnConfig};

/// Architecture of everything trained in the source phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub rrpn: RrpnConfig,
    /// Width of the detector head's hidden 3x3 layer.
    pub head_hidden: usize,
    /// Pose bump sigma in grid cells.
    pub pose_sigma_cells: f64,
    pub features: FeatureSet,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            rrpn: RrpnConfig::default(),
            head_hidden: 64,
            pose_sigma_cells: 2.0,
            features: FeatureSet::ALL,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.rrpn.validate()?;
        if self.head_hidden == 0 {
            return Err(Error::config("model.head_hidden", "must be positive"));
        }
        if !(self.pose_sigma_cells > 0.0 && self.pose_sigma_cells.is_finite()) {
            return Err(Error::config("model.pose_sigma_cells", "must be positive"));
        }
        if self.features.is_empty() {
            return Err(Error::config("model.features", "at least one feature kind must be active"));
        }
        let g = self.backbone.grid();
        if g.rows % 2 != 0 {
            return Err(Error::config(
                "model.backbone",
                format!("feature grid {}x{} must have even sides", g.rows, g.cols),
            ));
        }
        Ok(())
    }

    /// Input width of the attention network (all kinds, zero-filled or not).
    pub fn volume_channels(&self) -> usize {
        self.backbone.out_channels() + NUM_JOINTS + VERB_DIM
    }
}

/// Backbone, detector head and attention network after the source phase.
#[derive(Debug, Clone)]
pub struct SourceModel {
    pub backbone: Backbone,
    pub head: DetectorHead,
    pub rrpn: Rrpn,
    pub classes: ClassIndex,
}

impl SourceModel {
    pub fn new(cfg: &ModelConfig, classes: ClassIndex, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&cfg.backbone, &mut rng)?;
        let head = DetectorHead::new(backbone.out_channels(), cfg.head_hidden, classes.len(), &mut rng);
        let rrpn = Rrpn::new(cfg.volume_channels(), &cfg.rrpn, &mut rng)?;
        Ok(Self {
            backbone,
            head,
            rrpn,
            classes,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            backbone: self.backbone.zeros_like(),
            head: self.head.zeros_like(),
            rrpn: self.rrpn.zeros_like(),
            classes: self.classes.clone(),
        }
    }

    /// The source detector view of this model.
    pub fn detector(&self) -> Detector {
        Detector {
            backbone: self.backbone.clone(),
            head: self.head.clone(),
            classes: self.classes.clone(),
        }
    }
}

impl Parameterized for SourceModel {
    fn tensors(&self) -> Vec<NamedTensor<'_>> {
        collect_tensors(vec![
            ("backbone", self.backbone.tensors()),
            ("head", self.head.tensors()),
            ("rrpn", self.rrpn.tensors()),
        ])
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.backbone.tensors_mut();
        v.extend(self.head.tensors_mut());
        v.extend(self.rrpn.tensors_mut());
        v
    }
}

#[derive(Debug, Clone)]
pub struct JointTraining<'a> {
    pub optim: &'a OptimConfig,
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLoss {
    pub cls: f64,
    pub loc: f64,
    /// Mean attention BCE; absent when `lambda == 0` (the network is not run).
    pub att: Option<f64>,
}

/// Loss of one image and its contribution to `grad`, scaled by `scale`.
///
/// The attention term averages over the image's boxed tuples.
pub fn joint_sample_grad(
    model: &SourceModel,
    featurizer: &TupleFeaturizer,
    record: &ImageRecord,
    image: &Array3<f64>,
    target: &DetTarget,
    lambda: f64,
    scale: f64,
    grad: &mut SourceModel,
) -> Result<JointLoss> {
    let (feats, bcache) = model.backbone.forward(image)?;
    let (pred, hcache) = model.head.forward(&feats)?;
    let (det, mut g) = detection_loss(&pred, target)?;
    g.logits *= scale;
    g.offsets *= scale;
    let mut dfeat = model.head.backward(&hcache, &g, &mut grad.head);

    let mut att = None;
    if lambda > 0.0 {
        let dims = ImageDims::new(record.width, record.height);
        let boxed: Vec<_> = record.tuples.iter().filter(|t| t.object_box.is_some()).collect();
        let mut sum = 0.0;
        for t in &boxed {
            let volume = featurizer.volume(&feats, record, t)?;
            let (logits, cache) = model.rrpn.forward_logits(&volume)?;
            let pred = AttentionMap {
                values: logits.mapv(sigmoid),
            };
            let target = gaussian_target(&t.object_box.expect("filtered"), dims, featurizer.grid)?;
            sum += attention_loss(&pred, &target)?;
            let w = lambda * scale / boxed.len() as f64;
            let dlogits = attention_loss_grad_logits(&pred, &target)? * w;
            let dvolume = model.rrpn.backward(&cache, &dlogits, &mut grad.rrpn);
            if volume.active.contains(FeatureKind::Image) {
                let r = volume.slice_range(FeatureKind::Image);
                dfeat += &dvolume.slice(s![r, .., ..]);
            }
        }
        if !boxed.is_empty() {
            att = Some(sum / boxed.len() as f64);
        }
    }
    model.backbone.backward(&bcache, &dfeat, &mut grad.backbone);
    Ok(JointLoss {
        cls: det.cls,
        loc: det.loc,
        att,
    })
}

/// Joint SGD over source images. Returns the model and a per-epoch mean
/// loss trace.
pub fn train_source(
    records: &[ImageRecord],
    images: &mut ImageStore,
    featurizer: &TupleFeaturizer,
    model: SourceModel,
    opts: &JointTraining<'_>,
) -> Result<(SourceModel, Vec<JointLoss>)> {
    if records.is_empty() || records.iter().all(|r| record_boxes(r).is_empty()) {
        return Err(Error::InvalidArgument("source training set is empty".into()));
    }
    if !(opts.lambda >= 0.0 && opts.lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", opts.lambda)));
    }
    let mut model = model;
    let grid = model.backbone.grid();
    if grid != featurizer.grid {
        return Err(Error::Shape(format!(
            "backbone grid {grid:?} differs from featurizer grid {:?}",
            featurizer.grid
        )));
    }
    let targets: Vec<DetTarget> = records
        .iter()
        .map(|r| assign_targets(&record_boxes(r), &model.classes, ImageDims::new(r.width, r.height), grid))
        .collect::<Result<_>>()?;

    let input = model.backbone.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (mut opt_b, mut opt_h, mut opt_r) = (opts.optim.sgd(), opts.optim.sgd(), opts.optim.sgd());
    let mut order: Vec<usize> = (0..records.len()).collect();
    let bs = opts.optim.batch_size.max(1);
    let mut trace = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let (mut cls, mut loc, mut att, mut att_n) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(bs) {
            let mut grad = model.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let img = images.tensor(&records[i], input)?;
                let l = joint_sample_grad(&model, featurizer, &records[i], &img, &targets[i], opts.lambda, scale, &mut grad)?;
                let total = l.cls + l.loc + opts.lambda * l.att.unwrap_or(0.0);
                if !total.is_finite() {
                    return Err(Error::Numerical(format!(
                        "source loss at epoch {epoch}, image `{}`: cls {} loc {} att {:?}",
                        records[i].image_id, l.cls, l.loc, l.att
                    )));
                }
                cls += l.cls;
                loc += l.loc;
                if let Some(a) = l.att {
                    att += a;
                    att_n += 1;
                }
            }
            opt_b.step(&mut model.backbone, &grad.backbone);
            opt_h.step(&mut model.head, &grad.head);
            if opts.lambda > 0.0 {
                opt_r.step(&mut model.rrpn, &grad.rrpn);
            }
        }
        let n = records.len() as f64;
        let mean = JointLoss {
            cls: cls / n,
            loc: loc / n,
            att: (att_n > 0).then(|| att / att_n as f64),
        };
        log::info!(
            "source epoch {}/{}: cls {:.4} loc {:.4} att {}",
            epoch + 1,
            opts.epochs,
            mean.cls,
            mean.loc,
            mean.att.map_or("-".to_string(), |a| format!("{a:.4}"))
        );
        trace.push(mean);
    }
    if !model.backbone.all_finite() || !model.rrpn.all_finite() {
        return Err(Error::Numerical("parameters after source training".into()));
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{BoundingBox, HoiTuple, Pose};
    use crate::features::EmbeddingTable;
    use crate::grid::GridDims;

    fn tiny() -> ModelConfig {
        ModelConfig {
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
            pose_sigma_cells: 1.0,
            features: FeatureSet::ALL,
        }
    }

    #[test]
    fn zero_lambda_leaves_attention_network_alone() {
        let cfg = tiny();
        let classes = ClassIndex(vec!["cup".into()]);
        let model = SourceModel::new(&cfg, classes, 3).unwrap();
        let before = model.rrpn.clone();
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_fn(32, 32, |x, y| image::Rgb([(x * 7) as u8, (y * 5) as u8, 90]));
        img.save(dir.path().join("a.png")).unwrap();
        let mut pose = Pose::empty();
        pose.0[4] = Some([10.0, 12.0]);
        let rec = ImageRecord {
            image_id: "a".into(),
            image_path: "a.png".into(),
            width: 32,
            height: 32,
            tuples: vec![HoiTuple {
                verb: "hold".into(),
                object_class: "cup".into(),
                object_box: Some(BoundingBox::new(4.0, 4.0, 20.0, 20.0)),
                keypoints: pose,
            }],
        };
        let mut table = EmbeddingTable::default();
        table.insert("hold", vec![0.1; VERB_DIM]).unwrap();
        let featurizer = TupleFeaturizer {
            grid: GridDims::square(8),
            pose_sigma_cells: 1.0,
            table,
            active: FeatureSet::ALL,
        };
        let optim = OptimConfig {
            lr: 0.01,
            ..OptimConfig::default()
        };
        let mut store = ImageStore::new(dir.path());
        let opts = JointTraining {
            optim: &optim,
            epochs: 2,
            lambda: 0.0,
            seed: 0,
        };
        let (after, trace) = train_source(&[rec.clone()], &mut store, &featurizer, model.clone(), &opts).unwrap();
        assert_eq!(after.rrpn, before);
        assert_ne!(after.backbone, model.backbone);
        assert!(trace.iter().all(|l| l.att.is_none()));

        let opts = JointTraining { lambda: 10.0, ..opts };
        let (after, trace) = train_source(&[rec], &mut store, &featurizer, model, &opts).unwrap();
        assert_ne!(after.rrpn, before);
        assert!(trace.iter().all(|l| l.att.is_some()));
    }
}
