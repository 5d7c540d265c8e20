//! Single-stage grid detector: one prediction per backbone cell carrying
//! class logits (background first) and distances to the four box edges.

use std::collections::BTreeSet;

use ndarray::{s, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{BoundingBox, ImageRecord};
use crate::error::{Error, Result};
use crate::features::{Backbone, BackboneConfig};
use crate::grid::{GridDims, ImageDims};
use crate::images::ImageStore;
use crate::metrics::overlap;
use crate::nn::{collect_tensors, ConvCache, ConvStack, Conv2d, NamedTensor, Parameterized, Sgd, StackCache};

/// Background logit bias at initialisation (most cells are background).
const BACKGROUND_PRIOR: f64 = 2.0;
/// Initial edge-distance prediction, in grid cells.
const OFFSET_PRIOR: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub object_class: String,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

/// Ordered class list; index 0 of the logits is background, class `k` sits
/// at logit `k + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassIndex(pub Vec<String>);

impl ClassIndex {
    pub fn new(classes: &BTreeSet<String>) -> Self {
        Self(classes.iter().cloned().collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn label_of(&self, class: &str) -> Result<usize> {
        self.0
            .iter()
            .position(|c| c == class)
            .map(|i| i + 1)
            .ok_or_else(|| Error::UnknownClass(class.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorHead {
    pub hidden: ConvStack,
    pub out: Conv2d,
    pub num_classes: usize,
}

impl DetectorHead {
    pub fn new<R: Rng>(in_channels: usize, hidden: usize, num_classes: usize, rng: &mut R) -> Self {
        let mut out = Conv2d::new(hidden, num_classes + 1 + 4, 1, 1, rng);
        out.bias[0] = BACKGROUND_PRIOR;
        out.bias.slice_mut(s![num_classes + 1..]).fill(OFFSET_PRIOR);
        Self {
            hidden: ConvStack::new(in_channels, &[(hidden, 3, 1)], true, rng),
            out,
            num_classes,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.zeros_like(),
            out: self.out.zeros_like(),
            num_classes: self.num_classes,
        }
    }
}

impl Parameterized for DetectorHead {
    fn tensors(&self) -> Vec<NamedTensor<'_>> {
        collect_tensors(vec![("hidden", self.hidden.tensors()), ("out", self.out.tensors())])
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.hidden.tensors_mut();
        v.extend(self.out.tensors_mut());
        v
    }
}

/// Raw head output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetPrediction {
    /// `(classes + 1) x rows x cols`, background at channel 0.
    pub logits: Array3<f64>,
    /// `4 x rows x cols`: distances to left, top, right, bottom edges in cells.
    pub offsets: Array3<f64>,
}

pub struct HeadCache {
    hidden: StackCache,
    out: ConvCache,
}

impl DetectorHead {
    pub fn forward(&self, feats: &Array3<f64>) -> Result<(DetPrediction, HeadCache)> {
        let (h, c_hidden) = self.hidden.forward(feats)?;
        let (y, c_out) = self.out.forward(&h)?;
        let k = self.num_classes + 1;
        Ok((
            DetPrediction {
                logits: y.slice(s![..k, .., ..]).to_owned(),
                offsets: y.slice(s![k.., .., ..]).to_owned(),
            },
            HeadCache {
                hidden: c_hidden,
                out: c_out,
            },
        ))
    }

    /// Returns the gradient with respect to the backbone features.
    pub fn backward(&self, cache: &HeadCache, dpred: &DetPrediction, grad: &mut DetectorHead) -> Array3<f64> {
        let dy = ndarray::concatenate(Axis(0), &[dpred.logits.view(), dpred.offsets.view()])
            .expect("head output channels");
        let dh = self
            .out
            .backward(&cache.out, &dy, &mut grad.out, true)
            .expect("input grad requested");
        self.hidden
            .backward(&cache.hidden, &dh, &mut grad.hidden, true)
            .expect("input grad requested")
    }
}

/// Per-cell training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct DetTarget {
    /// 0 = background, `k + 1` = class `k`.
    pub labels: Array2<usize>,
    pub offsets: Array3<f64>,
}

/// A cell is positive for a box when its centre lies inside the box. Cells
/// inside several boxes take the smallest one (ties: lexicographic corners,
/// then label), which keeps the result independent of box order.
pub fn assign_targets(
    boxes: &[(String, BoundingBox)],
    classes: &ClassIndex,
    image: ImageDims,
    grid: GridDims,
) -> Result<DetTarget> {
    let labelled: Vec<(usize, BoundingBox)> = boxes
        .iter()
        .map(|(c, b)| Ok((classes.label_of(c)?, *b)))
        .collect::<Result<_>>()?;
    let (sx, sy) = grid.scale(image);
    let mut labels = Array2::<usize>::zeros((grid.rows, grid.cols));
    let mut offsets = Array3::<f64>::zeros((4, grid.rows, grid.cols));
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let (px, py) = grid.cell_center(image, r, c);
            let best = labelled
                .iter()
                .filter(|(_, b)| px >= b.x_min && px <= b.x_max && py >= b.y_min && py <= b.y_max)
                .min_by(|(la, a), (lb, b)| {
                    a.area()
                        .total_cmp(&b.area())
                        .then_with(|| <[f64; 4]>::from(*a).partial_cmp(&<[f64; 4]>::from(*b)).expect("finite"))
                        .then_with(|| la.cmp(lb))
                });
            if let Some((label, b)) = best {
                labels[[r, c]] = *label;
                offsets[[0, r, c]] = (px - b.x_min) * sx;
                offsets[[1, r, c]] = (py - b.y_min) * sy;
                offsets[[2, r, c]] = (b.x_max - px) * sx;
                offsets[[3, r, c]] = (b.y_max - py) * sy;
            }
        }
    }
    Ok(DetTarget { labels, offsets })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetLoss {
    pub cls: f64,
    pub loc: f64,
}

impl DetLoss {
    pub fn total(&self) -> f64 {
        self.cls + self.loc
    }
}

fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

fn softmax_column(logits: &Array3<f64>, r: usize, c: usize) -> Vec<f64> {
    let col = logits.slice(s![.., r, c]);
    let m = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = col.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Cross-entropy averaged over all cells plus smooth-L1 (summed over the four
/// edges) averaged over positive cells; also returns the gradient.
pub fn detection_loss(pred: &DetPrediction, target: &DetTarget) -> Result<(DetLoss, DetPrediction)> {
    let (k, rows, cols) = pred.logits.dim();
    if target.labels.dim() != (rows, cols) || pred.offsets.dim() != (4, rows, cols) {
        return Err(Error::Shape(format!(
            "prediction grid {rows}x{cols} vs target {:?}",
            target.labels.dim()
        )));
    }
    let n_cells = (rows * cols) as f64;
    let n_pos = target.labels.iter().filter(|&&l| l > 0).count();
    let mut g_logits = Array3::<f64>::zeros(pred.logits.raw_dim());
    let mut g_offsets = Array3::<f64>::zeros(pred.offsets.raw_dim());
    let mut cls = 0.0;
    let mut loc = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let label = target.labels[[r, c]];
            if label >= k {
                return Err(Error::UnknownClass(format!("label index {label}")));
            }
            let p = softmax_column(&pred.logits, r, c);
            cls -= p[label].max(f64::MIN_POSITIVE).ln();
            for (j, pj) in p.iter().enumerate() {
                g_logits[[j, r, c]] = (pj - if j == label { 1.0 } else { 0.0 }) / n_cells;
            }
            if label > 0 {
                for e in 0..4 {
                    let (l, g) = smooth_l1(pred.offsets[[e, r, c]] - target.offsets[[e, r, c]]);
                    loc += l;
                    g_offsets[[e, r, c]] = g / n_pos as f64;
                }
            }
        }
    }
    let loss = DetLoss {
        cls: cls / n_cells,
        loc: if n_pos > 0 { loc / n_pos as f64 } else { 0.0 },
    };
    Ok((
        loss,
        DetPrediction {
            logits: g_logits,
            offsets: g_offsets,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub backbone: Backbone,
    pub head: DetectorHead,
    pub classes: ClassIndex,
}

impl Parameterized for Detector {
    fn tensors(&self) -> Vec<NamedTensor<'_>> {
        collect_tensors(vec![("backbone", self.backbone.tensors()), ("head", self.head.tensors())])
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.backbone.tensors_mut();
        v.extend(self.head.tensors_mut());
        v
    }
}

impl Detector {
    pub fn predict(&self, image: &Array3<f64>) -> Result<DetPrediction> {
        let (feats, _) = self.backbone.forward(image)?;
        Ok(self.head.forward(&feats)?.0)
    }
}

/// Greedy per-class suppression; input need not be sorted.
pub fn non_max_suppression(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = keep
            .iter()
            .any(|k| k.object_class == d.object_class && overlap(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            keep.push(d);
        }
    }
    keep
}

/// Decode per-cell predictions above `score_threshold` (strict) for every
/// class, then suppress overlaps; output is sorted by descending score.
/// Cells whose box collapses to zero area are dropped.
pub fn decode(
    pred: &DetPrediction,
    classes: &ClassIndex,
    image: ImageDims,
    score_threshold: f64,
    nms_iou: f64,
) -> Vec<Detection> {
    let (_, rows, cols) = pred.logits.dim();
    let grid = GridDims { rows, cols };
    let (sx, sy) = grid.scale(image);
    let (w, h) = (image.width as f64, image.height as f64);
    let mut dets = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let p = softmax_column(&pred.logits, r, c);
            let (px, py) = grid.cell_center(image, r, c);
            let d = |e: usize| pred.offsets[[e, r, c]].max(0.0);
            let bbox = BoundingBox::new(
                (px - d(0) / sx).clamp(0.0, w),
                (py - d(1) / sy).clamp(0.0, h),
                (px + d(2) / sx).clamp(0.0, w),
                (py + d(3) / sy).clamp(0.0, h),
            );
            if bbox.area() <= 0.0 {
                continue;
            }
            for (k, name) in classes.0.iter().enumerate() {
                let score = p[k + 1];
                if score > score_threshold {
                    dets.push(Detection {
                        object_class: name.clone(),
                        score,
                        bbox,
                    });
                }
            }
        }
    }
    non_max_suppression(dets, nms_iou)
}

pub fn detect(
    image: &Array3<f64>,
    params: &Detector,
    image_dims: ImageDims,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let pred = params.predict(image)?;
    if pred.logits.dim().0 != params.classes.len() + 1 {
        return Err(Error::Shape("head class count differs from class index".into()));
    }
    Ok(decode(&pred, &params.classes, image_dims, score_threshold, nms_iou))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 4,
        }
    }
}

impl OptimConfig {
    pub fn sgd(&self) -> Sgd {
        Sgd::new(self.lr, self.momentum, self.weight_decay)
    }
}

pub enum DetectorInit<'a> {
    Fresh(&'a BackboneConfig),
    /// Copy the backbone, start a new head.
    ReuseBackbone(&'a Backbone),
}

pub struct DetectorTraining<'a> {
    pub optim: &'a OptimConfig,
    pub epochs: usize,
    pub head_hidden: usize,
    pub freeze_backbone: bool,
    pub seed: u64,
}

/// Ground-truth (class, box) pairs of one record; tuples without a box are
/// ignored.
pub fn record_boxes(record: &ImageRecord) -> Vec<(String, BoundingBox)> {
    record
        .tuples
        .iter()
        .filter_map(|t| t.object_box.map(|b| (t.object_class.clone(), b)))
        .collect()
}

/// Build the initial detector for `classes`.
pub fn init_detector(classes: &ClassIndex, init: DetectorInit<'_>, head_hidden: usize, seed: u64) -> Result<Detector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = match init {
        DetectorInit::Fresh(cfg) => Backbone::new(cfg, &mut rng)?,
        DetectorInit::ReuseBackbone(b) => b.clone(),
    };
    let head = DetectorHead::new(backbone.out_channels(), head_hidden, classes.len(), &mut rng);
    Ok(Detector {
        backbone,
        head,
        classes: classes.clone(),
    })
}

/// Accumulate the detection gradient of one image into `grad`.
pub fn detector_sample_grad(
    det: &Detector,
    image: &Array3<f64>,
    target: &DetTarget,
    scale: f64,
    grad: &mut Detector,
    backbone_grad: bool,
) -> Result<DetLoss> {
    let (feats, bcache) = det.backbone.forward(image)?;
    let (pred, hcache) = det.head.forward(&feats)?;
    let (loss, mut g) = detection_loss(&pred, target)?;
    g.logits *= scale;
    g.offsets *= scale;
    let dfeat = det.head.backward(&hcache, &g, &mut grad.head);
    if backbone_grad {
        det.backbone.backward(&bcache, &dfeat, &mut grad.backbone);
    }
    Ok(loss)
}

/// SGD on the detection loss. Returns the trained detector and the mean
/// per-epoch loss trace.
pub fn train_detector(
    records: &[ImageRecord],
    images: &mut ImageStore,
    classes: &ClassIndex,
    opts: &DetectorTraining<'_>,
    init: DetectorInit<'_>,
) -> Result<(Detector, Vec<DetLoss>)> {
    if records.is_empty() || records.iter().all(|r| record_boxes(r).is_empty()) {
        return Err(Error::InvalidArgument("detector training set is empty".into()));
    }
    let mut det = init_detector(classes, init, opts.head_hidden, opts.seed)?;
    let input = det.backbone.input_size;
    let grid = det.backbone.grid();
    let targets: Vec<DetTarget> = records
        .iter()
        .map(|r| {
            assign_targets(&record_boxes(r), classes, ImageDims::new(r.width, r.height), grid)
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut opt_backbone = opts.optim.sgd();
    let mut opt_head = opts.optim.sgd();
    let mut order: Vec<usize> = (0..records.len()).collect();
    let bs = opts.optim.batch_size.max(1);
    let mut trace = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut sum = DetLoss { cls: 0.0, loc: 0.0 };
        for batch in order.chunks(bs) {
            let mut grad = Detector {
                backbone: det.backbone.zeros_like(),
                head: det.head.zeros_like(),
                classes: det.classes.clone(),
            };
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let img = images.tensor(&records[i], input)?;
                let l = detector_sample_grad(&det, &img, &targets[i], scale, &mut grad, !opts.freeze_backbone)?;
                if !l.total().is_finite() {
                    return Err(Error::Numerical(format!(
                        "detection loss at epoch {epoch}, image `{}`",
                        records[i].image_id
                    )));
                }
                sum.cls += l.cls;
                sum.loc += l.loc;
            }
            opt_head.step(&mut det.head, &grad.head);
            if !opts.freeze_backbone {
                opt_backbone.step(&mut det.backbone, &grad.backbone);
            }
        }
        let n = records.len() as f64;
        let mean = DetLoss {
            cls: sum.cls / n,
            loc: sum.loc / n,
        };
        log::debug!("detector epoch {epoch}: cls {:.4} loc {:.4}", mean.cls, mean.loc);
        trace.push(mean);
    }
    Ok((det, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes() -> ClassIndex {
        ClassIndex(vec!["ball".into(), "cup".into()])
    }

    #[test]
    fn no_boxes_means_background_only() {
        let t = assign_targets(&[], &classes(), ImageDims::new(64, 64), GridDims::square(8)).unwrap();
        assert!(t.labels.iter().all(|&l| l == 0));
        let pred = DetPrediction {
            logits: Array3::zeros((3, 8, 8)),
            offsets: Array3::from_elem((4, 8, 8), 3.0),
        };
        let (loss, g) = detection_loss(&pred, &t).unwrap();
        assert_eq!(loss.loc, 0.0);
        assert!((loss.cls - 3f64.ln()).abs() < 1e-12);
        assert!(g.offsets.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perfect_prediction_drives_losses_to_zero() {
        let im = ImageDims::new(64, 64);
        let grid = GridDims::square(8);
        let boxes = vec![("cup".to_string(), BoundingBox::new(8.0, 8.0, 40.0, 32.0))];
        let t = assign_targets(&boxes, &classes(), im, grid).unwrap();
        let mut logits = Array3::<f64>::zeros((3, 8, 8));
        for ((r, c), &l) in t.labels.indexed_iter() {
            logits[[l, r, c]] = 60.0;
        }
        let pred = DetPrediction {
            logits,
            offsets: t.offsets.clone(),
        };
        let (loss, _) = detection_loss(&pred, &t).unwrap();
        assert!(loss.cls < 1e-20 && loss.loc == 0.0);
        let dets = decode(&pred, &classes(), im, 0.5, 0.5);
        assert_eq!(dets.len(), 1);
        assert_eq!(dets[0].object_class, "cup");
        assert_eq!(dets[0].bbox, boxes[0].1);
    }

    #[test]
    fn unknown_class_is_rejected() {
        let boxes = vec![("kite".to_string(), BoundingBox::new(0.0, 0.0, 10.0, 10.0))];
        assert!(matches!(
            assign_targets(&boxes, &classes(), ImageDims::new(64, 64), GridDims::square(8)),
            Err(Error::UnknownClass(_))
        ));
    }

    #[test]
    fn assignment_ignores_box_order() {
        let im = ImageDims::new(64, 64);
        let g = GridDims::square(8);
        let a = ("cup".to_string(), BoundingBox::new(0.0, 0.0, 40.0, 40.0));
        let b = ("ball".to_string(), BoundingBox::new(16.0, 16.0, 48.0, 48.0));
        let c = ("cup".to_string(), BoundingBox::new(16.0, 16.0, 48.0, 48.0));
        let fwd = assign_targets(&[a.clone(), b.clone(), c.clone()], &classes(), im, g).unwrap();
        let rev = assign_targets(&[c, b, a], &classes(), im, g).unwrap();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn nms_keeps_one_of_identical_boxes() {
        let b = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        let mk = |class: &str, score| Detection {
            object_class: class.into(),
            score,
            bbox: b,
        };
        let kept = non_max_suppression(vec![mk("cup", 0.5), mk("cup", 0.9), mk("ball", 0.4)], 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(kept[1].object_class, "ball");
    }

    #[test]
    fn threshold_one_yields_nothing() {
        let pred = DetPrediction {
            logits: Array3::from_shape_fn((3, 4, 4), |(k, _, _)| if k == 1 { 50.0 } else { 0.0 }),
            offsets: Array3::ones((4, 4, 4)),
        };
        assert!(decode(&pred, &classes(), ImageDims::new(32, 32), 1.0, 0.5).is_empty());
    }
}
