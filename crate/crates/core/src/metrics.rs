//! Box overlap, per-tuple recall of pseudo boxes, and class-mean average
//! precision for detector output.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::annotations::{BoundingBox, ImageRecord};
use crate::detector::Detection;
use crate::error::{Error, Result};

/// Intersection over union. Errors only when both boxes have zero area.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    let (aa, ab) = (a.area(), b.area());
    if aa <= 0.0 && ab <= 0.0 {
        return Err(Error::InvalidArgument("iou of two zero-area boxes".into()));
    }
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    Ok((inter / (aa + ab - inter)).clamp(0.0, 1.0))
}

/// IoU that treats the all-degenerate case as no overlap.
pub(crate) fn overlap(a: &BoundingBox, b: &BoundingBox) -> f64 {
    iou(a, b).unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub predicted: Option<BoundingBox>,
    pub truth: BoundingBox,
    pub tuple_ref: (String, usize),
}

/// Fraction of pairs whose prediction exists and overlaps its truth with
/// IoU strictly above `iou_threshold`.
pub fn tuple_recall(pairs: &[EvalPair], iou_threshold: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("tuple recall over an empty pair list".into()));
    }
    let hits = pairs
        .iter()
        .filter(|p| {
            p.predicted
                .is_some_and(|pred| overlap(&pred, &p.truth) > iou_threshold)
        })
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    /// Area under the monotone precision envelope at every recall step.
    #[default]
    AllPoint,
    /// Mean of the envelope sampled at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub per_class: BTreeMap<String, f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
}

/// A detection tagged with the image it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetection {
    pub image_id: String,
    pub detection: Detection,
}

/// Average precision from a ranked TP/FP sequence and the number of truths.
pub fn average_precision(tp: &[bool], n_truth: usize, mode: ApInterpolation) -> f64 {
    if n_truth == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        recall.push(hits as f64 / n_truth as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    // Monotone envelope, right to left.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    match mode {
        ApInterpolation::AllPoint => {
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            for (r, p) in recall.iter().zip(&precision) {
                ap += (r - prev_r) * p;
                prev_r = *r;
            }
            ap
        }
        ApInterpolation::ElevenPoint => {
            (0..=10)
                .map(|k| {
                    let level = k as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&precision)
                        .filter(|(r, _)| **r >= level - 1e-12)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// Greedy matching per class: detections in descending score order, each
/// claiming the highest-IoU unclaimed truth in its image when that IoU
/// exceeds the threshold. mAP averages over classes with at least one truth.
pub fn mean_average_precision(
    detections: &[ImageDetection],
    ground_truth: &[ImageRecord],
    iou_threshold: f64,
    mode: ApInterpolation,
) -> ApResult {
    // class -> image -> truth boxes
    let mut truths: BTreeMap<&str, HashMap<&str, Vec<BoundingBox>>> = BTreeMap::new();
    for r in ground_truth {
        for t in &r.tuples {
            if let Some(b) = t.object_box {
                truths
                    .entry(t.object_class.as_str())
                    .or_default()
                    .entry(r.image_id.as_str())
                    .or_default()
                    .push(b);
            }
        }
    }

    let mut per_class = BTreeMap::new();
    for (class, by_image) in &truths {
        let n_truth: usize = by_image.values().map(Vec::len).sum();
        let mut dets: Vec<&ImageDetection> = detections
            .iter()
            .filter(|d| d.detection.object_class == *class)
            .collect();
        dets.sort_by(|a, b| b.detection.score.total_cmp(&a.detection.score));
        let mut claimed: HashMap<&str, Vec<bool>> = by_image
            .iter()
            .map(|(id, v)| (*id, vec![false; v.len()]))
            .collect();
        let tp: Vec<bool> = dets
            .iter()
            .map(|d| {
                let Some(boxes) = by_image.get(d.image_id.as_str()) else {
                    return false;
                };
                let used = claimed.get_mut(d.image_id.as_str()).expect("same keys");
                let mut best: Option<(usize, f64)> = None;
                for (k, b) in boxes.iter().enumerate() {
                    if used[k] {
                        continue;
                    }
                    let o = overlap(&d.detection.bbox, b);
                    if o > iou_threshold && best.is_none_or(|(_, bo)| o > bo) {
                        best = Some((k, o));
                    }
                }
                match best {
                    Some((k, _)) => {
                        used[k] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        per_class.insert(class.to_string(), average_precision(&tp, n_truth, mode));
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    ApResult { per_class, map }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{HoiTuple, Pose};

    fn bb(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d)
    }

    fn gt(id: &str, class: &str, b: BoundingBox) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            image_path: "x.png".into(),
            width: 100,
            height: 100,
            tuples: vec![HoiTuple {
                verb: "hold".into(),
                object_class: class.into(),
                object_box: Some(b),
                keypoints: Pose::empty(),
            }],
        }
    }

    fn det(id: &str, class: &str, score: f64, b: BoundingBox) -> ImageDetection {
        ImageDetection {
            image_id: id.into(),
            detection: Detection {
                object_class: class.into(),
                score,
                bbox: b,
            },
        }
    }

    #[test]
    fn iou_reference_cases() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &bb(20.0, 20.0, 30.0, 30.0)).unwrap(), 0.0);
        let v = iou(&a, &bb(5.0, 5.0, 15.0, 15.0)).unwrap();
        assert!((v - 25.0 / 175.0).abs() < 1e-12);
        let p = bb(3.0, 3.0, 3.0, 3.0);
        assert!(iou(&p, &p).is_err());
        assert_eq!(iou(&p, &a).unwrap(), 0.0);
    }

    #[test]
    fn recall_counts_strictly_above_threshold() {
        let t = bb(0.0, 0.0, 10.0, 10.0);
        let pair = |p: Option<BoundingBox>| EvalPair {
            predicted: p,
            truth: t,
            tuple_ref: ("i".into(), 0),
        };
        let exact = vec![pair(Some(t)); 3];
        assert_eq!(tuple_recall(&exact, 0.5).unwrap(), 1.0);
        let mixed = vec![
            pair(Some(t)),
            pair(None),
            pair(Some(bb(0.0, 0.0, 10.0, 9.0))),
            pair(Some(bb(0.0, 0.0, 10.0, 5.0))), // exactly 0.5: a miss
        ];
        assert_eq!(tuple_recall(&mixed, 0.5).unwrap(), 0.5);
        assert_eq!(tuple_recall(&vec![pair(None); 2], 0.5).unwrap(), 0.0);
        assert!(tuple_recall(&[], 0.5).is_err());
    }

    #[test]
    fn ap_reference_cases() {
        let t = bb(10.0, 10.0, 30.0, 30.0);
        let truth = vec![gt("a", "cup", t)];
        let exact = mean_average_precision(&[det("a", "cup", 0.9, t)], &truth, 0.5, ApInterpolation::AllPoint);
        assert_eq!(exact.map, 1.0);

        let fp_first = [
            det("a", "cup", 0.9, bb(60.0, 60.0, 80.0, 80.0)),
            det("a", "cup", 0.4, t),
        ];
        let r = mean_average_precision(&fp_first, &truth, 0.5, ApInterpolation::AllPoint);
        assert!((r.map - 0.5).abs() < 1e-12);

        let none = mean_average_precision(&[], &truth, 0.5, ApInterpolation::AllPoint);
        assert_eq!(none.map, 0.0);
        assert_eq!(none.per_class["cup"], 0.0);
    }

    #[test]
    fn duplicate_detection_is_a_false_positive() {
        let t = bb(10.0, 10.0, 30.0, 30.0);
        let dets = [det("a", "cup", 0.9, t), det("a", "cup", 0.8, t)];
        let r = mean_average_precision(&dets, &[gt("a", "cup", t)], 0.5, ApInterpolation::AllPoint);
        assert_eq!(r.map, 1.0); // envelope keeps precision 1 at recall 1
        let eleven = mean_average_precision(&dets, &[gt("a", "cup", t)], 0.5, ApInterpolation::ElevenPoint);
        assert!((eleven.map - 1.0).abs() < 1e-12);
    }

    #[test]
    fn envelope_ap_on_known_sequence() {
        // TP FP TP FP, 3 truths: recall 1/3, 1/3, 2/3, 2/3; precision 1, .5, 2/3, .5
        let ap = average_precision(&[true, false, true, false], 3, ApInterpolation::AllPoint);
        assert!((ap - (1.0 / 3.0 + (1.0 / 3.0) * (2.0 / 3.0))).abs() < 1e-12);
    }
}
