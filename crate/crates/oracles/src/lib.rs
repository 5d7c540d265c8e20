//! Deliberately naive reference computations. Nothing here is fast; each
//! function takes the most literal route to its answer so that it shares no
//! code or structure with the implementation under test.

pub mod fixtures;
pub mod gradients;

use rrpn_core::annotations::{BoundingBox, ImageRecord};
use rrpn_core::metrics::{EvalPair, ImageDetection};

/// `(col_min, row_min, col_max, row_max)` of a mask given as rows of cells.
pub type CellBox = (usize, usize, usize, usize);

/// Tight box over all set cells: the first and last non-empty column and row.
pub fn hull(mask: &[Vec<bool>]) -> Option<CellBox> {
    let rows = mask.len();
    let cols = mask.first().map_or(0, Vec::len);
    let col_has = |c: usize| (0..rows).any(|r| mask[r][c]);
    let row_has = |r: usize| mask[r].iter().any(|&v| v);
    let c0 = (0..cols).find(|&c| col_has(c))?;
    let c1 = (0..cols).rev().find(|&c| col_has(c))?;
    let r0 = (0..rows).find(|&r| row_has(r))?;
    let r1 = (0..rows).rev().find(|&r| row_has(r))?;
    Some((c0, r0, c1, r1))
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Largest 4-connected component by union-find; among equal sizes the one
/// whose first cell in raster order comes earliest.
pub fn largest_component(mask: &[Vec<bool>]) -> Option<CellBox> {
    let rows = mask.len();
    let cols = mask.first().map_or(0, Vec::len);
    let idx = |r: usize, c: usize| r * cols + c;
    let mut parent: Vec<usize> = (0..rows * cols).collect();
    for r in 0..rows {
        for c in 0..cols {
            if !mask[r][c] {
                continue;
            }
            if r + 1 < rows && mask[r + 1][c] {
                let (a, b) = (find(&mut parent, idx(r, c)), find(&mut parent, idx(r + 1, c)));
                parent[a] = b;
            }
            if c + 1 < cols && mask[r][c + 1] {
                let (a, b) = (find(&mut parent, idx(r, c)), find(&mut parent, idx(r, c + 1)));
                parent[a] = b;
            }
        }
    }
    // root -> (size, first raster cell, box)
    let mut comps: Vec<(usize, usize, usize, CellBox)> = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if !mask[r][c] {
                continue;
            }
            let root = find(&mut parent, idx(r, c));
            match comps.iter_mut().find(|e| e.0 == root) {
                Some(e) => {
                    e.1 += 1;
                    e.3 = (e.3 .0.min(c), e.3 .1.min(r), e.3 .2.max(c), e.3 .3.max(r));
                }
                None => comps.push((root, 1, idx(r, c), (c, r, c, r))),
            }
        }
    }
    comps
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)))
        .map(|e| e.3)
}

/// IoU of boxes with integer corners by counting unit pixels.
pub fn raster_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inside = |bx: &BoundingBox, x: i64, y: i64| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        px > bx.x_min && px < bx.x_max && py > bx.y_min && py < bx.y_max
    };
    let lo_x = a.x_min.min(b.x_min).floor() as i64;
    let hi_x = a.x_max.max(b.x_max).ceil() as i64;
    let lo_y = a.y_min.min(b.y_min).floor() as i64;
    let hi_y = a.y_max.max(b.y_max).ceil() as i64;
    let (mut inter, mut union) = (0u64, 0u64);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Closed-form IoU on corner coordinates, written out case by case.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = if a.x_max <= b.x_min || b.x_max <= a.x_min {
        0.0
    } else {
        a.x_max.min(b.x_max) - a.x_min.max(b.x_min)
    };
    let h = if a.y_max <= b.y_min || b.y_max <= a.y_min {
        0.0
    } else {
        a.y_max.min(b.y_max) - a.y_min.max(b.y_min)
    };
    let inter = w * h;
    let union = (a.x_max - a.x_min) * (a.y_max - a.y_min) + (b.x_max - b.x_min) * (b.y_max - b.y_min) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn tuple_recall(pairs: &[EvalPair], threshold: f64) -> f64 {
    let mut hits = 0.0;
    for p in pairs {
        if let Some(pred) = &p.predicted {
            if iou(pred, &p.truth) > threshold {
                hits += 1.0;
            }
        }
    }
    hits / pairs.len() as f64
}

/// All-point AP per class and their mean over classes with truths.
///
/// Ranks by repeated selection of the highest remaining score (first wins on
/// ties), matches each detection to the best unclaimed truth of its image,
/// recounts precision and recall from scratch at every rank, and takes the
/// envelope as the maximum precision at any later rank.
pub fn mean_average_precision(
    detections: &[ImageDetection],
    truth: &[ImageRecord],
    threshold: f64,
) -> (Vec<(String, f64)>, f64) {
    let mut classes: Vec<String> = truth
        .iter()
        .flat_map(|r| r.tuples.iter().filter(|t| t.object_box.is_some()).map(|t| t.object_class.clone()))
        .collect();
    classes.sort();
    classes.dedup();

    let mut per_class = Vec::new();
    for class in &classes {
        let gts: Vec<(&str, BoundingBox)> = truth
            .iter()
            .flat_map(|r| {
                r.tuples
                    .iter()
                    .filter(|t| &t.object_class == class)
                    .filter_map(move |t| t.object_box.map(|b| (r.image_id.as_str(), b)))
            })
            .collect();
        let mut remaining: Vec<&ImageDetection> =
            detections.iter().filter(|d| &d.detection.object_class == class).collect();
        let mut ranked = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for i in 1..remaining.len() {
                if remaining[i].detection.score > remaining[best].detection.score {
                    best = i;
                }
            }
            ranked.push(remaining.remove(best));
        }

        let mut claimed = vec![false; gts.len()];
        let mut is_tp = Vec::new();
        for d in &ranked {
            let mut pick: Option<usize> = None;
            for (k, (img, b)) in gts.iter().enumerate() {
                if claimed[k] || *img != d.image_id {
                    continue;
                }
                let o = iou(&d.detection.bbox, b);
                if o > threshold && pick.is_none_or(|p| o > iou(&d.detection.bbox, &gts[p].1)) {
                    pick = Some(k);
                }
            }
            if let Some(k) = pick {
                claimed[k] = true;
            }
            is_tp.push(pick.is_some());
        }

        let n = is_tp.len();
        let prec_at = |k: usize| is_tp[..=k].iter().filter(|&&t| t).count() as f64 / (k + 1) as f64;
        let rec_at = |k: usize| is_tp[..=k].iter().filter(|&&t| t).count() as f64 / gts.len() as f64;
        let mut ap = 0.0;
        for k in 0..n {
            let gain = rec_at(k) - if k == 0 { 0.0 } else { rec_at(k - 1) };
            if gain > 0.0 {
                let envelope = (k..n).map(prec_at).fold(0.0, f64::max);
                ap += gain * envelope;
            }
        }
        per_class.push((class.clone(), ap));
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|(_, a)| a).sum::<f64>() / per_class.len() as f64
    };
    (per_class, map)
}

/// The Gaussian target value at grid point `(gx, gy)`, from the box in image
/// pixels, with cell centres on integer grid coordinates.
pub fn gaussian_at(b: &BoundingBox, image_w: f64, image_h: f64, cols: f64, rows: f64, gx: f64, gy: f64) -> f64 {
    let sx = cols / image_w;
    let sy = rows / image_h;
    let cx = (b.x_min + b.x_max) / 2.0 * sx - 0.5;
    let cy = (b.y_min + b.y_max) / 2.0 * sy - 0.5;
    let sigx = (b.x_max - b.x_min) * sx / 4.0;
    let sigy = (b.y_max - b.y_min) * sy / 4.0;
    (-((gx - cx).powi(2) / (2.0 * sigx * sigx) + (gy - cy).powi(2) / (2.0 * sigy * sigy))).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_tie_goes_to_the_earlier_origin() {
        let m = vec![vec![false, true, false, true], vec![false, false, false, true], vec![true, true, false, false]];
        assert_eq!(largest_component(&m), Some((3, 0, 3, 1)));
        let tie = vec![vec![true, false, true]];
        assert_eq!(largest_component(&tie), Some((0, 0, 0, 0)));
        assert_eq!(hull(&m), Some((0, 0, 3, 2)));
        assert_eq!(hull(&[vec![false; 3]]), None);
    }

    #[test]
    fn raster_and_closed_form_iou_agree_on_a_known_pair() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BoundingBox::new(5.0, 5.0, 15.0, 15.0);
        assert!((raster_iou(&a, &b) - 25.0 / 175.0).abs() < 1e-12);
        assert!((iou(&a, &b) - 25.0 / 175.0).abs() < 1e-12);
    }
}
