//! Attention maps to pseudo boxes: threshold, box extraction, grid-to-image
//! mapping, and whole-dataset pseudo annotation.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::annotations::{BoundingBox, HoiTuple, ImageRecord};
use crate::error::{Error, Result};
use crate::features::{Backbone, TupleFeaturizer};
use crate::grid::{GridDims, ImageDims};
use crate::images::ImageStore;
use crate::rrpn::{AttentionMap, Rrpn};

pub const DEFAULT_DELTA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub values: Array2<bool>,
}

impl BinaryMask {
    pub fn dims(&self) -> GridDims {
        let (rows, cols) = self.values.dim();
        GridDims { rows, cols }
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
}

/// Cells strictly above `delta`.
pub fn threshold_map(map: &AttentionMap, delta: f64) -> BinaryMask {
    BinaryMask {
        values: map.values.mapv(|v| v > delta),
    }
}

/// Inclusive cell-index box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridBox {
    pub col_min: usize,
    pub row_min: usize,
    pub col_max: usize,
    pub row_max: usize,
}

impl GridBox {
    pub fn contains(&self, other: &GridBox) -> bool {
        other.col_min >= self.col_min
            && other.row_min >= self.row_min
            && other.col_max <= self.col_max
            && other.row_max <= self.row_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxPolicy {
    /// Tight box around every active cell.
    #[default]
    Hull,
    /// Tight box around the largest 4-connected component.
    LargestComponent,
}

impl fmt::Display for BoxPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoxPolicy::Hull => "hull",
            BoxPolicy::LargestComponent => "largest_component",
        })
    }
}

impl FromStr for BoxPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hull" => Ok(BoxPolicy::Hull),
            "largest_component" | "largest-component" => Ok(BoxPolicy::LargestComponent),
            other => Err(Error::InvalidArgument(format!("unknown box policy `{other}`"))),
        }
    }
}

fn hull(mask: &BinaryMask) -> Option<GridBox> {
    let mut out: Option<GridBox> = None;
    for ((r, c), &on) in mask.values.indexed_iter() {
        if !on {
            continue;
        }
        out = Some(match out {
            None => GridBox {
                col_min: c,
                row_min: r,
                col_max: c,
                row_max: r,
            },
            Some(b) => GridBox {
                col_min: b.col_min.min(c),
                row_min: b.row_min.min(r),
                col_max: b.col_max.max(c),
                row_max: b.row_max.max(r),
            },
        });
    }
    out
}

/// Components are discovered in raster order, so a strict `>` on size keeps
/// the topmost-then-leftmost origin among equally large components.
fn largest_component(mask: &BinaryMask) -> Option<GridBox> {
    let (rows, cols) = mask.values.dim();
    let mut seen = Array2::<bool>::from_elem((rows, cols), false);
    let mut best: Option<(usize, GridBox)> = None;
    let mut queue = VecDeque::new();
    for r0 in 0..rows {
        for c0 in 0..cols {
            if !mask.values[[r0, c0]] || seen[[r0, c0]] {
                continue;
            }
            seen[[r0, c0]] = true;
            queue.push_back((r0, c0));
            let mut size = 0;
            let mut b = GridBox {
                col_min: c0,
                row_min: r0,
                col_max: c0,
                row_max: r0,
            };
            while let Some((r, c)) = queue.pop_front() {
                size += 1;
                b.col_min = b.col_min.min(c);
                b.col_max = b.col_max.max(c);
                b.row_min = b.row_min.min(r);
                b.row_max = b.row_max.max(r);
                let nbrs = [
                    (r.wrapping_sub(1), c),
                    (r + 1, c),
                    (r, c.wrapping_sub(1)),
                    (r, c + 1),
                ];
                for (nr, nc) in nbrs {
                    if nr < rows && nc < cols && mask.values[[nr, nc]] && !seen[[nr, nc]] {
                        seen[[nr, nc]] = true;
                        queue.push_back((nr, nc));
                    }
                }
            }
            if best.is_none_or(|(s, _)| size > s) {
                best = Some((size, b));
            }
        }
    }
    best.map(|(_, b)| b)
}

pub fn extract_box(mask: &BinaryMask, policy: BoxPolicy) -> Option<GridBox> {
    match policy {
        BoxPolicy::Hull => hull(mask),
        BoxPolicy::LargestComponent => largest_component(mask),
    }
}

/// Round to nearest, halves up.
fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Each cell maps to its full pixel extent; results are clipped to the image
/// and rounded to whole pixels.
pub fn to_image_coords(b: GridBox, grid: GridDims, image: ImageDims) -> Result<BoundingBox> {
    if b.col_min > b.col_max
        || b.row_min > b.row_max
        || b.col_max >= grid.cols
        || b.row_max >= grid.rows
    {
        return Err(Error::InvalidArgument(format!(
            "grid box {b:?} outside {}x{} grid",
            grid.rows, grid.cols
        )));
    }
    let cw = image.width as f64 / grid.cols as f64;
    let ch = image.height as f64 / grid.rows as f64;
    let (w, h) = (image.width as f64, image.height as f64);
    Ok(BoundingBox::new(
        round_half_up(b.col_min as f64 * cw).clamp(0.0, w),
        round_half_up(b.row_min as f64 * ch).clamp(0.0, h),
        round_half_up((b.col_max + 1) as f64 * cw).clamp(0.0, w),
        round_half_up((b.row_max + 1) as f64 * ch).clamp(0.0, h),
    ))
}

/// The pseudo box of one attention map, with the map's peak value; `None`
/// when no cell exceeds `delta`.
pub fn box_from_attention(
    map: &AttentionMap,
    delta: f64,
    policy: BoxPolicy,
    image: ImageDims,
) -> Result<Option<(BoundingBox, f64)>> {
    let mask = threshold_map(map, delta);
    match extract_box(&mask, policy) {
        None => Ok(None),
        Some(g) => Ok(Some((to_image_coords(g, map.dims(), image)?, map.max()))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBox {
    pub bbox: BoundingBox,
    pub source_tuple: (String, usize),
    pub max_activation: f64,
}

/// Sidecar written next to a pseudo-annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoReport {
    pub tuples_in: usize,
    pub tuples_out: usize,
    pub skipped_empty_mask: usize,
    pub delta: f64,
    pub policy: BoxPolicy,
}

#[derive(Debug, Clone)]
pub struct PseudoOutput {
    pub records: Vec<ImageRecord>,
    pub boxes: Vec<PseudoBox>,
    pub report: PseudoReport,
}

/// What pseudo annotation needs from a trained source phase.
pub struct PseudoLabeler<'a> {
    pub backbone: &'a Backbone,
    pub rrpn: &'a Rrpn,
    pub featurizer: &'a TupleFeaturizer,
    pub delta: f64,
    pub policy: BoxPolicy,
}

impl PseudoLabeler<'_> {
    /// Attention map for every tuple of `record`, in tuple order.
    pub fn attention_maps(
        &self,
        record: &ImageRecord,
        images: &mut ImageStore,
    ) -> Result<Vec<AttentionMap>> {
        let img = images.tensor(record, self.backbone.input_size)?;
        let (feats, _) = self.backbone.forward(&img)?;
        record
            .tuples
            .iter()
            .map(|t| {
                let v = self.featurizer.volume(&feats, record, t)?;
                self.rrpn.forward(&v)
            })
            .collect()
    }

    /// Pseudo box (or `None` on an empty mask) for every tuple of `record`.
    pub fn boxes_for(
        &self,
        record: &ImageRecord,
        images: &mut ImageStore,
    ) -> Result<Vec<Option<(BoundingBox, f64)>>> {
        let dims = ImageDims::new(record.width, record.height);
        self.attention_maps(record, images)?
            .iter()
            .map(|m| box_from_attention(m, self.delta, self.policy, dims))
            .collect()
    }
}

/// Replace every tuple's box with the attention-derived pseudo box. Tuples
/// whose thresholded map is empty are skipped and counted.
pub fn generate_pseudo_annotations(
    records: &[ImageRecord],
    images: &mut ImageStore,
    labeler: &PseudoLabeler<'_>,
) -> Result<PseudoOutput> {
    if !(0.0..1.0).contains(&labeler.delta) {
        return Err(Error::InvalidArgument(format!(
            "delta must lie in [0, 1), got {}",
            labeler.delta
        )));
    }
    let mut out_records = Vec::new();
    let mut boxes = Vec::new();
    let mut tuples_in = 0;
    let mut skipped = 0;
    for record in records {
        tuples_in += record.tuples.len();
        let found = labeler.boxes_for(record, images)?;
        let mut tuples: Vec<HoiTuple> = Vec::new();
        for (i, (t, b)) in record.tuples.iter().zip(found).enumerate() {
            match b {
                None => skipped += 1,
                Some((bbox, peak)) => {
                    tuples.push(HoiTuple {
                        object_box: Some(bbox),
                        ..t.clone()
                    });
                    boxes.push(PseudoBox {
                        bbox,
                        source_tuple: (record.image_id.clone(), i),
                        max_activation: peak,
                    });
                }
            }
        }
        if !tuples.is_empty() {
            out_records.push(ImageRecord {
                tuples,
                ..record.clone()
            });
        }
    }
    let report = PseudoReport {
        tuples_in,
        tuples_out: boxes.len(),
        skipped_empty_mask: skipped,
        delta: labeler.delta,
        policy: labeler.policy,
    };
    Ok(PseudoOutput {
        records: out_records,
        boxes,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        BinaryMask {
            values: Array2::from_shape_fn((h, w), |(r, c)| rows[r].as_bytes()[c] == b'#'),
        }
    }

    #[test]
    fn threshold_is_strict() {
        let m = AttentionMap {
            values: Array2::from_shape_vec((1, 3), vec![0.1, 0.1000001, 0.05]).unwrap(),
        };
        let b = threshold_map(&m, DEFAULT_DELTA);
        assert_eq!(b.values.as_slice().unwrap(), &[false, true, false]);
        let ones = AttentionMap {
            values: Array2::ones((4, 4)),
        };
        assert_eq!(threshold_map(&ones, 0.1).count(), 16);
    }

    #[test]
    fn hull_and_component_policies() {
        let single = mask_from(&["....", "..#.", "...."]);
        let want = GridBox {
            col_min: 2,
            row_min: 1,
            col_max: 2,
            row_max: 1,
        };
        assert_eq!(extract_box(&single, BoxPolicy::Hull), Some(want));

        let blobs = mask_from(&["##....", "##....", "......", "....#."]);
        assert_eq!(
            extract_box(&blobs, BoxPolicy::Hull),
            Some(GridBox {
                col_min: 0,
                row_min: 0,
                col_max: 4,
                row_max: 3
            })
        );
        assert_eq!(
            extract_box(&blobs, BoxPolicy::LargestComponent),
            Some(GridBox {
                col_min: 0,
                row_min: 0,
                col_max: 1,
                row_max: 1
            })
        );
        // Equal sizes: the component whose first cell comes first in raster order wins.
        let tie = mask_from(&["...#", "#..#", "#..."]);
        assert_eq!(
            extract_box(&tie, BoxPolicy::LargestComponent),
            Some(GridBox {
                col_min: 3,
                row_min: 0,
                col_max: 3,
                row_max: 1
            })
        );
        let empty = mask_from(&["...", "..."]);
        assert_eq!(extract_box(&empty, BoxPolicy::Hull), None);
        assert_eq!(extract_box(&empty, BoxPolicy::LargestComponent), None);
    }

    #[test]
    fn grid_to_image_mapping() {
        let g = GridDims::square(40);
        let im = ImageDims::new(320, 320);
        let full = GridBox {
            col_min: 0,
            row_min: 0,
            col_max: 39,
            row_max: 39,
        };
        assert_eq!(to_image_coords(full, g, im).unwrap(), BoundingBox::new(0.0, 0.0, 320.0, 320.0));
        let cell = GridBox {
            col_min: 5,
            row_min: 2,
            col_max: 5,
            row_max: 2,
        };
        assert_eq!(to_image_coords(cell, g, im).unwrap(), BoundingBox::new(40.0, 16.0, 48.0, 24.0));
        let out = GridBox {
            col_min: 0,
            row_min: 0,
            col_max: 40,
            row_max: 3,
        };
        assert!(to_image_coords(out, g, im).is_err());
        // 3 cells over 10 px: 3.333.. -> 3, 6.666.. -> 7
        let odd = to_image_coords(
            GridBox {
                col_min: 1,
                row_min: 1,
                col_max: 1,
                row_max: 1,
            },
            GridDims::square(3),
            ImageDims::new(10, 10),
        )
        .unwrap();
        assert_eq!(odd, BoundingBox::new(3.0, 3.0, 7.0, 7.0));
        assert_eq!(round_half_up(2.5), 3.0);
    }

    #[test]
    fn policy_parses() {
        assert_eq!("hull".parse::<BoxPolicy>().unwrap(), BoxPolicy::Hull);
        assert_eq!(
            "largest_component".parse::<BoxPolicy>().unwrap(),
            BoxPolicy::LargestComponent
        );
        assert!("union".parse::<BoxPolicy>().is_err());
    }
}
