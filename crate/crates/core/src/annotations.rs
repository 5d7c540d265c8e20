//! HOI-annotated datasets: the tuple model, its JSON file format, verb
//! filtering and the frequency-based source/target class split.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of body joints carried by every tuple.
pub const NUM_JOINTS: usize = 18;

pub const NO_INTERACTION: &str = "no_interaction";

/// Axis-aligned box in pixel coordinates, serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BoundingBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Ordered corners, finite, non-negative coordinates.
    pub fn is_valid(&self) -> bool {
        let c: [f64; 4] = (*self).into();
        c.iter().all(|v| v.is_finite() && *v >= 0.0)
            && self.x_min <= self.x_max
            && self.y_min <= self.y_max
    }

    pub fn is_inside(&self, width: f64, height: f64) -> bool {
        self.is_valid() && self.x_max <= width && self.y_max <= height
    }

    /// Does `other` lie entirely within `self`?
    pub fn contains(&self, other: &BoundingBox) -> bool {
        other.x_min >= self.x_min
            && other.y_min >= self.y_min
            && other.x_max <= self.x_max
            && other.y_max <= self.y_max
    }
}

/// 2-D image point in pixels.
pub type Keypoint = [f64; 2];

/// The 18 body joints of one person; absent joints are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose(pub [Option<Keypoint>; NUM_JOINTS]);

impl Pose {
    pub fn empty() -> Self {
        Pose([None; NUM_JOINTS])
    }

    pub fn joint(&self, j: usize) -> Option<Keypoint> {
        self.0[j]
    }
}

impl TryFrom<Vec<Option<Keypoint>>> for Pose {
    type Error = usize;

    fn try_from(v: Vec<Option<Keypoint>>) -> Result<Self, usize> {
        let n = v.len();
        <[Option<Keypoint>; NUM_JOINTS]>::try_from(v)
            .map(Pose)
            .map_err(|_| n)
    }
}

/// One (verb, object class, object box, human keypoints) annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct HoiTuple {
    pub verb: String,
    pub object_class: String,
    pub object_box: Option<BoundingBox>,
    pub keypoints: Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub tuples: Vec<HoiTuple>,
}

// On-disk layout. Kept separate from the domain types so that validation
// errors can name the offending image.
#[derive(Serialize, Deserialize)]
struct FileTuple {
    verb: String,
    object_class: String,
    object_box: Option<BoundingBox>,
    keypoints: Vec<Option<Keypoint>>,
}

#[derive(Serialize, Deserialize)]
struct FileImage {
    image_id: String,
    image_path: PathBuf,
    width: u32,
    height: u32,
    tuples: Vec<FileTuple>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    images: Vec<FileImage>,
}

impl ImageRecord {
    pub fn validate(&self) -> Result<()> {
        let id = self.image_id.as_str();
        if self.width == 0 || self.height == 0 {
            return Err(Error::schema(id, "width/height", "image dimensions must be positive"));
        }
        for (i, t) in self.tuples.iter().enumerate() {
            if t.verb.is_empty() {
                return Err(Error::schema(id, &format!("tuples[{i}].verb"), "empty verb"));
            }
            if t.object_class.is_empty() {
                return Err(Error::schema(
                    id,
                    &format!("tuples[{i}].object_class"),
                    "empty class label",
                ));
            }
            if let Some(b) = &t.object_box {
                if !b.is_valid() {
                    return Err(Error::schema(
                        id,
                        &format!("tuples[{i}].object_box"),
                        format!("malformed box {:?}", <[f64; 4]>::from(*b)),
                    ));
                }
                if !b.is_inside(self.width as f64, self.height as f64) {
                    return Err(Error::schema(
                        id,
                        &format!("tuples[{i}].object_box"),
                        format!(
                            "box {:?} outside {}x{} image",
                            <[f64; 4]>::from(*b),
                            self.width,
                            self.height
                        ),
                    ));
                }
            }
            for (j, kp) in t.keypoints.0.iter().enumerate() {
                if let Some([x, y]) = kp {
                    if !x.is_finite() || !y.is_finite() {
                        return Err(Error::schema(
                            id,
                            &format!("tuples[{i}].keypoints[{j}]"),
                            "non-finite keypoint",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn from_file(raw: FileImage) -> Result<Self> {
        let mut tuples = Vec::with_capacity(raw.tuples.len());
        for (i, t) in raw.tuples.into_iter().enumerate() {
            let keypoints = Pose::try_from(t.keypoints).map_err(|n| {
                Error::schema(
                    &raw.image_id,
                    &format!("tuples[{i}].keypoints"),
                    format!("expected {NUM_JOINTS} keypoint slots, found {n}"),
                )
            })?;
            tuples.push(HoiTuple {
                verb: t.verb,
                object_class: t.object_class,
                object_box: t.object_box,
                keypoints,
            });
        }
        let rec = ImageRecord {
            image_id: raw.image_id,
            image_path: raw.image_path,
            width: raw.width,
            height: raw.height,
            tuples,
        };
        rec.validate()?;
        Ok(rec)
    }

    fn to_file(&self) -> FileImage {
        FileImage {
            image_id: self.image_id.clone(),
            image_path: self.image_path.clone(),
            width: self.width,
            height: self.height,
            tuples: self
                .tuples
                .iter()
                .map(|t| FileTuple {
                    verb: t.verb.clone(),
                    object_class: t.object_class.clone(),
                    object_box: t.object_box,
                    keypoints: t.keypoints.0.to_vec(),
                })
                .collect(),
        }
    }
}

pub fn parse_dataset(json: &str) -> Result<Vec<ImageRecord>> {
    let file: AnnotationFile = serde_json::from_str(json)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(file.images.len());
    for raw in file.images {
        if !seen.insert(raw.image_id.clone()) {
            return Err(Error::schema(&raw.image_id, "image_id", "duplicate image id"));
        }
        out.push(ImageRecord::from_file(raw)?);
    }
    Ok(out)
}

pub fn dataset_to_json(records: &[ImageRecord]) -> Result<String> {
    let file = AnnotationFile {
        images: records.iter().map(ImageRecord::to_file).collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn load_dataset(path: &Path) -> Result<Vec<ImageRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

pub fn save_dataset(path: &Path, records: &[ImageRecord]) -> Result<()> {
    crate::util::write_atomic(path, dataset_to_json(records)?.as_bytes())
}

/// Drop every tuple labelled `excluded_verb`, then every image left empty.
pub fn filter_no_interaction(records: &[ImageRecord], excluded_verb: &str) -> Vec<ImageRecord> {
    records
        .iter()
        .filter_map(|r| {
            let tuples: Vec<HoiTuple> = r
                .tuples
                .iter()
                .filter(|t| t.verb != excluded_verb)
                .cloned()
                .collect();
            (!tuples.is_empty()).then(|| ImageRecord {
                tuples,
                ..r.clone()
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub source_classes: BTreeSet<String>,
    pub target_classes: BTreeSet<String>,
    pub verbs: BTreeSet<String>,
}

impl SplitSpec {
    /// Build a split from explicit class lists and check it against `records`.
    pub fn explicit(
        records: &[ImageRecord],
        source: impl IntoIterator<Item = String>,
        target: impl IntoIterator<Item = String>,
    ) -> Result<Self> {
        let spec = SplitSpec {
            source_classes: source.into_iter().collect(),
            target_classes: target.into_iter().collect(),
            verbs: records
                .iter()
                .flat_map(|r| r.tuples.iter().map(|t| t.verb.clone()))
                .collect(),
        };
        spec.check(records)?;
        Ok(spec)
    }

    pub fn side_of(&self, class: &str) -> Option<Side> {
        if self.source_classes.contains(class) {
            Some(Side::Source)
        } else if self.target_classes.contains(class) {
            Some(Side::Target)
        } else {
            None
        }
    }

    pub fn classes(&self, side: Side) -> &BTreeSet<String> {
        match side {
            Side::Source => &self.source_classes,
            Side::Target => &self.target_classes,
        }
    }

    /// Disjoint sides, and every verb seen on the target side also occurs on
    /// the source side.
    pub fn check(&self, records: &[ImageRecord]) -> Result<()> {
        if let Some(c) = self.source_classes.intersection(&self.target_classes).next() {
            return Err(Error::Split(format!("class `{c}` is on both sides")));
        }
        let mut source_verbs = BTreeSet::new();
        let mut target_verbs = BTreeSet::new();
        for t in records.iter().flat_map(|r| &r.tuples) {
            match self.side_of(&t.object_class) {
                Some(Side::Source) => source_verbs.insert(t.verb.as_str()),
                Some(Side::Target) => target_verbs.insert(t.verb.as_str()),
                None => false,
            };
        }
        if let Some(v) = target_verbs.difference(&source_verbs).next() {
            return Err(Error::Split(format!(
                "verb `{v}` occurs with target classes but never with source classes"
            )));
        }
        Ok(())
    }
}

/// Tuple count per object class.
pub fn class_frequencies(records: &[ImageRecord]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for t in records.iter().flat_map(|r| &r.tuples) {
        *counts.entry(t.object_class.clone()).or_insert(0) += 1;
    }
    counts
}

/// The `n_target` least frequent classes become target classes; ties at the
/// cut go to the lexicographically smaller label.
pub fn split_by_frequency(records: &[ImageRecord], n_target: usize) -> Result<SplitSpec> {
    let counts = class_frequencies(records);
    if n_target == 0 || n_target >= counts.len() {
        return Err(Error::Split(format!(
            "n_target must be in 1..{} (distinct classes), got {n_target}",
            counts.len()
        )));
    }
    let mut ranked: Vec<(&String, &usize)> = counts.iter().collect();
    ranked.sort_by(|a, b| a.1.cmp(b.1).then_with(|| a.0.cmp(b.0)));
    let target: Vec<String> = ranked[..n_target].iter().map(|(c, _)| (*c).clone()).collect();
    let source: Vec<String> = ranked[n_target..].iter().map(|(c, _)| (*c).clone()).collect();
    SplitSpec::explicit(records, source, target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Source,
    Target,
}

impl FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Side::Source),
            "target" => Ok(Side::Target),
            other => Err(Error::InvalidArgument(format!(
                "unknown side `{other}` (expected `source` or `target`)"
            ))),
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Source => "source",
            Side::Target => "target",
        })
    }
}

/// One tuple together with the image it belongs to.
#[derive(Debug, Clone, Copy)]
pub struct TupleRef<'a> {
    pub record: &'a ImageRecord,
    pub index: usize,
    pub tuple: &'a HoiTuple,
}

/// Every tuple whose class is on `side`, ordered by image id then tuple index.
/// An image with several matching tuples is yielded once per tuple.
pub fn enumerate_tuples<'a>(
    records: &'a [ImageRecord],
    spec: &'a SplitSpec,
    side: Side,
) -> impl Iterator<Item = TupleRef<'a>> + 'a {
    let mut order: Vec<&ImageRecord> = records.iter().collect();
    order.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let classes = spec.classes(side);
    order.into_iter().flat_map(move |record| {
        record
            .tuples
            .iter()
            .enumerate()
            .filter(move |(_, t)| classes.contains(&t.object_class))
            .map(move |(index, tuple)| TupleRef {
                record,
                index,
                tuple,
            })
    })
}

/// Keep only tuples whose class is on `side`; drop images left empty.
pub fn restrict_to_side(records: &[ImageRecord], spec: &SplitSpec, side: Side) -> Vec<ImageRecord> {
    let classes = spec.classes(side);
    records
        .iter()
        .filter_map(|r| {
            let tuples: Vec<HoiTuple> = r
                .tuples
                .iter()
                .filter(|t| classes.contains(&t.object_class))
                .cloned()
                .collect();
            (!tuples.is_empty()).then(|| ImageRecord {
                tuples,
                ..r.clone()
            })
        })
        .collect()
}
