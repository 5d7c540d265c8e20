//! Per-tuple feature grids (image, pose, verb) and their channel-wise fusion
//! into the attention network's input volume.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{HoiTuple, ImageRecord, Pose, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::grid::{GridDims, ImageDims};
use crate::nn::{ConvStack, LayerSpec, NamedTensor, Parameterized, StackCache};

/// Width of a verb embedding vector.
pub const VERB_DIM: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Image,
    Pose,
    Verb,
}

/// Which feature kinds feed the attention network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FeatureSet {
    pub image: bool,
    pub pose: bool,
    pub verb: bool,
}

impl FeatureSet {
    pub const ALL: FeatureSet = FeatureSet {
        image: true,
        pose: true,
        verb: true,
    };

    pub fn contains(&self, kind: FeatureKind) -> bool {
        match kind {
            FeatureKind::Image => self.image,
            FeatureKind::Pose => self.pose,
            FeatureKind::Verb => self.verb,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.image || self.pose || self.verb)
    }

    pub fn kinds(&self) -> Vec<FeatureKind> {
        [FeatureKind::Image, FeatureKind::Pose, FeatureKind::Verb]
            .into_iter()
            .filter(|k| self.contains(*k))
            .collect()
    }
}

impl Default for FeatureSet {
    fn default() -> Self {
        Self::ALL
    }
}

/// Compact `I+P+V` notation.
impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self
            .kinds()
            .into_iter()
            .map(|k| match k {
                FeatureKind::Image => "I",
                FeatureKind::Pose => "P",
                FeatureKind::Verb => "V",
            })
            .collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for FeatureSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut set = FeatureSet {
            image: false,
            pose: false,
            verb: false,
        };
        for part in s.split('+').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_uppercase().as_str() {
                "I" | "IMAGE" => set.image = true,
                "P" | "POSE" => set.pose = true,
                "V" | "VERB" => set.verb = true,
                other => {
                    return Err(Error::InvalidArgument(format!("unknown feature kind `{other}`")))
                }
            }
        }
        Ok(set)
    }
}

impl Serialize for FeatureSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for FeatureSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub kind: FeatureKind,
    pub values: Array3<f64>,
}

impl FeatureGrid {
    pub fn dims(&self) -> GridDims {
        let (_, rows, cols) = self.values.dim();
        GridDims { rows, cols }
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }
}

/// Gaussian joint heatmaps, one channel per joint, peak 1 at the joint.
///
/// Joints map to continuous grid coordinates (cell centres at integers);
/// absent joints leave their channel at zero.
pub fn render_pose_heatmaps(
    keypoints: &Pose,
    image: ImageDims,
    grid: GridDims,
    sigma_px: f64,
) -> Result<FeatureGrid> {
    if !(sigma_px > 0.0 && sigma_px.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma_px must be positive, got {sigma_px}")));
    }
    let (sx, sy) = grid.scale(image);
    let (sig_x, sig_y) = (sigma_px * sx, sigma_px * sy);
    let mut values = Array3::<f64>::zeros((NUM_JOINTS, grid.rows, grid.cols));
    for (j, kp) in keypoints.0.iter().enumerate() {
        let Some([x, y]) = *kp else { continue };
        if !(0.0..=image.width as f64).contains(&x) || !(0.0..=image.height as f64).contains(&y) {
            return Err(Error::InvalidArgument(format!(
                "joint {j} at ({x}, {y}) lies outside the {}x{} image",
                image.width, image.height
            )));
        }
        let (gx, gy) = grid.to_grid(image, x, y);
        let col_w: Vec<f64> = (0..grid.cols)
            .map(|c| (-(c as f64 - gx).powi(2) / (2.0 * sig_x * sig_x)).exp())
            .collect();
        for r in 0..grid.rows {
            let row_w = (-(r as f64 - gy).powi(2) / (2.0 * sig_y * sig_y)).exp();
            let mut dst = values.slice_mut(s![j, r, ..]);
            for (d, cw) in dst.iter_mut().zip(&col_w) {
                *d = row_w * cw;
            }
        }
    }
    Ok(FeatureGrid {
        kind: FeatureKind::Pose,
        values,
    })
}

/// Word vectors read from the usual whitespace-separated text layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    rows: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn parse(text: &str) -> Result<Self> {
        let mut rows = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let vals = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| {
                    Error::InvalidArgument(format!("embedding line {}: {e}", lineno + 1))
                })?;
            Self::check_row(token, &vals)?;
            if rows.insert(token.to_string(), vals).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "embedding line {}: duplicate token `{token}`",
                    lineno + 1
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn check_row(token: &str, v: &[f64]) -> Result<()> {
        if v.len() != VERB_DIM {
            return Err(Error::InvalidArgument(format!(
                "token `{token}` has {} components, expected {VERB_DIM}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("embedding for `{token}`")));
        }
        Ok(())
    }

    pub fn insert(&mut self, token: &str, v: Vec<f64>) -> Result<()> {
        Self::check_row(token, &v)?;
        self.rows.insert(token.to_string(), v);
        Ok(())
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.rows.get(token).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Text serialization, tokens sorted.
    pub fn to_text(&self) -> String {
        let sorted: BTreeMap<_, _> = self.rows.iter().collect();
        let mut out = String::new();
        for (tok, v) in sorted {
            out.push_str(tok);
            for x in v {
                out.push(' ');
                out.push_str(&x.to_string());
            }
            out.push('\n');
        }
        out
    }

    /// Deterministic random table over `tokens`, for synthetic data.
    pub fn random<R: Rng>(tokens: &[String], rng: &mut R) -> Self {
        let mut rows = HashMap::new();
        for t in tokens {
            let v: Vec<f64> = (0..VERB_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
            rows.insert(t.clone(), v);
        }
        Self { rows }
    }
}

/// Look up a verb. Multiword verbs ("sit on", "sit_on") not present verbatim
/// are embedded as the mean of their words.
pub fn embed_verb(verb: &str, table: &EmbeddingTable) -> Result<Vec<f64>> {
    if let Some(v) = table.get(verb) {
        return Ok(v.to_vec());
    }
    let words: Vec<&str> = verb
        .split(|c: char| c == '_' || c.is_whitespace())
        .filter(|w| !w.is_empty())
        .collect();
    if words.len() < 2 {
        return Err(Error::UnknownToken(verb.to_string()));
    }
    let mut acc = vec![0.0; VERB_DIM];
    for w in &words {
        let v = table.get(w).ok_or_else(|| Error::UnknownToken(w.to_string()))?;
        acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    let n = words.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Copy a verb vector to every grid position.
pub fn broadcast_verb(vector: &[f64], grid: GridDims) -> FeatureGrid {
    let values = Array3::from_shape_fn((vector.len(), grid.rows, grid.cols), |(k, _, _)| vector[k]);
    FeatureGrid {
        kind: FeatureKind::Verb,
        values,
    }
}

/// Layer layout of the image backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub input_size: u32,
    /// Output width of each of the five 3x3 layers.
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: 320,
            channels: vec![32, 48, 64, 64, 64],
            strides: vec![2, 2, 2, 1, 1],
        }
    }
}

impl BackboneConfig {
    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn out_channels(&self) -> usize {
        self.channels.last().copied().unwrap_or(0)
    }

    pub fn grid(&self) -> GridDims {
        GridDims::square(self.input_size as usize / self.total_stride())
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != self.strides.len() || self.channels.is_empty() {
            return Err(Error::config(
                "model.backbone",
                "channels and strides must be non-empty and of equal length",
            ));
        }
        if self.input_size as usize % self.total_stride() != 0 {
            return Err(Error::config(
                "model.backbone.input_size",
                "must be divisible by the total stride",
            ));
        }
        Ok(())
    }
}

/// Convolutional image feature extractor shared by the detector and the
/// attention network.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub input_size: u32,
    pub stack: ConvStack,
}

pub type BackboneCache = StackCache;

impl Backbone {
    pub fn new<R: Rng>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let specs: Vec<LayerSpec> = cfg
            .channels
            .iter()
            .zip(&cfg.strides)
            .map(|(&c, &s)| (c, 3, s))
            .collect();
        Ok(Self {
            input_size: cfg.input_size,
            stack: ConvStack::new(3, &specs, true, rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            input_size: self.input_size,
            stack: self.stack.zeros_like(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.stack.out_channels()
    }

    /// Spatial size of the feature map.
    pub fn grid(&self) -> GridDims {
        let n = self.input_size as usize;
        let (rows, cols) = self.stack.layers.iter().fold((n, n), |(h, w), l| l.output_dims(h, w));
        GridDims { rows, cols }
    }

    fn check_input(&self, image: &Array3<f64>) -> Result<()> {
        let n = self.input_size as usize;
        if image.dim() != (3, n, n) {
            return Err(Error::Shape(format!(
                "backbone expects a 3x{n}x{n} image, got {:?}",
                image.dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, image: &Array3<f64>) -> Result<(Array3<f64>, BackboneCache)> {
        self.check_input(image)?;
        self.stack.forward(image)
    }

    pub fn backward(&self, cache: &BackboneCache, dy: &Array3<f64>, grad: &mut Backbone) {
        self.stack.backward(cache, dy, &mut grad.stack, false);
    }
}

impl Parameterized for Backbone {
    fn tensors(&self) -> Vec<NamedTensor<'_>> {
        self.stack.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.stack.tensors_mut()
    }
}

pub fn extract_image_features(image: &Array3<f64>, params: &Backbone) -> Result<FeatureGrid> {
    params.check_input(image)?;
    Ok(FeatureGrid {
        kind: FeatureKind::Image,
        values: params.stack.infer(image)?,
    })
}

/// RGB bytes scaled to `[-1, 1]`, laid out `3 x rows x cols`.
pub fn image_to_tensor(img: &image::RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for ch in 0..3 {
            out[[ch, y as usize, x as usize]] = p[ch] as f64 / 127.5 - 1.0;
        }
    }
    out
}

/// Channel-wise concatenation of image, pose and verb grids.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub values: Array3<f64>,
    pub active: FeatureSet,
    /// Channel widths of the image, pose and verb slices, in that order.
    pub widths: [usize; 3],
}

impl FeatureVolume {
    pub fn dims(&self) -> GridDims {
        let (_, rows, cols) = self.values.dim();
        GridDims { rows, cols }
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    /// Channel range occupied by `kind`.
    pub fn slice_range(&self, kind: FeatureKind) -> std::ops::Range<usize> {
        let [i, p, v] = self.widths;
        match kind {
            FeatureKind::Image => 0..i,
            FeatureKind::Pose => i..i + p,
            FeatureKind::Verb => i + p..i + p + v,
        }
    }
}

/// Concatenate in fixed order (image, pose, verb). Inactive kinds keep their
/// channel width but are zero-filled, so the fused width never depends on
/// the ablation.
pub fn fuse(
    image: &FeatureGrid,
    pose: &FeatureGrid,
    verb: &FeatureGrid,
    active: FeatureSet,
) -> Result<FeatureVolume> {
    if active.is_empty() {
        return Err(Error::InvalidArgument("at least one feature kind must be active".into()));
    }
    for (g, kind) in [
        (image, FeatureKind::Image),
        (pose, FeatureKind::Pose),
        (verb, FeatureKind::Verb),
    ] {
        if g.kind != kind {
            return Err(Error::InvalidArgument(format!(
                "expected a {kind:?} grid, got {:?}",
                g.kind
            )));
        }
    }
    let dims = image.dims();
    if pose.dims() != dims || verb.dims() != dims {
        return Err(Error::Shape(format!(
            "spatial mismatch: image {:?}, pose {:?}, verb {:?}",
            dims,
            pose.dims(),
            verb.dims()
        )));
    }
    let widths = [image.channels(), pose.channels(), verb.channels()];
    let total: usize = widths.iter().sum();
    let mut values = Array3::<f64>::zeros((total, dims.rows, dims.cols));
    let mut start = 0;
    for (g, w) in [image, pose, verb].into_iter().zip(widths) {
        if active.contains(g.kind) {
            values.slice_mut(s![start..start + w, .., ..]).assign(&g.values);
        }
        start += w;
    }
    Ok(FeatureVolume {
        values,
        active,
        widths,
    })
}

/// Builds the fused input volume for one tuple from precomputed backbone
/// features.
#[derive(Debug, Clone)]
pub struct TupleFeaturizer {
    pub grid: GridDims,
    /// Pose bump width in grid cells.
    pub pose_sigma_cells: f64,
    pub table: EmbeddingTable,
    pub active: FeatureSet,
}

impl TupleFeaturizer {
    pub fn pose_sigma_px(&self, image: ImageDims) -> f64 {
        self.pose_sigma_cells * image.width as f64 / self.grid.cols as f64
    }

    pub fn pose_grid(&self, record: &ImageRecord, tuple: &HoiTuple) -> Result<FeatureGrid> {
        let dims = ImageDims::new(record.width, record.height);
        render_pose_heatmaps(&tuple.keypoints, dims, self.grid, self.pose_sigma_px(dims)).map_err(
            |e| Error::schema(&record.image_id, "keypoints", e.to_string()),
        )
    }

    pub fn verb_grid(&self, verb: &str) -> Result<FeatureGrid> {
        Ok(broadcast_verb(&embed_verb(verb, &self.table)?, self.grid))
    }

    pub fn volume(
        &self,
        image_features: &Array3<f64>,
        record: &ImageRecord,
        tuple: &HoiTuple,
    ) -> Result<FeatureVolume> {
        let image = FeatureGrid {
            kind: FeatureKind::Image,
            values: image_features.clone(),
        };
        if image.dims() != self.grid {
            return Err(Error::Shape(format!(
                "backbone grid {:?} differs from configured grid {:?}",
                image.dims(),
                self.grid
            )));
        }
        fuse(
            &image,
            &self.pose_grid(record, tuple)?,
            &self.verb_grid(&tuple.verb)?,
            self.active,
        )
    }
}
