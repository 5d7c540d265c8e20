//! Deterministic synthetic HOI scenes: an 18-joint stick figure interacting
//! with a coloured shape whose position follows the verb, plus distractor
//! shapes placed away from the figure.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{save_dataset, BoundingBox, HoiTuple, ImageRecord, Keypoint, Pose, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::features::EmbeddingTable;

/// Geometry below is authored for a 320 px image and scaled to `image_size`.
const REFERENCE_SIZE: f64 = 320.0;
const MAX_ATTEMPTS: usize = 200;

// Joint indices, 18-joint body layout.
pub const NOSE: usize = 0;
pub const NECK: usize = 1;
pub const R_SHOULDER: usize = 2;
pub const R_ELBOW: usize = 3;
pub const R_WRIST: usize = 4;
pub const L_SHOULDER: usize = 5;
pub const L_ELBOW: usize = 6;
pub const L_WRIST: usize = 7;
pub const R_HIP: usize = 8;
pub const R_KNEE: usize = 9;
pub const R_ANKLE: usize = 10;
pub const L_HIP: usize = 11;
pub const L_KNEE: usize = 12;
pub const L_ANKLE: usize = 13;
pub const R_EYE: usize = 14;
pub const L_EYE: usize = 15;
pub const R_EAR: usize = 16;
pub const L_EAR: usize = 17;

const LIMBS: [(usize, usize); 13] = [
    (NOSE, NECK),
    (NECK, R_SHOULDER),
    (R_SHOULDER, R_ELBOW),
    (R_ELBOW, R_WRIST),
    (NECK, L_SHOULDER),
    (L_SHOULDER, L_ELBOW),
    (L_ELBOW, L_WRIST),
    (NECK, R_HIP),
    (R_HIP, R_KNEE),
    (R_KNEE, R_ANKLE),
    (NECK, L_HIP),
    (L_HIP, L_KNEE),
    (L_KNEE, L_ANKLE),
];

/// Where a verb puts the object relative to the body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Centre within 12 px (reference scale) of a wrist.
    Hand,
    /// Centred under the hips, top edge at hip height.
    BelowHips,
    /// Beside an ankle.
    Foot,
    /// Over the head.
    Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Ring,
    Cross,
}

impl Shape {
    /// Does normalised point `(u, v)` in `[-1, 1]^2` fall inside the shape?
    fn covers(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::Triangle => v >= -1.0 && v <= 1.0 && u.abs() <= (v + 1.0) / 2.0,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
            Shape::Cross => (u.abs() <= 0.34 || v.abs() <= 0.34) && u.abs() <= 1.0 && v.abs() <= 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerbSpec {
    pub name: String,
    pub placement: Placement,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub shape: Shape,
    pub color: [u8; 3],
    /// Scenes generated per verb.
    pub per_verb: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub image_size: u32,
    pub seed: u64,
    pub verbs: Vec<VerbSpec>,
    pub classes: Vec<ClassSpec>,
    /// Classes distractors are drawn from.
    pub distractor_classes: Vec<String>,
    pub max_distractors: usize,
    /// Object side range in reference-scale pixels.
    pub object_size: [f64; 2],
}

const RED: [u8; 3] = [205, 45, 40];
const BLUE: [u8; 3] = [40, 75, 205];

impl Default for SceneSpec {
    fn default() -> Self {
        let verbs = [
            ("hold", Placement::Hand),
            ("ride", Placement::BelowHips),
            ("sit_on", Placement::BelowHips),
            ("kick", Placement::Foot),
            ("wear", Placement::Head),
        ]
        .into_iter()
        .map(|(n, p)| VerbSpec {
            name: n.into(),
            placement: p,
        })
        .collect();
        let frequent = [
            ("red_circle", Shape::Circle, RED),
            ("blue_square", Shape::Square, BLUE),
            ("red_triangle", Shape::Triangle, RED),
            ("blue_diamond", Shape::Diamond, BLUE),
            ("red_square", Shape::Square, RED),
            ("blue_circle", Shape::Circle, BLUE),
            ("red_diamond", Shape::Diamond, RED),
            ("blue_triangle", Shape::Triangle, BLUE),
            ("red_ring", Shape::Ring, RED),
            ("blue_cross", Shape::Cross, BLUE),
        ];
        let rare = [("blue_ring", Shape::Ring, BLUE), ("red_cross", Shape::Cross, RED)];
        let mk = |(n, s, c): (&str, Shape, [u8; 3]), per_verb| ClassSpec {
            name: n.into(),
            shape: s,
            color: c,
            per_verb,
        };
        let mut classes: Vec<ClassSpec> = frequent.into_iter().map(|c| mk(c, 30)).collect();
        classes.extend(rare.into_iter().map(|c| mk(c, 15)));
        Self {
            image_size: 320,
            seed: 0,
            verbs,
            distractor_classes: frequent.iter().map(|c| c.0.to_string()).collect(),
            classes,
            max_distractors: 2,
            object_size: [56.0, 80.0],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.verbs.is_empty() {
            return Err(Error::config("synth.verbs", "at least one verb is required"));
        }
        if self.classes.len() < 2 {
            return Err(Error::config("synth.classes", "at least two object classes are required"));
        }
        if let Some(c) = self.classes.iter().find(|c| c.per_verb == 0) {
            return Err(Error::config("synth.classes", format!("class `{}` has zero count", c.name)));
        }
        for d in &self.distractor_classes {
            if !self.classes.iter().any(|c| &c.name == d) {
                return Err(Error::config("synth.distractor_classes", format!("unknown class `{d}`")));
            }
        }
        if self.image_size < 64 {
            return Err(Error::config("synth.image_size", "must be at least 64"));
        }
        let [lo, hi] = self.object_size;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::config("synth.object_size", "expected 0 < min <= max"));
        }
        Ok(())
    }

    pub fn total_tuples(&self) -> usize {
        self.classes.iter().map(|c| c.per_verb).sum::<usize>() * self.verbs.len()
    }

    fn verb(&self, name: &str) -> Result<&VerbSpec> {
        self.verbs
            .iter()
            .find(|v| v.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("verb `{name}` not in scene spec")))
    }

    fn class(&self, name: &str) -> Result<&ClassSpec> {
        self.classes
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }

    /// Every word appearing in a verb label, for the embedding table.
    pub fn verb_words(&self) -> Vec<String> {
        let mut words: Vec<String> = self
            .verbs
            .iter()
            .flat_map(|v| v.name.split('_').map(str::to_string).collect::<Vec<_>>())
            .collect();
        words.sort();
        words.dedup();
        words
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: RgbImage,
    pub keypoints: Pose,
    pub object_box: BoundingBox,
    pub distractors: Vec<(String, BoundingBox)>,
}

fn dir(angle: f64) -> (f64, f64) {
    (angle.sin(), angle.cos())
}

fn add(p: Keypoint, d: (f64, f64), len: f64) -> Keypoint {
    [p[0] + d.0 * len, p[1] + d.1 * len]
}

/// Random pose around hip centre `hip`, body scale `f` (pixels per reference unit).
fn pose<R: Rng>(rng: &mut R, hip: Keypoint, f: f64, placement: Placement) -> [Keypoint; NUM_JOINTS] {
    let mut j = [[0.0; 2]; NUM_JOINTS];
    j[NECK] = [hip[0], hip[1] - 70.0 * f];
    j[NOSE] = [hip[0], hip[1] - 92.0 * f];
    j[R_EYE] = [j[NOSE][0] - 5.0 * f, j[NOSE][1] - 5.0 * f];
    j[L_EYE] = [j[NOSE][0] + 5.0 * f, j[NOSE][1] - 5.0 * f];
    j[R_EAR] = [j[NOSE][0] - 10.0 * f, j[NOSE][1] - 2.0 * f];
    j[L_EAR] = [j[NOSE][0] + 10.0 * f, j[NOSE][1] - 2.0 * f];
    j[R_SHOULDER] = [j[NECK][0] - 20.0 * f, j[NECK][1] + 2.0 * f];
    j[L_SHOULDER] = [j[NECK][0] + 20.0 * f, j[NECK][1] + 2.0 * f];
    for (sh, el, wr, side) in [(R_SHOULDER, R_ELBOW, R_WRIST, -1.0), (L_SHOULDER, L_ELBOW, L_WRIST, 1.0)] {
        let a: f64 = rng.random_range(0.15..2.6);
        let b: f64 = a + rng.random_range(-0.9..0.9);
        j[el] = add(j[sh], (side * a.sin(), a.cos()), 30.0 * f);
        j[wr] = add(j[el], (side * b.sin(), b.cos()), 28.0 * f);
    }
    j[R_HIP] = [hip[0] - 11.0 * f, hip[1]];
    j[L_HIP] = [hip[0] + 11.0 * f, hip[1]];
    let spread = match placement {
        Placement::BelowHips => 0.5..1.0,
        _ => 0.0..0.35,
    };
    for (hp, kn, an, side) in [(R_HIP, R_KNEE, R_ANKLE, -1.0), (L_HIP, L_KNEE, L_ANKLE, 1.0)] {
        let a = rng.random_range(spread.clone());
        let b = a + rng.random_range(-0.3..0.3);
        let (dx, dy) = dir(a);
        j[kn] = add(j[hp], (side * dx, dy), 38.0 * f);
        let (dx, dy) = dir(b);
        j[an] = add(j[kn], (side * dx, dy), 36.0 * f);
    }
    j
}

fn point_in_disc<R: Rng>(rng: &mut R, radius: f64) -> (f64, f64) {
    loop {
        let x = rng.random_range(-1.0..=1.0);
        let y = rng.random_range(-1.0..=1.0);
        if x * x + y * y <= 1.0 {
            return (x * radius, y * radius);
        }
    }
}

fn boxes_overlap(a: &BoundingBox, b: &BoundingBox) -> bool {
    a.x_min < b.x_max && b.x_min < a.x_max && a.y_min < b.y_max && b.y_min < a.y_max
}

fn grow(b: &BoundingBox, m: f64) -> BoundingBox {
    BoundingBox::new(b.x_min - m, b.y_min - m, b.x_max + m, b.y_max + m)
}

fn centred_box(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
    BoundingBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

fn object_dims<R: Rng>(rng: &mut R, spec: &SceneSpec, k: f64) -> (f64, f64) {
    let [lo, hi] = spec.object_size;
    let side = rng.random_range(lo..=hi) * k;
    let aspect: f64 = rng.random_range(0.8..1.25);
    ((side * aspect.sqrt()).round(), (side / aspect.sqrt()).round())
}

fn paint_shape(img: &mut RgbImage, b: &BoundingBox, shape: Shape, color: [u8; 3]) {
    let (cx, cy) = b.center();
    let (hw, hh) = (b.width() / 2.0, b.height() / 2.0);
    let x0 = b.x_min.floor().max(0.0) as u32;
    let y0 = b.y_min.floor().max(0.0) as u32;
    let x1 = (b.x_max.ceil() as u32).min(img.width());
    let y1 = (b.y_max.ceil() as u32).min(img.height());
    for y in y0..y1 {
        for x in x0..x1 {
            let u = (x as f64 + 0.5 - cx) / hw;
            let v = (y as f64 + 0.5 - cy) / hh;
            if shape.covers(u, v) {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
}

fn paint_segment(img: &mut RgbImage, a: Keypoint, b: Keypoint, radius: f64, color: [u8; 3]) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let x0 = (a[0].min(b[0]) - radius).floor().max(0.0) as u32;
    let y0 = (a[1].min(b[1]) - radius).floor().max(0.0) as u32;
    let x1 = (a[0].max(b[0]) + radius).ceil().min(w) as u32;
    let y1 = (a[1].max(b[1]) + radius).ceil().min(h) as u32;
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = (dx * dx + dy * dy).max(1e-12);
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (((px - a[0]) * dx + (py - a[1]) * dy) / len2).clamp(0.0, 1.0);
            let (qx, qy) = (a[0] + t * dx - px, a[1] + t * dy - py);
            if qx * qx + qy * qy <= radius * radius {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
}

/// Render one interaction scene.
pub fn generate_scene<R: Rng>(rng: &mut R, verb: &str, object_class: &str, spec: &SceneSpec) -> Result<Scene> {
    let placement = spec.verb(verb)?.placement;
    let class = spec.class(object_class)?;
    let size = spec.image_size as f64;
    let k = size / REFERENCE_SIZE;

    for _ in 0..MAX_ATTEMPTS {
        let f = k * rng.random_range(0.85..1.1);
        let hip = [rng.random_range(0.15 * size..0.85 * size), rng.random_range(0.4 * size..0.7 * size)];
        let joints = pose(rng, hip, f, placement);
        let (w, h) = object_dims(rng, spec, k);
        let (cx, cy) = match placement {
            Placement::Hand => {
                let wrist = joints[*[R_WRIST, L_WRIST].choose(rng).expect("non-empty")];
                let (jx, jy) = point_in_disc(rng, 12.0 * k);
                (wrist[0] + jx, wrist[1] + jy)
            }
            Placement::BelowHips => {
                let (jx, jy) = point_in_disc(rng, 4.0 * k);
                (hip[0] + jx, hip[1] + h / 2.0 + jy)
            }
            Placement::Foot => {
                let (ankle, side) = *[(R_ANKLE, -1.0), (L_ANKLE, 1.0)].choose(rng).expect("non-empty");
                let a = joints[ankle];
                let (jx, jy) = point_in_disc(rng, 6.0 * k);
                (a[0] + side * w / 2.0 + jx, a[1] - h / 4.0 + jy)
            }
            Placement::Head => {
                let (jx, jy) = point_in_disc(rng, 4.0 * k);
                (joints[NOSE][0] + jx, joints[NOSE][1] - 6.0 * k + jy)
            }
        };
        let object_box = centred_box(cx.round(), cy.round(), w, h);
        let inside = |b: &BoundingBox| b.x_min >= 1.0 && b.y_min >= 1.0 && b.x_max <= size - 1.0 && b.y_max <= size - 1.0;
        let joints_inside = joints
            .iter()
            .all(|p| p[0] >= 2.0 && p[1] >= 2.0 && p[0] <= size - 2.0 && p[1] <= size - 2.0);
        if !inside(&object_box) || !joints_inside {
            continue;
        }

        let mut figure = BoundingBox::new(size, size, 0.0, 0.0);
        for p in &joints {
            figure.x_min = figure.x_min.min(p[0]);
            figure.y_min = figure.y_min.min(p[1]);
            figure.x_max = figure.x_max.max(p[0]);
            figure.y_max = figure.y_max.max(p[1]);
        }
        let keep_out = [grow(&figure, 14.0 * k), grow(&object_box, 10.0 * k)];
        let pool: Vec<&String> = spec.distractor_classes.iter().filter(|c| *c != object_class).collect();
        let n_distractors = if pool.is_empty() { 0 } else { rng.random_range(0..=spec.max_distractors) };
        let mut distractors: Vec<(String, BoundingBox)> = Vec::new();
        for _ in 0..n_distractors {
            let name = (*pool.choose(rng).expect("non-empty")).clone();
            let (dw, dh) = object_dims(rng, spec, k);
            for _ in 0..40 {
                let dx = rng.random_range(dw / 2.0 + 1.0..size - dw / 2.0 - 1.0).round();
                let dy = rng.random_range(dh / 2.0 + 1.0..size - dh / 2.0 - 1.0).round();
                let b = centred_box(dx, dy, dw, dh);
                let clash = keep_out.iter().any(|o| boxes_overlap(o, &b))
                    || distractors.iter().any(|(_, o)| boxes_overlap(&grow(o, 4.0 * k), &b));
                if !clash {
                    distractors.push((name, b));
                    break;
                }
            }
        }

        let mut img = RgbImage::new(spec.image_size, spec.image_size);
        for p in img.pixels_mut() {
            let n: i16 = rng.random_range(-8..=8);
            let g = (205 + n) as u8;
            *p = Rgb([g, g, (200 + n) as u8]);
        }
        let ink = [45, 40, 40];
        for (a, b) in LIMBS {
            paint_segment(&mut img, joints[a], joints[b], 2.6 * f, ink);
        }
        paint_segment(&mut img, joints[NOSE], joints[NOSE], 11.0 * f, [70, 60, 55]);
        for (name, b) in &distractors {
            let c = spec.class(name)?;
            paint_shape(&mut img, b, c.shape, c.color);
        }
        paint_shape(&mut img, &object_box, class.shape, class.color);

        let mut kp = Pose::empty();
        for (slot, p) in kp.0.iter_mut().zip(joints) {
            *slot = Some(p);
        }
        return Ok(Scene {
            image: img,
            keypoints: kp,
            object_box,
            distractors,
        });
    }
    Err(Error::Placement(MAX_ATTEMPTS))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub annotations: PathBuf,
    pub embeddings: PathBuf,
    pub images: usize,
    pub tuples: usize,
}

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";

/// Write `images/*.png`, `annotations.json` and `embeddings.txt` under
/// `out_dir`. Scene `i` draws from stream `i` of the seeded generator, so the
/// output is byte-identical for a given spec.
pub fn generate_dataset(spec: &SceneSpec, out_dir: &Path) -> Result<SynthSummary> {
    spec.validate()?;
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut records = Vec::with_capacity(spec.total_tuples());
    let mut index = 0u64;
    for class in &spec.classes {
        for verb in &spec.verbs {
            for _ in 0..class.per_verb {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(index);
                let scene = generate_scene(&mut rng, &verb.name, &class.name, spec)?;
                let image_id = format!("syn_{index:05}");
                let rel = PathBuf::from("images").join(format!("{image_id}.png"));
                let path = out_dir.join(&rel);
                scene
                    .image
                    .save_with_format(&path, image::ImageFormat::Png)
                    .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
                records.push(ImageRecord {
                    image_id,
                    image_path: rel,
                    width: spec.image_size,
                    height: spec.image_size,
                    tuples: vec![HoiTuple {
                        verb: verb.name.clone(),
                        object_class: class.name.clone(),
                        object_box: Some(scene.object_box),
                        keypoints: scene.keypoints,
                    }],
                });
                index += 1;
            }
        }
    }
    let annotations = out_dir.join(ANNOTATIONS_FILE);
    save_dataset(&annotations, &records)?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    let table = EmbeddingTable::random(&spec.verb_words(), &mut rng);
    let embeddings = out_dir.join(EMBEDDINGS_FILE);
    crate::util::write_atomic(&embeddings, table.to_text().as_bytes())?;

    Ok(SynthSummary {
        annotations,
        embeddings,
        images: records.len(),
        tuples: records.len(),
    })
}
