//! Finite-difference scenarios for every hand-written backward pass, on a
//! tiny model so each runs in well under a second.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rrpn_core::annotations::{BoundingBox, HoiTuple, ImageRecord, Pose};
use rrpn_core::detector::{
    assign_targets, detection_loss, detector_sample_grad, init_detector, record_boxes, ClassIndex, DetPrediction,
    DetectorInit,
};
use rrpn_core::features::{BackboneConfig, EmbeddingTable, FeatureSet, TupleFeaturizer};
use rrpn_core::gradcheck::{check_parameters, check_slice, GradCheckReport};
use rrpn_core::grid::{GridDims, ImageDims};
use rrpn_core::nn::{sigmoid, Parameterized};
use rrpn_core::rrpn::{
    attention_loss, attention_loss_grad, attention_loss_grad_logits, gaussian_target, AttentionMap, RrpnConfig,
};
use rrpn_core::training::{joint_sample_grad, ModelConfig, SourceModel};

pub const H: f64 = 1e-5;
pub const FLOOR: f64 = 1e-6;
pub const TOL: f64 = 1e-4;
pub const COORDS: usize = 120;
pub const MIN_SMOOTH: usize = 100;
/// At most this share of sampled coordinates may straddle a ReLU kink.
pub const MAX_KINK_SHARE: f64 = 0.05;
pub const JOINT_LAMBDA: f64 = 10.0;

/// `Err` describes the first way `report` falls short.
pub fn verdict(report: &GradCheckReport) -> Result<(), String> {
    let bad = report.failures(TOL);
    if let Some(first) = bad.first() {
        return Err(format!("{} of {} coordinates exceed {TOL}; first {first:?}", bad.len(), report.coords.len()));
    }
    if report.smooth() < MIN_SMOOTH {
        return Err(format!("only {} smooth coordinates", report.smooth()));
    }
    if report.kinks() as f64 > MAX_KINK_SHARE * report.coords.len() as f64 {
        return Err(format!("{} kink crossings", report.kinks()));
    }
    Ok(())
}

/// Zero-initialised biases put some pre-activations exactly on the ReLU
/// kink; a small perturbation moves the check to a differentiable point.
fn jitter<P: Parameterized>(p: &mut P, rng: &mut ChaCha8Rng) {
    for t in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    }
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_size: 32,
            channels: vec![4, 5, 4, 4, 4],
            strides: vec![2, 2, 1, 1, 1],
        },
        rrpn: RrpnConfig {
            encoder: vec![4, 4, 5],
            decoder1: vec![4, 4, 4, 4, 3],
            decoder2: vec![5, 4, 4, 4, 4, 3],
        },
        head_hidden: 5,
        pose_sigma_cells: 1.0,
        features: FeatureSet::ALL,
    }
}

pub fn record() -> ImageRecord {
    let mut pose = Pose::empty();
    for j in 0..18 {
        pose.0[j] = Some([4.0 + 1.3 * j as f64, 6.0 + 0.9 * j as f64]);
    }
    let tuple = |verb: &str, class: &str, b: BoundingBox| HoiTuple {
        verb: verb.into(),
        object_class: class.into(),
        object_box: Some(b),
        keypoints: pose.clone(),
    };
    ImageRecord {
        image_id: "g".into(),
        image_path: "g.png".into(),
        width: 32,
        height: 32,
        tuples: vec![
            tuple("hold", "cup", BoundingBox::new(3.0, 5.0, 15.0, 17.0)),
            tuple("kick", "ball", BoundingBox::new(14.0, 12.0, 30.0, 29.0)),
        ],
    }
}

fn image(rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_fn((3, 32, 32), |_| rng.random_range(-1.0..1.0))
}

pub fn featurizer(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> TupleFeaturizer {
    TupleFeaturizer {
        grid: cfg.backbone.grid(),
        pose_sigma_cells: cfg.pose_sigma_cells,
        table: EmbeddingTable::random(&["hold".into(), "kick".into()], rng),
        active: cfg.features,
    }
}

pub fn classes() -> ClassIndex {
    ClassIndex(vec!["ball".into(), "cup".into()])
}

/// Attention BCE with respect to probabilities and to logits.
pub fn bce() -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p: Vec<f64> = (0..64).map(|_| rng.random_range(0.05..0.95)).collect();
    let t = gaussian_target(&BoundingBox::new(4.0, 8.0, 20.0, 28.0), ImageDims::new(32, 32), GridDims::square(8))
        .expect("target");
    let map = |v: &[f64]| AttentionMap {
        values: Array2::from_shape_vec((8, 8), v.to_vec()).expect("8x8"),
    };
    let g = attention_loss_grad(&map(&p), &t).expect("grad");
    let probs = check_slice(
        &p,
        g.as_slice().expect("contiguous"),
        |v| attention_loss(&map(v), &t).expect("loss"),
        COORDS,
        H,
        FLOOR,
        &mut rng,
    );

    let z: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
    let from_logits = |v: &[f64]| AttentionMap {
        values: Array2::from_shape_vec((8, 8), v.iter().map(|&x| sigmoid(x)).collect()).expect("8x8"),
    };
    let g = attention_loss_grad_logits(&from_logits(&z), &t).expect("grad");
    let logits = check_slice(
        &z,
        g.as_slice().expect("contiguous"),
        |v| attention_loss(&from_logits(v), &t).expect("loss"),
        COORDS,
        H,
        FLOOR,
        &mut rng,
    );
    vec![("bce wrt probabilities", probs), ("bce wrt logits", logits)]
}

/// Attention loss through the RRPN, for its parameters and its input volume.
pub fn rrpn() -> Vec<(&'static str, GradCheckReport)> {
    let cfg = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut model = SourceModel::new(&cfg, classes(), 3).expect("model");
    jitter(&mut model, &mut rng);
    let feat = featurizer(&cfg, &mut rng);
    let rec = record();
    let feats = Array3::from_shape_fn((4, 8, 8), |_| rng.random_range(0.0..1.0));
    let volume = feat.volume(&feats, &rec, &rec.tuples[0]).expect("volume");
    let target = gaussian_target(&rec.tuples[0].object_box.expect("box"), ImageDims::new(32, 32), feat.grid)
        .expect("target");

    let loss = |net: &rrpn_core::rrpn::Rrpn, v: &rrpn_core::features::FeatureVolume| {
        let (z, _) = net.forward_logits(v).expect("forward");
        attention_loss(&AttentionMap { values: z.mapv(sigmoid) }, &target).expect("loss")
    };
    let (z, cache) = model.rrpn.forward_logits(&volume).expect("forward");
    let dz = attention_loss_grad_logits(&AttentionMap { values: z.mapv(sigmoid) }, &target).expect("grad");
    let mut grad = model.rrpn.zeros_like();
    let dvol = model.rrpn.backward(&cache, &dz, &mut grad);
    let params = check_parameters(&model.rrpn, &grad, |net| loss(net, &volume), COORDS, H, FLOOR, &mut rng);

    let x = volume.values.as_slice().expect("contiguous").to_vec();
    let input = check_slice(
        &x,
        dvol.as_slice().expect("contiguous"),
        |v| {
            let mut vol = volume.clone();
            vol.values = Array3::from_shape_vec(volume.values.raw_dim(), v.to_vec()).expect("shape");
            loss(&model.rrpn, &vol)
        },
        COORDS,
        H,
        FLOOR,
        &mut rng,
    );
    vec![("rrpn parameters", params), ("rrpn input", input)]
}

/// Detection loss with respect to the raw head output.
pub fn detection_head_output() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rec = record();
    let target = assign_targets(&record_boxes(&rec), &classes(), ImageDims::new(32, 32), GridDims::square(8))
        .expect("targets");
    let logits = Array3::from_shape_fn((3, 8, 8), |_| rng.random_range(-2.0..2.0));
    let offsets = Array3::from_shape_fn((4, 8, 8), |_| rng.random_range(0.0..4.0));
    let pred = DetPrediction { logits, offsets };
    let (_, g) = detection_loss(&pred, &target).expect("loss");
    let n_logits = pred.logits.len();
    let mut x = pred.logits.as_slice().expect("contiguous").to_vec();
    x.extend_from_slice(pred.offsets.as_slice().expect("contiguous"));
    let mut ga = g.logits.as_slice().expect("contiguous").to_vec();
    ga.extend_from_slice(g.offsets.as_slice().expect("contiguous"));
    check_slice(
        &x,
        &ga,
        |v| {
            let p = DetPrediction {
                logits: Array3::from_shape_vec((3, 8, 8), v[..n_logits].to_vec()).expect("shape"),
                offsets: Array3::from_shape_vec((4, 8, 8), v[n_logits..].to_vec()).expect("shape"),
            };
            detection_loss(&p, &target).expect("loss").0.total()
        },
        COORDS,
        H,
        FLOOR,
        &mut rng,
    )
}

/// Detection loss through head and backbone.
pub fn detector_parameters() -> GradCheckReport {
    let cfg = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut det = init_detector(&classes(), DetectorInit::Fresh(&cfg.backbone), cfg.head_hidden, 6).expect("detector");
    jitter(&mut det, &mut rng);
    let img = image(&mut rng);
    let rec = record();
    let target =
        assign_targets(&record_boxes(&rec), &classes(), ImageDims::new(32, 32), det.backbone.grid()).expect("targets");
    let mut grad = det.clone();
    Parameterized::zero_(&mut grad);
    detector_sample_grad(&det, &img, &target, 1.0, &mut grad, true).expect("grad");
    check_parameters(
        &det,
        &grad,
        |d| detection_loss(&d.predict(&img).expect("predict"), &target).expect("loss").0.total(),
        COORDS,
        H,
        FLOOR,
        &mut rng,
    )
}

/// The jittered model, its analytic joint gradient at `lambda`, and the
/// finite-difference report for that gradient when `check` is set.
pub fn joint_source(lambda: f64, check: bool) -> (SourceModel, Option<GradCheckReport>) {
    let cfg = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut model = SourceModel::new(&cfg, classes(), 8).expect("model");
    jitter(&mut model, &mut rng);
    let feat = featurizer(&cfg, &mut rng);
    let img = image(&mut rng);
    let rec = record();
    let target = assign_targets(&record_boxes(&rec), &classes(), ImageDims::new(32, 32), feat.grid).expect("targets");
    let mut grad = model.zeros_like();
    joint_sample_grad(&model, &feat, &rec, &img, &target, lambda, 1.0, &mut grad).expect("grad");
    let report = check.then(|| {
        let loss = |m: &SourceModel| {
            let mut scratch = m.zeros_like();
            let l = joint_sample_grad(m, &feat, &rec, &img, &target, lambda, 1.0, &mut scratch).expect("loss");
            l.cls + l.loc + lambda * l.att.unwrap_or(0.0)
        };
        check_parameters(&model, &grad, loss, 200, H, FLOOR, &mut rng)
    });
    (grad, report)
}

/// Every scenario, labelled.
pub fn all() -> Vec<(&'static str, GradCheckReport)> {
    let mut out = bce();
    out.extend(rrpn());
    out.push(("detection loss wrt head output", detection_head_output()));
    out.push(("detector parameters", detector_parameters()));
    out.push(("joint source loss", joint_source(JOINT_LAMBDA, true).1.expect("checked")));
    out
}
