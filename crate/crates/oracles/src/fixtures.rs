//! Small training scenarios shared by the sanity tests and the acceptance run.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rrpn_core::annotations::{load_dataset, ImageRecord};
use rrpn_core::detector::{
    assign_targets, detection_loss, record_boxes, train_detector, ClassIndex, DetLoss, DetectorInit, DetectorTraining,
    OptimConfig,
};
use rrpn_core::features::{Backbone, BackboneConfig, EmbeddingTable, FeatureSet, TupleFeaturizer};
use rrpn_core::grid::ImageDims;
use rrpn_core::images::ImageStore;
use rrpn_core::nn::Sgd;
use rrpn_core::rrpn::{attention_loss, gaussian_target, train_rrpn_step, Rrpn, RrpnConfig};
use rrpn_core::synthworld::{generate_dataset, SceneSpec};

pub const RRPN_STEPS: usize = 200;
pub const RRPN_LR: f64 = 0.01;
pub const DET_EPOCHS: usize = 30;
pub const DET_LR: f64 = 0.004;
pub const DET_HIDDEN: usize = 16;
pub const MOMENTUM: f64 = 0.9;
pub const LOSS_BOUND: f64 = 0.05;
const INPUT: u32 = 160;

pub fn desk_backbone() -> BackboneConfig {
    BackboneConfig {
        input_size: INPUT,
        channels: vec![8, 16, 16, 16, 16],
        strides: vec![2, 2, 2, 1, 1],
    }
}

pub fn desk_rrpn() -> RrpnConfig {
    RrpnConfig {
        encoder: vec![16, 16, 24],
        decoder1: vec![16, 16, 16, 16, 8],
        decoder2: vec![24, 24, 16, 16, 16, 8],
    }
}

/// Five single-object scenes of one class, one per verb, written into `dir`.
pub fn five_scenes(dir: &Path) -> (Vec<ImageRecord>, EmbeddingTable) {
    let mut spec = SceneSpec {
        seed: 3,
        max_distractors: 0,
        ..SceneSpec::default()
    };
    spec.classes.truncate(2);
    spec.classes.iter_mut().for_each(|c| c.per_verb = 1);
    spec.distractor_classes.truncate(2);
    let s = generate_dataset(&spec, dir).expect("synthetic scenes");
    let mut records = load_dataset(&s.annotations).expect("synthetic annotations");
    records.truncate(5);
    assert!(records.iter().all(|r| r.tuples[0].object_class == spec.classes[0].name));
    (records, EmbeddingTable::load(&s.embeddings).expect("embeddings"))
}

/// Attention BCE on one fixed tuple after `steps` SGD steps on it alone.
pub fn rrpn_overfit(dir: &Path, steps: usize) -> f64 {
    let (records, table) = five_scenes(dir);
    let rec = &records[0];
    let tuple = &rec.tuples[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let backbone = Backbone::new(&desk_backbone(), &mut rng).expect("backbone");
    let mut images = ImageStore::new(dir);
    let (feats, _) = backbone.forward(&images.tensor(rec, INPUT).expect("image")).expect("features");
    let featurizer = TupleFeaturizer {
        grid: backbone.grid(),
        pose_sigma_cells: 2.0,
        table,
        active: FeatureSet::ALL,
    };
    let volume = featurizer.volume(&feats, rec, tuple).expect("volume");
    let dims = ImageDims::new(rec.width, rec.height);
    let target = gaussian_target(&tuple.object_box.expect("box"), dims, featurizer.grid).expect("target");
    let mut net = Rrpn::new(volume.channels(), &desk_rrpn(), &mut rng).expect("rrpn");
    let mut opt = Sgd::new(RRPN_LR, MOMENTUM, 0.0);
    let batch = [(volume.clone(), target.clone())];
    for _ in 0..steps {
        train_rrpn_step(&batch, &mut net, &mut opt, 1.0).expect("step");
    }
    attention_loss(&net.forward(&volume).expect("forward"), &target).expect("loss")
}

/// Mean detection loss over the five scenes after `epochs` of training on them.
pub fn detector_overfit(dir: &Path, epochs: usize) -> DetLoss {
    let (records, _) = five_scenes(dir);
    let names: BTreeSet<String> = records.iter().map(|r| r.tuples[0].object_class.clone()).collect();
    let classes = ClassIndex::new(&names);
    let optim = OptimConfig {
        lr: DET_LR,
        momentum: MOMENTUM,
        weight_decay: 0.0,
        batch_size: 1,
    };
    let opts = DetectorTraining {
        optim: &optim,
        epochs,
        head_hidden: DET_HIDDEN,
        freeze_backbone: false,
        seed: 1,
    };
    let mut images = ImageStore::new(dir);
    let (det, _) = train_detector(&records, &mut images, &classes, &opts, DetectorInit::Fresh(&desk_backbone()))
        .expect("training");
    let mut mean = DetLoss { cls: 0.0, loc: 0.0 };
    for r in &records {
        let t = assign_targets(&record_boxes(r), &classes, ImageDims::new(r.width, r.height), det.backbone.grid())
            .expect("targets");
        let pred = det.predict(&images.tensor(r, INPUT).expect("image")).expect("predict");
        let (l, _) = detection_loss(&pred, &t).expect("loss");
        mean.cls += l.cls / records.len() as f64;
        mean.loc += l.loc / records.len() as f64;
    }
    mean
}

/// A full pipeline configuration that runs in seconds: 64 px scenes, a
/// 16 x 16 grid, two frequent and two rare classes.
pub fn tiny_config() -> rrpn_core::config::PipelineConfig {
    use rrpn_core::config::PipelineConfig;
    let mut cfg = PipelineConfig::from_toml(TINY_TOML).expect("tiny config");
    let spec = cfg.data.synth.as_mut().expect("synth section");
    let rare: Vec<_> = spec.classes.iter().rev().take(2).cloned().collect();
    spec.classes.truncate(2);
    spec.classes.iter_mut().for_each(|c| c.per_verb = 10);
    spec.classes.extend(rare.into_iter().map(|mut c| {
        c.per_verb = 3;
        c
    }));
    spec.distractor_classes.truncate(2);
    cfg.validate().expect("tiny config is valid");
    cfg
}

const TINY_TOML: &str = r#"
seed = 5

[data]
test_fraction = 0.3

[data.synth]
image_size = 64
seed = 5
max_distractors = 1

[split]
n_target = 2

[model]
head_hidden = 4
pose_sigma_cells = 1.0
features = "I+P+V"

[model.backbone]
input_size = 64
channels = [8, 16, 16, 16, 16]
strides = [2, 2, 1, 1, 1]

[model.rrpn]
encoder = [16, 16, 24]
decoder1 = [16, 16, 16, 16, 8]
decoder2 = [24, 24, 16, 16, 16, 8]

[train]
lambda = 10.0
source_epochs = 15
target_epochs = 4
supervised_control = true

[train.optim]
lr = 0.003
momentum = 0.9
weight_decay = 1e-4
batch_size = 4
"#;
