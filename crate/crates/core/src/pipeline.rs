//! The two-phase run: joint source training, pseudo annotation of target
//! tuples, target detector training on pseudo boxes, and evaluation. Each
//! phase reads and writes files under one output directory so the phases can
//! also be run one at a time.

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{
    filter_no_interaction, load_dataset, restrict_to_side, save_dataset, split_by_frequency, ImageRecord, Side,
    SplitSpec,
};
use crate::checkpoint::{manifest_path, save_detector, save_source_model, Checkpoint, CheckpointManifest, CheckpointMeta};
use crate::config::{seeds, PipelineConfig};
use crate::detector::{detect, train_detector, ClassIndex, DetLoss, Detector, DetectorInit, DetectorTraining};
use crate::error::{Error, Result};
use crate::features::{Backbone, EmbeddingTable, TupleFeaturizer};
use crate::grid::ImageDims;
use crate::images::ImageStore;
use crate::metrics::{mean_average_precision, tuple_recall, ApResult, EvalPair, ImageDetection};
use crate::pseudolabel::{box_from_attention, generate_pseudo_annotations, PseudoLabeler, PseudoOutput, PseudoReport};
use crate::rrpn::AttentionMap;
use crate::synthworld::generate_dataset;
use crate::training::{train_source, JointLoss, JointTraining, SourceModel};
use crate::util::{read_json, write_json};

pub const SOURCE_CKPT: &str = "checkpoints/source";
pub const TARGET_WEAK_CKPT: &str = "checkpoints/target_weak";
pub const TARGET_SUPERVISED_CKPT: &str = "checkpoints/target_supervised";
pub const PSEUDO_FILE: &str = "pseudo/pseudo_annotations.json";
pub const PSEUDO_REPORT_FILE: &str = "pseudo/pseudo_report.json";
pub const REPORT_FILE: &str = "report.json";

/// Filtered dataset, class split and image-level train/test partition.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: SplitSpec,
    pub train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
    pub images_root: PathBuf,
    pub table: EmbeddingTable,
}

impl Prepared {
    pub fn side(&self, test: bool, side: Side) -> Vec<ImageRecord> {
        restrict_to_side(if test { &self.test } else { &self.train }, &self.split, side)
    }
}

/// Partition images into train and test, stratified by the set of classes
/// each image contains, so rare classes land on both sides.
pub fn split_train_test(records: &[ImageRecord], test_fraction: f64, seed: u64) -> (Vec<ImageRecord>, Vec<ImageRecord>) {
    let mut groups: BTreeMap<String, Vec<&ImageRecord>> = BTreeMap::new();
    for r in records {
        let mut classes: Vec<&str> = r.tuples.iter().map(|t| t.object_class.as_str()).collect();
        classes.sort_unstable();
        classes.dedup();
        groups.entry(classes.join("+")).or_default().push(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_ids = std::collections::HashSet::new();
    for group in groups.values_mut() {
        group.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        group.shuffle(&mut rng);
        let n = (group.len() as f64 * test_fraction).round() as usize;
        test_ids.extend(group.iter().take(n).map(|r| r.image_id.clone()));
    }
    records.iter().cloned().partition(|r| !test_ids.contains(&r.image_id))
}

/// Load (or synthesize) the dataset, filter, split classes and images, and
/// write `data/{split,train,test}.json` under `out`.
pub fn prepare_data(cfg: &PipelineConfig, out: &Path) -> Result<Prepared> {
    let d = &cfg.data;
    let (annotations, embeddings, images_root) = match (&d.synth, &d.annotations) {
        (Some(spec), _) => {
            let dir = out.join("synth");
            let summary = generate_dataset(spec, &dir)?;
            (summary.annotations, summary.embeddings, dir)
        }
        (None, Some(a)) => {
            let root = d
                .images_root
                .clone()
                .unwrap_or_else(|| a.parent().map(Path::to_path_buf).unwrap_or_default());
            let emb = d
                .embeddings
                .clone()
                .ok_or_else(|| Error::config("data.embeddings", "required with `data.annotations`"))?;
            (a.clone(), emb, root)
        }
        (None, None) => return Err(Error::config("data", "one of `synth` or `annotations` is required")),
    };
    let records = filter_no_interaction(&load_dataset(&annotations)?, &d.excluded_verb);
    let split = match (&cfg.split.n_target, &cfg.split.source_classes, &cfg.split.target_classes) {
        (Some(n), _, _) => split_by_frequency(&records, *n)?,
        (None, Some(s), Some(t)) => SplitSpec::explicit(&records, s.clone(), t.clone())?,
        _ => return Err(Error::config("split.n_target", "no class split configured")),
    };
    let table = EmbeddingTable::load(&embeddings)?;
    let (train, test) = split_train_test(&records, d.test_fraction, seeds::phase(cfg.seed, seeds::SPLIT));
    write_json(&out.join("data/split.json"), &split)?;
    save_dataset(&out.join("data/train.json"), &train)?;
    save_dataset(&out.join("data/test.json"), &test)?;
    log::info!(
        "data: {} images ({} train / {} test), {} source / {} target classes",
        records.len(),
        train.len(),
        test.len(),
        split.source_classes.len(),
        split.target_classes.len()
    );
    Ok(Prepared {
        split,
        train,
        test,
        images_root,
        table,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallBlock {
    pub source_test: f64,
    pub target_train: f64,
    pub target_test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBlock {
    pub recall_at_05: RecallBlock,
    /// Target-class detector trained on pseudo boxes.
    pub map_at_05: ApResult,
    /// Every detector evaluated: `source`, `target_weak`, `target_supervised`.
    pub map_at_05_by_detector: BTreeMap<String, ApResult>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTraces {
    pub source: Vec<JointLoss>,
    pub target_weak: Vec<DetLoss>,
    pub target_supervised: Vec<DetLoss>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: PipelineConfig,
    pub split: SplitSpec,
    /// Archive SHA-256 per checkpoint name.
    pub checkpoints: BTreeMap<String, String>,
    pub pseudo: PseudoReport,
    pub losses: LossTraces,
    pub metrics: MetricsBlock,
    /// Seconds per phase.
    pub wall_clock_s: BTreeMap<String, f64>,
}

/// Attention maps for every boxed tuple of `records`, paired with the truth.
pub struct AttentionSet {
    pub maps: Vec<AttentionMap>,
    pub truths: Vec<EvalPairSeed>,
}

/// Everything of an [`EvalPair`] except the prediction.
#[derive(Debug, Clone)]
pub struct EvalPairSeed {
    pub truth: crate::annotations::BoundingBox,
    pub tuple_ref: (String, usize),
    pub dims: ImageDims,
}

impl AttentionSet {
    /// Tuple recall after thresholding every map at `delta`.
    pub fn recall(&self, delta: f64, policy: crate::pseudolabel::BoxPolicy, iou_threshold: f64) -> Result<f64> {
        let pairs: Vec<EvalPair> = self
            .maps
            .iter()
            .zip(&self.truths)
            .map(|(m, t)| {
                Ok(EvalPair {
                    predicted: box_from_attention(m, delta, policy, t.dims)?.map(|(b, _)| b),
                    truth: t.truth,
                    tuple_ref: t.tuple_ref.clone(),
                })
            })
            .collect::<Result<_>>()?;
        tuple_recall(&pairs, iou_threshold)
    }
}

/// A prepared output directory plus the shared image cache.
pub struct Workspace {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    pub prep: Prepared,
    pub images: ImageStore,
    pub featurizer: TupleFeaturizer,
}

fn labeler<'a>(featurizer: &'a TupleFeaturizer, cfg: &PipelineConfig, model: &'a SourceModel) -> PseudoLabeler<'a> {
    PseudoLabeler {
        backbone: &model.backbone,
        rrpn: &model.rrpn,
        featurizer,
        delta: cfg.pseudo.delta,
        policy: cfg.pseudo.policy,
    }
}

fn phase<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_phase(name))
}

impl Workspace {
    pub fn open(cfg: &PipelineConfig, out: &Path) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let prep = phase("data", prepare_data(cfg, out))?;
        let featurizer = TupleFeaturizer {
            grid: cfg.model.backbone.grid(),
            pose_sigma_cells: cfg.model.pose_sigma_cells,
            table: prep.table.clone(),
            active: cfg.model.features,
        };
        Ok(Self {
            images: ImageStore::new(&prep.images_root),
            cfg: cfg.clone(),
            out: out.to_path_buf(),
            prep,
            featurizer,
        })
    }

    fn meta(&self, classes: &ClassIndex) -> CheckpointMeta {
        CheckpointMeta {
            grid: self.featurizer.grid,
            active: self.cfg.model.features,
            lambda: self.cfg.train.lambda,
            seed: self.cfg.seed,
            model: self.cfg.model.clone(),
            classes: classes.0.clone(),
        }
    }

    pub fn source_stem(&self) -> PathBuf {
        self.out.join(SOURCE_CKPT)
    }

    /// Joint source training; writes the source checkpoint.
    pub fn train_source(&mut self) -> Result<(SourceModel, CheckpointManifest, Vec<JointLoss>)> {
        phase("train-source", self.train_source_inner())
    }

    fn train_source_inner(&mut self) -> Result<(SourceModel, CheckpointManifest, Vec<JointLoss>)> {
        let records = self.prep.side(false, Side::Source);
        let classes = ClassIndex::new(&self.prep.split.source_classes);
        let seed = self.cfg.seed;
        let model = SourceModel::new(&self.cfg.model, classes.clone(), seeds::phase(seed, seeds::SOURCE_INIT))?;
        let opts = JointTraining {
            optim: &self.cfg.train.optim,
            epochs: self.cfg.train.source_epochs,
            lambda: self.cfg.train.lambda,
            seed: seeds::phase(seed, seeds::SOURCE_SHUFFLE),
        };
        let (model, trace) = train_source(&records, &mut self.images, &self.featurizer, model, &opts)?;
        let manifest = save_source_model(&self.source_stem(), &model, self.meta(&classes))?;
        Ok((model, manifest, trace))
    }

    /// Load a source checkpoint (default: this workspace's) and check it fits
    /// the configured grid and feature set.
    pub fn load_source(&self, manifest: Option<&Path>) -> Result<(SourceModel, CheckpointManifest)> {
        let path = manifest.map_or_else(|| manifest_path(&self.source_stem()), Path::to_path_buf);
        let ck = Checkpoint::load(&path)?;
        let m = &ck.manifest.meta;
        if m.grid != self.featurizer.grid {
            return Err(Error::Checkpoint(format!(
                "checkpoint grid {:?} differs from configured grid {:?}",
                m.grid, self.featurizer.grid
            )));
        }
        if m.active != self.featurizer.active {
            return Err(Error::Checkpoint(format!(
                "checkpoint trained with features {}, config uses {}",
                m.active, self.featurizer.active
            )));
        }
        Ok((ck.source_model()?, ck.manifest))
    }

    /// Pseudo-annotate the target training tuples (ground-truth boxes are
    /// removed first) and write the annotation file and sidecar.
    pub fn pseudolabel(&mut self, model: &SourceModel, source_sha: &str) -> Result<PseudoOutput> {
        phase("pseudolabel", self.pseudolabel_inner(model, source_sha))
    }

    fn pseudolabel_inner(&mut self, model: &SourceModel, source_sha: &str) -> Result<PseudoOutput> {
        let unlabeled: Vec<ImageRecord> = self
            .prep
            .side(false, Side::Target)
            .into_iter()
            .map(|mut r| {
                r.tuples.iter_mut().for_each(|t| t.object_box = None);
                r
            })
            .collect();
        let labeler = labeler(&self.featurizer, &self.cfg, model);
        let out = generate_pseudo_annotations(&unlabeled, &mut self.images, &labeler)?;
        save_dataset(&self.out.join(PSEUDO_FILE), &out.records)?;
        #[derive(Serialize)]
        struct Sidecar<'a> {
            #[serde(flatten)]
            report: &'a PseudoReport,
            source_checkpoint_sha256: &'a str,
        }
        write_json(
            &self.out.join(PSEUDO_REPORT_FILE),
            &Sidecar {
                report: &out.report,
                source_checkpoint_sha256: source_sha,
            },
        )?;
        log::info!(
            "pseudo labels: {} of {} target tuples ({} empty masks)",
            out.report.tuples_out,
            out.report.tuples_in,
            out.report.skipped_empty_mask
        );
        Ok(out)
    }

    /// Train a target-class detector on `records`, reusing `backbone`.
    /// Returns `None` when `records` carry no boxes at all.
    pub fn train_target(
        &mut self,
        backbone: &Backbone,
        records: &[ImageRecord],
        stem: &str,
        seed_offset: u64,
    ) -> Result<Option<(Detector, CheckpointManifest, Vec<DetLoss>)>> {
        phase("train-target", self.train_target_inner(backbone, records, stem, seed_offset))
    }

    fn train_target_inner(
        &mut self,
        backbone: &Backbone,
        records: &[ImageRecord],
        stem: &str,
        seed_offset: u64,
    ) -> Result<Option<(Detector, CheckpointManifest, Vec<DetLoss>)>> {
        if records.iter().all(|r| r.tuples.iter().all(|t| t.object_box.is_none())) {
            log::warn!("no boxes to train `{stem}`; skipping");
            return Ok(None);
        }
        let classes = ClassIndex::new(&self.prep.split.target_classes);
        let opts = DetectorTraining {
            optim: &self.cfg.train.optim,
            epochs: self.cfg.train.target_epochs,
            head_hidden: self.cfg.model.head_hidden,
            freeze_backbone: self.cfg.train.freeze_backbone,
            seed: seeds::phase(self.cfg.seed, seed_offset),
        };
        let (det, trace) = train_detector(records, &mut self.images, &classes, &opts, DetectorInit::ReuseBackbone(backbone))?;
        let manifest = save_detector(&self.out.join(stem), &det, self.meta(&classes))?;
        Ok(Some((det, manifest, trace)))
    }

    /// Attention maps of every boxed tuple in `records`.
    pub fn attention_set(&mut self, model: &SourceModel, records: &[ImageRecord]) -> Result<AttentionSet> {
        let mut maps = Vec::new();
        let mut truths = Vec::new();
        for r in records {
            let all = labeler(&self.featurizer, &self.cfg, model).attention_maps(r, &mut self.images)?;
            for (i, (t, m)) in r.tuples.iter().zip(all).enumerate() {
                if let Some(b) = t.object_box {
                    maps.push(m);
                    truths.push(EvalPairSeed {
                        truth: b,
                        tuple_ref: (r.image_id.clone(), i),
                        dims: ImageDims::new(r.width, r.height),
                    });
                }
            }
        }
        Ok(AttentionSet { maps, truths })
    }

    /// Per-tuple recall of pseudo boxes on `records` at the configured delta.
    pub fn recall(&mut self, model: &SourceModel, records: &[ImageRecord]) -> Result<f64> {
        let set = self.attention_set(model, records)?;
        set.recall(self.cfg.pseudo.delta, self.cfg.pseudo.policy, self.cfg.eval.iou_threshold)
    }

    /// Detections of `det` on every image of `records`.
    pub fn detections(&mut self, det: &Detector, records: &[ImageRecord]) -> Result<Vec<ImageDetection>> {
        let mut out = Vec::new();
        for r in records {
            let img = self.images.tensor(r, det.backbone.input_size)?;
            let dims = ImageDims::new(r.width, r.height);
            for d in detect(&img, det, dims, self.cfg.eval.score_threshold, self.cfg.eval.nms_iou)? {
                out.push(ImageDetection {
                    image_id: r.image_id.clone(),
                    detection: d,
                });
            }
        }
        Ok(out)
    }

    /// mAP of `det` on `records`, also dumping detections as JSON lines.
    pub fn average_precision(&mut self, det: Option<&Detector>, records: &[ImageRecord], name: &str) -> Result<ApResult> {
        let dets = match det {
            Some(d) => self.detections(d, records)?,
            None => Vec::new(),
        };
        write_detections(&self.out.join(format!("eval/detections_{name}.jsonl")), &dets)?;
        Ok(mean_average_precision(
            &dets,
            records,
            self.cfg.eval.iou_threshold,
            self.cfg.eval.interpolation,
        ))
    }

    pub fn evaluate(
        &mut self,
        model: &SourceModel,
        weak: Option<&Detector>,
        supervised: Option<&Detector>,
    ) -> Result<MetricsBlock> {
        phase("eval", self.evaluate_inner(model, weak, supervised))
    }

    fn evaluate_inner(
        &mut self,
        model: &SourceModel,
        weak: Option<&Detector>,
        supervised: Option<&Detector>,
    ) -> Result<MetricsBlock> {
        let source_test = self.prep.side(true, Side::Source);
        let target_train = self.prep.side(false, Side::Target);
        let target_test = self.prep.side(true, Side::Target);
        let recall = RecallBlock {
            source_test: self.recall(model, &source_test)?,
            target_train: self.recall(model, &target_train)?,
            target_test: self.recall(model, &target_test)?,
        };
        let mut by_detector = BTreeMap::new();
        let source_det = model.detector();
        by_detector.insert("source".to_string(), self.average_precision(Some(&source_det), &source_test, "source")?);
        let weak_ap = self.average_precision(weak, &target_test, "target_weak")?;
        by_detector.insert("target_weak".to_string(), weak_ap.clone());
        if self.cfg.train.supervised_control {
            by_detector.insert(
                "target_supervised".to_string(),
                self.average_precision(supervised, &target_test, "target_supervised")?,
            );
        }
        Ok(MetricsBlock {
            recall_at_05: recall,
            map_at_05: weak_ap,
            map_at_05_by_detector: by_detector,
        })
    }
}

fn write_detections(path: &Path, dets: &[ImageDetection]) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        image_id: &'a str,
        object_class: &'a str,
        score: f64,
        #[serde(rename = "box")]
        bbox: [f64; 4],
    }
    let mut buf = Vec::new();
    for d in dets {
        let b = d.detection.bbox;
        serde_json::to_writer(
            &mut buf,
            &Line {
                image_id: &d.image_id,
                object_class: &d.detection.object_class,
                score: d.detection.score,
                bbox: [b.x_min, b.y_min, b.x_max, b.y_max],
            },
        )?;
        buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    crate::util::write_atomic(path, &buf)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Use this source checkpoint manifest instead of training one.
    pub reuse_source: Option<PathBuf>,
}

/// Every phase end to end. Writes checkpoints, pseudo annotations and
/// `report.json` under `out`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path, opts: &RunOptions) -> Result<RunReport> {
    let mut clock = BTreeMap::new();
    let t = Instant::now();
    let mut ws = Workspace::open(cfg, out)?;
    clock.insert("data".to_string(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let mut losses = LossTraces::default();
    let source_manifest = match &opts.reuse_source {
        Some(path) => {
            let (model, manifest) = phase("train-source", ws.load_source(Some(path)))?;
            // Keep the consumed checkpoint next to the rest of the run.
            save_source_model(&ws.source_stem(), &model, manifest.meta)?
        }
        None => {
            let (_, manifest, trace) = ws.train_source()?;
            losses.source = trace;
            manifest
        }
    };
    clock.insert("train_source".to_string(), t.elapsed().as_secs_f64());

    // Pseudo labels come from the checkpoint on disk, the one the report names.
    let t = Instant::now();
    let (model, consumed) = phase("pseudolabel", ws.load_source(None))?;
    if consumed.sha256 != source_manifest.sha256 {
        return Err(Error::Checkpoint("source checkpoint changed on disk".into()).in_phase("pseudolabel"));
    }
    let pseudo = ws.pseudolabel(&model, &consumed.sha256)?;
    clock.insert("pseudolabel".to_string(), t.elapsed().as_secs_f64());

    let mut checkpoints = BTreeMap::new();
    checkpoints.insert("source".to_string(), consumed.sha256.clone());

    let t = Instant::now();
    let weak = ws.train_target(&model.backbone, &pseudo.records, TARGET_WEAK_CKPT, seeds::TARGET_WEAK)?;
    if let Some((_, m, trace)) = &weak {
        checkpoints.insert("target_weak".to_string(), m.sha256.clone());
        losses.target_weak = trace.clone();
    }
    clock.insert("train_target_weak".to_string(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let supervised = if cfg.train.supervised_control {
        let truth = ws.prep.side(false, Side::Target);
        let s = ws.train_target(&model.backbone, &truth, TARGET_SUPERVISED_CKPT, seeds::TARGET_SUPERVISED)?;
        if let Some((_, m, trace)) = &s {
            checkpoints.insert("target_supervised".to_string(), m.sha256.clone());
            losses.target_supervised = trace.clone();
        }
        clock.insert("train_target_supervised".to_string(), t.elapsed().as_secs_f64());
        s
    } else {
        None
    };

    let t = Instant::now();
    let metrics = ws.evaluate(
        &model,
        weak.as_ref().map(|w| &w.0),
        supervised.as_ref().map(|s| &s.0),
    )?;
    clock.insert("eval".to_string(), t.elapsed().as_secs_f64());

    let report = RunReport {
        config: cfg.clone(),
        split: ws.prep.split.clone(),
        checkpoints,
        pseudo: pseudo.report,
        losses,
        metrics,
        wall_clock_s: clock,
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    log::info!(
        "recall@0.5 source-test {:.3} target-train {:.3} target-test {:.3}; target mAP@0.5 {:.3}",
        report.metrics.recall_at_05.source_test,
        report.metrics.recall_at_05.target_train,
        report.metrics.recall_at_05.target_test,
        report.metrics.map_at_05.map
    );
    Ok(report)
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    read_json(path)
}

/// One grid cell of an ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub key: BTreeMap<String, String>,
    pub dir: PathBuf,
    pub metrics: Option<MetricsBlock>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
}

pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_SVG: &str = "ablation.svg";

/// Configurations of the cartesian product of the grid axes, each with its
/// key. An empty grid yields the base configuration alone.
pub fn ablation_cells(base: &PipelineConfig) -> Vec<(BTreeMap<String, String>, PipelineConfig)> {
    let g = &base.ablation;
    let mut cells = vec![(BTreeMap::new(), base.clone())];
    fn expand<T: Clone + ToString>(
        cells: Vec<(BTreeMap<String, String>, PipelineConfig)>,
        axis: &str,
        values: &[T],
        set: impl Fn(&mut PipelineConfig, T),
    ) -> Vec<(BTreeMap<String, String>, PipelineConfig)> {
        if values.is_empty() {
            return cells;
        }
        let mut out = Vec::new();
        for (key, cfg) in cells {
            for v in values {
                let mut k = key.clone();
                k.insert(axis.to_string(), v.to_string());
                let mut c = cfg.clone();
                set(&mut c, v.clone());
                out.push((k, c));
            }
        }
        out
    }
    cells = expand(cells, "features", &g.features, |c, v| c.model.features = v);
    cells = expand(cells, "lambda", &g.lambda, |c, v| c.train.lambda = v);
    cells = expand(cells, "n_target", &g.n_target, |c, v| {
        c.split.n_target = Some(v);
        c.split.source_classes = None;
        c.split.target_classes = None;
    });
    cells = expand(cells, "freeze_backbone", &g.freeze_backbone, |c, v| c.train.freeze_backbone = v);
    cells = expand(cells, "delta", &g.delta, |c, v| c.pseudo.delta = v);
    cells = expand(cells, "box_policy", &g.box_policy, |c, v| c.pseudo.policy = v);
    for (_, c) in &mut cells {
        c.ablation = Default::default();
    }
    cells
}

fn cell_dir_name(key: &BTreeMap<String, String>) -> String {
    if key.is_empty() {
        return "baseline".to_string();
    }
    key.iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(",")
        .replace(['+', '/'], "_")
}

/// Run every cell of `base.ablation`. Cells that differ only in pseudo-label
/// or target-phase settings share one source checkpoint. Failed cells are
/// recorded and the sweep continues.
pub fn run_ablation(base: &PipelineConfig, out: &Path) -> Result<AblationTable> {
    base.validate()?;
    let mut trained: HashMap<String, PathBuf> = HashMap::new();
    let mut table = AblationTable { cells: Vec::new() };
    for (key, cfg) in ablation_cells(base) {
        let dir = out.join("cells").join(cell_dir_name(&key));
        let source_key = serde_json::to_string(&(&cfg.model, cfg.train.lambda, &cfg.split, cfg.seed))?;
        let opts = RunOptions {
            reuse_source: trained.get(&source_key).cloned(),
        };
        log::info!("ablation cell {}", cell_dir_name(&key));
        let result = run_pipeline(&cfg, &dir, &opts);
        let (metrics, error) = match result {
            Ok(report) => {
                trained
                    .entry(source_key)
                    .or_insert_with(|| manifest_path(&dir.join(SOURCE_CKPT)));
                (Some(report.metrics), None)
            }
            Err(e) => {
                log::error!("cell {} failed: {e}", cell_dir_name(&key));
                (None, Some(e.to_string()))
            }
        };
        table.cells.push(AblationCell { key, dir, metrics, error });
    }
    write_json(&out.join(ABLATION_JSON), &table)?;
    crate::util::write_atomic(&out.join(ABLATION_CSV), ablation_csv(&table).as_bytes())?;
    crate::util::write_atomic(&out.join(ABLATION_SVG), crate::plot::ablation_svg(&table).as_bytes())?;
    Ok(table)
}

pub fn ablation_csv(table: &AblationTable) -> String {
    let mut axes: Vec<&String> = table.cells.iter().flat_map(|c| c.key.keys()).collect();
    axes.sort();
    axes.dedup();
    let mut s = String::new();
    for a in &axes {
        s.push_str(a);
        s.push(',');
    }
    s.push_str("recall_source_test,recall_target_train,recall_target_test,map_target_weak,map_target_supervised,map_source,error\n");
    for c in &table.cells {
        for a in &axes {
            s.push_str(c.key.get(*a).map(String::as_str).unwrap_or(""));
            s.push(',');
        }
        match &c.metrics {
            Some(m) => {
                let ap = |k: &str| {
                    m.map_at_05_by_detector
                        .get(k)
                        .map(|a| format!("{:.6}", a.map))
                        .unwrap_or_default()
                };
                s.push_str(&format!(
                    "{:.6},{:.6},{:.6},{},{},{},",
                    m.recall_at_05.source_test,
                    m.recall_at_05.target_train,
                    m.recall_at_05.target_test,
                    ap("target_weak"),
                    ap("target_supervised"),
                    ap("source")
                ));
            }
            None => s.push_str(",,,,,,"),
        }
        s.push_str(&c.error.clone().unwrap_or_default().replace([',', '\n'], ";"));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{BoundingBox, HoiTuple, Pose};

    fn rec(id: &str, class: &str) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            image_path: format!("{id}.png").into(),
            width: 10,
            height: 10,
            tuples: vec![HoiTuple {
                verb: "hold".into(),
                object_class: class.into(),
                object_box: Some(BoundingBox::new(1.0, 1.0, 5.0, 5.0)),
                keypoints: Pose::empty(),
            }],
        }
    }

    #[test]
    fn stratified_split_is_deterministic_and_covers_classes() {
        let records: Vec<ImageRecord> = (0..40)
            .map(|i| rec(&format!("i{i:02}"), if i < 30 { "a" } else { "b" }))
            .collect();
        let (tr, te) = split_train_test(&records, 0.3, 5);
        assert_eq!(tr.len() + te.len(), 40);
        assert_eq!(te.iter().filter(|r| r.tuples[0].object_class == "a").count(), 9);
        assert_eq!(te.iter().filter(|r| r.tuples[0].object_class == "b").count(), 3);
        let (tr2, te2) = split_train_test(&records, 0.3, 5);
        assert_eq!((tr, te), (tr2, te2));
    }

    #[test]
    fn ablation_grid_expands_to_cartesian_product() {
        let mut cfg = PipelineConfig::from_toml("[data.synth]\n[split]\nn_target = 2\n").unwrap();
        assert_eq!(ablation_cells(&cfg).len(), 1);
        cfg.ablation.push_axis("features=I,I+P+V").unwrap();
        cfg.ablation.push_axis("delta=0.05,0.1,0.2").unwrap();
        let cells = ablation_cells(&cfg);
        assert_eq!(cells.len(), 6);
        assert!(cells.iter().all(|(_, c)| c.ablation.is_empty()));
        assert_eq!(cells[1].0["delta"], "0.1");
        assert_eq!(cells[1].1.pseudo.delta, 0.1);
        let names: std::collections::BTreeSet<String> = cells.iter().map(|(k, _)| cell_dir_name(k)).collect();
        assert_eq!(names.len(), 6);
    }
}
