//! Pipeline configuration: one TOML file, every section optional except
//! `[data]`, plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::OptimConfig;
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::metrics::ApInterpolation;
use crate::pseudolabel::{BoxPolicy, DEFAULT_DELTA};
use crate::rrpn::DEFAULT_LAMBDA;
use crate::synthworld::SceneSpec;
use crate::training::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Generate a synthetic dataset into `<out>/synth` with this spec.
    #[serde(default)]
    pub synth: Option<SceneSpec>,
    /// Annotation file of an existing dataset.
    #[serde(default)]
    pub annotations: Option<PathBuf>,
    /// Directory image paths are resolved against (default: the annotation
    /// file's directory).
    #[serde(default)]
    pub images_root: Option<PathBuf>,
    /// Verb embedding file (required with `annotations`).
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_excluded_verb")]
    pub excluded_verb: String,
}

fn default_test_fraction() -> f64 {
    0.3
}

fn default_excluded_verb() -> String {
    crate::annotations::NO_INTERACTION.to_string()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Number of least-frequent classes forming the target side.
    pub n_target: Option<usize>,
    pub source_classes: Option<Vec<String>>,
    pub target_classes: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub optim: OptimConfig,
    pub source_epochs: usize,
    pub target_epochs: usize,
    /// Keep the reused backbone fixed while training the target detector.
    pub freeze_backbone: bool,
    /// Also train a target detector on ground-truth boxes for comparison.
    pub supervised_control: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            optim: OptimConfig::default(),
            source_epochs: 15,
            target_epochs: 30,
            freeze_backbone: false,
            supervised_control: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoConfig {
    pub delta: f64,
    pub policy: BoxPolicy,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            policy: BoxPolicy::Hull,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub interpolation: ApInterpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            score_threshold: 0.05,
            nms_iou: 0.5,
            interpolation: ApInterpolation::AllPoint,
        }
    }
}

/// Axes of an ablation grid. Empty axes keep the base configuration value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub features: Vec<FeatureSet>,
    pub lambda: Vec<f64>,
    pub delta: Vec<f64>,
    pub n_target: Vec<usize>,
    pub freeze_backbone: Vec<bool>,
    pub box_policy: Vec<BoxPolicy>,
}

impl AblationGrid {
    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
            && self.lambda.is_empty()
            && self.delta.is_empty()
            && self.n_target.is_empty()
            && self.freeze_backbone.is_empty()
            && self.box_policy.is_empty()
    }

    /// Parse one `axis=v1,v2,...` command-line entry into the grid.
    pub fn push_axis(&mut self, spec: &str) -> Result<()> {
        let (axis, values) = spec
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("expected axis=values, got `{spec}`")))?;
        let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        fn parse_all<T: std::str::FromStr>(axis: &str, items: &[&str]) -> Result<Vec<T>> {
            items
                .iter()
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::InvalidArgument(format!("axis `{axis}`: cannot parse `{s}`")))
                })
                .collect()
        }
        match axis.trim() {
            "features" => self.features.extend(parse_all::<FeatureSet>(axis, &items)?),
            "lambda" => self.lambda.extend(parse_all::<f64>(axis, &items)?),
            "delta" => self.delta.extend(parse_all::<f64>(axis, &items)?),
            "n_target" => self.n_target.extend(parse_all::<usize>(axis, &items)?),
            "freeze_backbone" => self.freeze_backbone.extend(parse_all::<bool>(axis, &items)?),
            "box_policy" => self.box_policy.extend(parse_all::<BoxPolicy>(axis, &items)?),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown ablation axis `{other}` (expected features, lambda, delta, n_target, freeze_backbone, box_policy)"
                )))
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pseudo: PseudoConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablation: AblationGrid,
}

/// Command-line values that replace file values when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub lambda: Option<f64>,
    pub delta: Option<f64>,
    pub features: Option<FeatureSet>,
    pub policy: Option<BoxPolicy>,
    pub n_target: Option<usize>,
    pub freeze_backbone: Option<bool>,
    pub source_epochs: Option<usize>,
    pub target_epochs: Option<usize>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<document>".to_string());
            Error::Config { field, message: msg }
        })
    }

    /// Parse a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.data.annotations,
            &mut cfg.data.images_root,
            &mut cfg.data.embeddings,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("<document>", e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out_dir {
            self.out_dir = Some(v.clone());
        }
        if let Some(v) = o.lambda {
            self.train.lambda = v;
        }
        if let Some(v) = o.delta {
            self.pseudo.delta = v;
        }
        if let Some(v) = o.features {
            self.model.features = v;
        }
        if let Some(v) = o.policy {
            self.pseudo.policy = v;
        }
        if let Some(v) = o.n_target {
            self.split.n_target = Some(v);
            self.split.source_classes = None;
            self.split.target_classes = None;
        }
        if let Some(v) = o.freeze_backbone {
            self.train.freeze_backbone = v;
        }
        if let Some(v) = o.source_epochs {
            self.train.source_epochs = v;
        }
        if let Some(v) = o.target_epochs {
            self.train.target_epochs = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match (&d.synth, &d.annotations) {
            (Some(_), Some(_)) => {
                return Err(Error::config("data", "set either `synth` or `annotations`, not both"))
            }
            (None, None) => return Err(Error::config("data", "one of `synth` or `annotations` is required")),
            (Some(spec), None) => spec.validate()?,
            (None, Some(_)) => {
                if d.embeddings.is_none() {
                    return Err(Error::config("data.embeddings", "required with `data.annotations`"));
                }
            }
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(Error::config("data.test_fraction", "must lie in (0, 1)"));
        }
        let s = &self.split;
        match (s.n_target, &s.source_classes, &s.target_classes) {
            (Some(0), _, _) => return Err(Error::config("split.n_target", "must be at least 1")),
            (Some(_), None, None) | (None, Some(_), Some(_)) => {}
            (None, None, None) => {
                return Err(Error::config(
                    "split.n_target",
                    "required unless `split.source_classes` and `split.target_classes` are given",
                ))
            }
            _ => {
                return Err(Error::config(
                    "split",
                    "use either `n_target` or both explicit class lists",
                ))
            }
        }
        self.model.validate()?;
        let t = &self.train;
        if !(t.lambda >= 0.0 && t.lambda.is_finite()) {
            return Err(Error::config("train.lambda", "must be a finite value >= 0"));
        }
        if t.source_epochs == 0 {
            return Err(Error::config("train.source_epochs", "must be at least 1"));
        }
        if t.target_epochs == 0 {
            return Err(Error::config("train.target_epochs", "must be at least 1"));
        }
        if !(t.optim.lr > 0.0 && t.optim.lr.is_finite()) {
            return Err(Error::config("train.optim.lr", "must be positive"));
        }
        if t.optim.batch_size == 0 {
            return Err(Error::config("train.optim.batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.pseudo.delta) {
            return Err(Error::config("pseudo.delta", "must lie in [0, 1)"));
        }
        let e = &self.eval;
        for (field, v) in [
            ("eval.iou_threshold", e.iou_threshold),
            ("eval.score_threshold", e.score_threshold),
            ("eval.nms_iou", e.nms_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Fixed per-phase seed offsets from the master seed.
pub mod seeds {
    pub const SPLIT: u64 = 1;
    pub const SOURCE_INIT: u64 = 10;
    pub const SOURCE_SHUFFLE: u64 = 11;
    pub const TARGET_WEAK: u64 = 20;
    pub const TARGET_SUPERVISED: u64 = 30;

    pub fn phase(master: u64, offset: u64) -> u64 {
        master.wrapping_mul(1_000).wrapping_add(offset)
    }
}
