use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rrpn_core::annotations::{load_dataset, Side};
use rrpn_core::checkpoint::{manifest_path, Checkpoint};
use rrpn_core::config::{seeds, Overrides, PipelineConfig};
use rrpn_core::features::FeatureSet;
use rrpn_core::pipeline::{
    run_ablation, run_pipeline, RunOptions, Workspace, PSEUDO_FILE, REPORT_FILE, TARGET_SUPERVISED_CKPT,
    TARGET_WEAK_CKPT,
};
use rrpn_core::plot::plot_attention;
use rrpn_core::pseudolabel::BoxPolicy;
use rrpn_core::synthworld::{generate_dataset, SceneSpec};
use rrpn_core::util::write_json;

/// Weakly supervised detection of rare object classes from pose and verb context.
#[derive(Parser)]
#[command(name = "rrpn", version)]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct OverrideArgs {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// Active feature kinds, e.g. `I+P+V`.
    #[arg(long)]
    features: Option<FeatureSet>,
    /// `hull` or `largest_component`.
    #[arg(long)]
    policy: Option<BoxPolicy>,
    #[arg(long)]
    n_target: Option<usize>,
    #[arg(long)]
    freeze_backbone: Option<bool>,
    #[arg(long)]
    source_epochs: Option<usize>,
    #[arg(long)]
    target_epochs: Option<usize>,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (images, annotations.json, embeddings.txt).
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        /// Take the scene spec from this pipeline config's `[data.synth]`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        image_size: Option<u32>,
    },
    /// Joint source-phase training; writes checkpoints/source.{bin,json}.
    TrainSource(Common),
    /// Pseudo-annotate target training tuples from a source checkpoint.
    Pseudolabel {
        #[command(flatten)]
        common: Common,
        /// Source checkpoint manifest (default: <out>/checkpoints/source.json).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the target-class detector on pseudo (or ground-truth) boxes.
    TrainTarget {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pseudo annotation file (default: <out>/pseudo/pseudo_annotations.json).
        #[arg(long)]
        pseudo: Option<PathBuf>,
        /// Train on ground-truth target boxes instead (the supervised control).
        #[arg(long)]
        supervised: bool,
    },
    /// Evaluate the checkpoints under <out>; writes <out>/eval.json.
    Eval(Common),
    /// All phases end to end; writes <out>/report.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Run the pipeline over a grid of settings.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Grid axis `name=v1,v2,...`; axes: features, lambda, delta,
        /// n_target, freeze_backbone, box_policy. Adds to `[ablation]`.
        #[arg(long = "axis")]
        axes: Vec<String>,
    },
    /// Render attention-map overlays for tuples of one split.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `source` or `target`.
        #[arg(long, default_value = "target")]
        side: Side,
        /// Draw from the test images instead of the training images.
        #[arg(long)]
        test: bool,
        #[arg(long, default_value_t = 8)]
        limit: usize,
        /// Directory for the PNGs (default: <out>/plots).
        #[arg(long)]
        dest: Option<PathBuf>,
    },
}

fn load_config(path: &Path, out: &Path, seed: Option<u64>, o: &OverrideArgs) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    cfg.apply(&Overrides {
        seed,
        out_dir: Some(out.to_path_buf()),
        lambda: o.lambda,
        delta: o.delta,
        features: o.features,
        policy: o.policy,
        n_target: o.n_target,
        freeze_backbone: o.freeze_backbone,
        source_epochs: o.source_epochs,
        target_epochs: o.target_epochs,
    });
    cfg.validate()?;
    Ok(cfg)
}

fn open(c: &Common) -> Result<Workspace> {
    let cfg = load_config(&c.config, &c.out, c.seed, &c.overrides)?;
    Ok(Workspace::open(&cfg, &c.out)?)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match cli.command {
        Command::GenSynth {
            out,
            config,
            seed,
            image_size,
        } => {
            let mut spec = match config {
                Some(p) => PipelineConfig::load(&p)?
                    .data
                    .synth
                    .context("config has no [data.synth] section")?,
                None => SceneSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(n) = image_size {
                spec.image_size = n;
            }
            let summary = generate_dataset(&spec, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::TrainSource(c) => {
            let mut ws = open(&c)?;
            let (_, manifest, _) = ws.train_source()?;
            println!("{} sha256 {}", manifest_path(&ws.source_stem()).display(), manifest.sha256);
        }
        Command::Pseudolabel { common, checkpoint } => {
            let mut ws = open(&common)?;
            let (model, manifest) = ws.load_source(checkpoint.as_deref())?;
            let out = ws.pseudolabel(&model, &manifest.sha256)?;
            println!("{}", serde_json::to_string_pretty(&out.report)?);
        }
        Command::TrainTarget {
            common,
            checkpoint,
            pseudo,
            supervised,
        } => {
            let mut ws = open(&common)?;
            let (model, _) = ws.load_source(checkpoint.as_deref())?;
            let (records, stem, offset) = if supervised {
                (ws.prep.side(false, Side::Target), TARGET_SUPERVISED_CKPT, seeds::TARGET_SUPERVISED)
            } else {
                let path = pseudo.unwrap_or_else(|| common.out.join(PSEUDO_FILE));
                (load_dataset(&path)?, TARGET_WEAK_CKPT, seeds::TARGET_WEAK)
            };
            match ws.train_target(&model.backbone, &records, stem, offset)? {
                Some((_, m, _)) => println!("{} sha256 {}", common.out.join(stem).display(), m.sha256),
                None => bail!("no boxes to train on"),
            }
        }
        Command::Eval(c) => {
            let mut ws = open(&c)?;
            let (model, _) = ws.load_source(None)?;
            let load = |stem: &str| -> Result<Option<_>> {
                let p = manifest_path(&c.out.join(stem));
                if p.exists() {
                    Ok(Some(Checkpoint::load(&p)?.detector()?))
                } else {
                    Ok(None)
                }
            };
            let weak = load(TARGET_WEAK_CKPT)?;
            let supervised = load(TARGET_SUPERVISED_CKPT)?;
            let metrics = ws.evaluate(&model, weak.as_ref(), supervised.as_ref())?;
            write_json(&c.out.join("eval.json"), &metrics)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Run {
            config,
            out,
            seed,
            overrides,
        } => {
            let cfg = load_config(&config, &out, Some(seed), &overrides)?;
            let report = run_pipeline(&cfg, &out, &RunOptions::default())?;
            println!("{}", serde_json::to_string_pretty(&report.metrics)?);
            log::info!("report written to {}", out.join(REPORT_FILE).display());
        }
        Command::Ablate { common, axes } => {
            let mut cfg = load_config(&common.config, &common.out, common.seed, &common.overrides)?;
            for a in &axes {
                cfg.ablation.push_axis(a)?;
            }
            let table = run_ablation(&cfg, &common.out)?;
            let failed = table.cells.iter().filter(|c| c.error.is_some()).count();
            println!(
                "{} cells ({} failed); see {}",
                table.cells.len(),
                failed,
                common.out.join(rrpn_core::pipeline::ABLATION_JSON).display()
            );
        }
        Command::Plot {
            common,
            checkpoint,
            side,
            test,
            limit,
            dest,
        } => {
            let mut ws = open(&common)?;
            let (model, _) = ws.load_source(checkpoint.as_deref())?;
            let records = ws.prep.side(test, side);
            let dest = dest.unwrap_or_else(|| common.out.join("plots"));
            let written = plot_attention(&mut ws, &model, &records, limit, &dest)?;
            for p in written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
