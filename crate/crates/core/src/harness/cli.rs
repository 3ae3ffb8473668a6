use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::config::RunConfig;
use super::data::{generate_dataset, load_split};
use super::plot::write_bev_svg;
use super::train::{evaluate_model, load_model, prepare_all, prepare_seed, thread_pool, train, FINAL_CHECKPOINT};
use crate::error::{Error, Result};
use crate::scenegen::{read_cloud, write_detections};

#[derive(Debug, Parser)]
#[command(name = "lidet", version, about = "Set-prediction 3D detection on synthetic LiDAR scenes")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "lidet.toml")]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bit-exact reproducibility.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Overrides the configured checkpoint directory.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset splits.
    Gen {
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train from scratch on the training split.
    Train,
    /// Evaluate a checkpoint on a split and write the report.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        topk: Option<usize>,
        /// Report path; defaults to `<run dir>/eval_<split>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detect objects in one `.bin` cloud.
    Predict {
        cloud: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        topk: Option<usize>,
        /// Also write a bird's-eye-view SVG.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Detections file; defaults to the cloud path with a `.det.txt` extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a student under ground truth and a frozen teacher's detections.
    Distill {
        /// Teacher checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.run_dir {
        cfg.checkpoint_dir = dir.clone();
    }
    Ok(cfg)
}

fn default_checkpoint(cfg: &RunConfig, given: Option<&PathBuf>) -> PathBuf {
    given.cloned().unwrap_or_else(|| cfg.checkpoint_dir.join(FINAL_CHECKPOINT))
}

fn with_topk(cfg: &mut RunConfig, topk: Option<usize>) -> Result<()> {
    if let Some(k) = topk {
        if k == 0 {
            return Err(Error::Config("--topk must be at least 1".into()));
        }
        cfg.inference.topk = k;
    }
    Ok(())
}

/// Executes one parsed command line; returns the main output path.
pub fn run(cli: &Cli) -> Result<PathBuf> {
    let mut cfg = load_config(&cli.common)?;
    let threads = cli.common.threads;
    match &cli.command {
        Command::Gen { force } => {
            let manifests = generate_dataset(&cfg, *force)?;
            for m in &manifests {
                log::info!("split `{}`: {} scenes", m.split, m.entries.len());
            }
            Ok(cfg.root.clone())
        }
        Command::Train => {
            let out = train(&cfg, threads, None)?;
            report_training(&out.history);
            Ok(out.checkpoint)
        }
        Command::Distill { checkpoint } => {
            let teacher = load_model(&cfg, checkpoint)?;
            let out = train(&cfg, threads, Some(&teacher))?;
            report_training(&out.history);
            Ok(out.checkpoint)
        }
        Command::Eval { checkpoint, split, topk, out } => {
            with_topk(&mut cfg, *topk)?;
            let split = split.clone().unwrap_or_else(|| cfg.train.val_split.clone());
            let model = load_model(&cfg, &default_checkpoint(&cfg, checkpoint.as_ref()))?;
            let samples = load_split(&cfg.root, &split, &cfg.class_names())?;
            let inputs = prepare_all(&model, &samples, cfg.seed)?;
            let report = evaluate_model(&model, &samples, &inputs, &cfg, &thread_pool(threads)?)?;
            let path = out.clone().unwrap_or_else(|| cfg.checkpoint_dir.join(format!("eval_{split}.json")));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            report.save(&path)?;
            log::info!("{split}: mAP {:.4} NDS {:.4} over {} scenes", report.map, report.nds, report.num_frames);
            Ok(path)
        }
        Command::Predict { cloud, checkpoint, topk, plot, out } => {
            with_topk(&mut cfg, *topk)?;
            let model = load_model(&cfg, &default_checkpoint(&cfg, checkpoint.as_ref()))?;
            let pc = read_cloud(cloud)?;
            let input = model.prepare(&pc, prepare_seed(cfg.seed, 0))?;
            let dets: Vec<_> = model
                .detect(&input, cfg.inference.topk)?
                .into_iter()
                .filter(|d| d.score >= cfg.inference.report_floor)
                .collect();
            let names = cfg.class_names();
            let path = out.clone().unwrap_or_else(|| detections_path(cloud));
            let boxes: Vec<_> = dets.iter().map(|d| d.bbox.clone()).collect();
            let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
            write_detections(&path, &boxes, &scores, &names)?;
            if let Some(p) = plot {
                write_bev_svg(p, &pc, &dets, cfg.model.range(), &names)?;
            }
            log::info!("{} detections written to {}", dets.len(), path.display());
            Ok(path)
        }
    }
}

fn detections_path(cloud: &Path) -> PathBuf {
    cloud.with_extension("det.txt")
}

fn report_training(history: &[super::train::StepRecord]) {
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        log::info!("loss {:.5} -> {:.5} over {} steps", first.loss, last.loss, history.len());
    }
}
