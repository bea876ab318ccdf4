//! Thin command-line front end over [`panuda::harness`].

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use panuda::harness::{self, AblateMode, ExperimentConfig, Profile};

#[derive(Parser)]
#[command(name = "panuda", about = "Domain-adaptive panoptic segmentation on a toy benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// dotted key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// base defaults to start from
    #[arg(long, default_value = "desk")]
    profile: Profile,
    /// training / generation seed
    #[arg(long)]
    seed: Option<u64>,
    /// run output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// force single-threaded bit-reproducible execution (always on; recorded
    /// in the archived config)
    #[arg(long)]
    deterministic: bool,
    /// extra overrides, e.g. --set uda.alpha=0.99
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(out) = &self.out {
            overrides.push(format!("out={}", serde_json::to_string(out)?));
        }
        if self.deterministic {
            overrides.push("deterministic=true".into());
        }
        harness::load_config(self.profile, self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the source-train / target-train / target-eval datasets
    GenerateData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train one model per the config
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// continue from checkpoints/last.ckpt in the output directory
        #[arg(long)]
        resume: bool,
        /// interrupt after this iteration (the lr schedule keeps its full
        /// length, so a later --resume bit-matches an unbroken run)
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Score a checkpoint on a labeled dataset
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// dataset directory (defaults to the config's target-eval split)
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// feed ground truth through the metrics path instead of predictions
        #[arg(long)]
        oracle: bool,
    },
    /// Train all four topologies over the configured seeds and tabulate
    Study {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run an ablation schedule
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "uda")]
        mode: AblateMode,
        /// shorthand for --mode instance-losses
        #[arg(long)]
        instance_losses: bool,
    },
    /// Render figures for a finished run directory
    Plot {
        /// run directory containing log.jsonl
        run_dir: PathBuf,
    },
}

fn main() -> Result<()> {
    env_logger::init();
    match Cli::parse().cmd {
        Cmd::GenerateData { cfg } => {
            let cfg = cfg.resolve()?;
            harness::cmd_generate_data(&cfg)?;
            println!("wrote datasets under {}", cfg.data.root.display());
        }
        Cmd::Train { cfg, resume, stop_after } => {
            let cfg = cfg.resolve()?;
            let out = harness::cmd_train(&cfg, resume, stop_after)?;
            println!("run directory: {}", out.display());
        }
        Cmd::Evaluate { cfg, checkpoint, dataset, oracle } => {
            let cfg = cfg.resolve()?;
            let dataset = dataset.unwrap_or_else(|| cfg.data.root.join("target_eval"));
            let report =
                harness::cmd_evaluate(&checkpoint, &dataset, &cfg.fusion, &cfg.out, oracle)?;
            println!(
                "mPQ {:.4}  mSQ {:.4}  mRQ {:.4}  mIoU {:.4}  mAP {:.4}  ({} images)",
                report.pq.pq, report.pq.sq, report.pq.rq, report.miou, report.map, report.num_images
            );
        }
        Cmd::Study { cfg } => {
            let cfg = cfg.resolve()?;
            let rows = harness::cmd_study(&cfg)?;
            for r in &rows {
                println!(
                    "{:<10} mAP {:.3}±{:.3}  mPQ {:.3}±{:.3}  shared-params {}",
                    r.topology.to_string(),
                    r.map.mean,
                    r.map.std,
                    r.mpq.mean,
                    r.mpq.std,
                    r.shared_params
                );
            }
        }
        Cmd::Ablate { cfg, mode, instance_losses } => {
            let cfg = cfg.resolve()?;
            let mode = if instance_losses { AblateMode::InstanceLosses } else { mode };
            let rows = harness::cmd_ablate(&cfg, mode)?;
            for r in &rows {
                println!(
                    "{:<22} mAP {:.3}±{:.3}  mPQ {:.3}±{:.3}",
                    r.label, r.map.mean, r.map.std, r.mpq.mean, r.mpq.std
                );
            }
        }
        Cmd::Plot { run_dir } => {
            for p in harness::cmd_plot(&run_dir)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
