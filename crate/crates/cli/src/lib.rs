//! Command-line pipeline: prepare, train, infer, fuse, evaluate, sweep.

pub mod commands;
pub mod config;
pub mod plot;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use commands::{Branch, CliError};
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "bigans", version, about = "Two-branch GAN super-resolution pipeline")]
pub struct Cli {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BranchArg {
    Mr,
    Wp,
}

impl From<BranchArg> for Branch {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::Mr => Branch::Mr,
            BranchArg::Wp => Branch::Wp,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bicubic LR images and a manifest for a directory of HR PNGs.
    Prepare {
        #[arg(long)]
        hr: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a branch; writes checkpoints and train_log.csv into --out.
    Train {
        #[arg(value_enum)]
        branch: BranchArg,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data.hr_dir`.
        #[arg(long)]
        hr: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// 4x super-resolution of every PNG in --input.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Require the checkpoint to match this branch's configured architecture.
        #[arg(long, value_enum)]
        branch: Option<BranchArg>,
    },
    /// Soft-threshold fusion of same-named WP and MR results.
    Fuse {
        #[arg(long)]
        wp: PathBuf,
        #[arg(long)]
        mr: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `fusion.xi` (0-255 scale).
        #[arg(long)]
        xi: Option<f64>,
    },
    /// RMSE/PSNR/SSIM (and a perceptual score) of --sr against --hr.
    Evaluate {
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        hr: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `image,score` CSV; selects the file scorer.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Perception-distortion curve over a threshold grid, as CSV and PNG.
    Sweep {
        #[arg(long)]
        wp: PathBuf,
        #[arg(long)]
        mr: PathBuf,
        #[arg(long)]
        hr: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the CSV path with a .png extension.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// `start:step:stop`; overrides `sweep.grid`.
        #[arg(long)]
        grid: Option<String>,
    },
}

fn split_override(s: &str) -> Result<(String, String), CliError> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`")))
}

impl Cli {
    /// Config file, then `--set`, then dedicated flags; validated.
    pub fn resolve_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut pairs = self.set.iter().map(|s| split_override(s)).collect::<Result<Vec<_>, _>>()?;
        if let Some(s) = self.seed {
            pairs.push(("run.seed".into(), s.to_string()));
        }
        match &self.command {
            Command::Train { hr: Some(hr), .. } => pairs.push(("data.hr_dir".into(), hr.display().to_string())),
            Command::Fuse { xi: Some(xi), .. } => pairs.push(("fusion.xi".into(), xi.to_string())),
            Command::Evaluate { scores: Some(p), .. } => {
                pairs.push(("metrics.scorer".into(), "file".into()));
                pairs.push(("metrics.scores".into(), p.display().to_string()));
            }
            Command::Sweep { grid: Some(g), .. } => pairs.push(("sweep.grid".into(), g.clone())),
            _ => {}
        }
        cfg.apply(&pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one parsed invocation, returning a one-line summary.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = cli.resolve_config()?;
    Ok(match &cli.command {
        Command::Prepare { hr, out } => {
            let n = commands::cmd_prepare(hr, out, &cfg)?;
            format!("prepared {n} images into {}", out.display())
        }
        Command::Train { branch, out, resume, stop_at, .. } => {
            let o = commands::cmd_train((*branch).into(), &cfg, out, resume.as_deref(), *stop_at)?;
            format!("trained to {} iteration {}; checkpoints in {}", o.stage, o.iteration, out.display())
        }
        Command::Infer { checkpoint, input, out, branch } => {
            let n = commands::cmd_infer(checkpoint, input, out, branch.map(Into::into), &cfg)?;
            format!("super-resolved {n} images into {}", out.display())
        }
        Command::Fuse { wp, mr, out, .. } => {
            let n = commands::cmd_fuse(wp, mr, out, &cfg)?;
            format!("fused {n} images into {}", out.display())
        }
        Command::Evaluate { sr, hr, out, .. } => {
            let r = commands::cmd_evaluate(sr, hr, out, &cfg)?;
            format!("evaluated {} images: rmse {:.4} ssim {:.4}", r.records.len(), r.means.rmse, r.means.ssim)
        }
        Command::Sweep { wp, mr, hr, out, plot, .. } => {
            let plot = plot.clone().unwrap_or_else(|| out.with_extension("png"));
            let pts = commands::cmd_sweep(wp, mr, hr.as_deref(), out, &plot, &cfg)?;
            format!("swept {} thresholds into {}", pts.len(), out.display())
        }
    })
}
