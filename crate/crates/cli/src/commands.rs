//! The pipeline verbs. Each writes a provenance log next to its output.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bigans_core::data::{bicubic_downsample, load_dir, mod_crop, DataError, DatasetConfig, PairSource, PatchPair};
use bigans_core::fusion::FusionError;
use bigans_core::imgio::{load_image, save_image, ImageError};
use bigans_core::losses::{ConvStackExtractor, FeatureExtractor, IdentityExtractor, LossError};
use bigans_core::metrics::{
    evaluate_dir, match_dirs, plane_sweep, write_plane_csv, FileScorer, MetricReport, MetricsError, PerceptualScorer,
    PlanePoint, Protocol, ProxyScorer, SweepItem,
};
use bigans_core::models::ModelError;
use bigans_core::trainer::{
    load_checkpoint, load_checkpoint_for, run_iterations, save_checkpoint, super_resolve, train_mr, CheckpointError,
    LogRecord, LogWriter, SsimValidator, TrainContext, TrainError,
};
use bigans_core::{fuse, DType, ImageTensor, Real, Stage, TrainState};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, ExtractorChoice, RunConfig, ScorerChoice};
use crate::plot::render_plane_plot;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Offset mixed into the run seed for the fixed validation draw, so the
/// validation crops never consume the training RNG.
const VALIDATION_SEED_SALT: u64 = 0x5eed_0f_7a11d;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
}

impl CliError {
    /// 2 usage or config, 3 data, 4 non-finite loss.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::BadGrid => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::NegativeThreshold(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Data(d) => d.into(),
            TrainError::Metrics(m) => m.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Io(io) => io.into(),
            TrainError::Loss(l) => l.into(),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

/// Header written at the top of every command log.
pub fn provenance(command: &str, cfg: &RunConfig) -> String {
    let mut s = format!("# bigans {VERSION}\n# command: {command}\n# seed: {}\n# config:\n", cfg.seed);
    for line in cfg.echo().lines() {
        s.push_str("#   ");
        s.push_str(line);
        s.push('\n');
    }
    s
}

fn write_log(path: &Path, command: &str, cfg: &RunConfig, body: &str, append: bool) -> Result<(), CliError> {
    let mut f = OpenOptions::new().create(true).append(append).write(true).truncate(!append).open(path)?;
    f.write_all(provenance(command, cfg).as_bytes())?;
    f.write_all(body.as_bytes())?;
    Ok(())
}

/// Sibling `.log` path for commands whose output is a single file.
fn log_beside(out: &Path) -> PathBuf {
    out.with_extension("log")
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

// prepare --------------------------------------------------------------------

/// Writes the bicubic LR version of every HR image (after cropping to a
/// multiple of the scale) plus `manifest.csv`. Returns the image count.
pub fn cmd_prepare(hr_dir: &Path, out_dir: &Path, cfg: &RunConfig) -> Result<usize, CliError> {
    let images = load_dir::<f64>(hr_dir)?;
    fs::create_dir_all(out_dir)?;
    let scale = cfg.data.scale;
    let mut manifest = csv::Writer::from_path(out_dir.join("manifest.csv")).map_err(|e| CliError::Data(e.to_string()))?;
    let row = |m: &mut csv::Writer<fs::File>, r: &[String]| m.write_record(r).map_err(|e| CliError::Data(e.to_string()));
    row(
        &mut manifest,
        &["name", "hr_path", "lr_path", "hr_height", "hr_width", "lr_height", "lr_width"].map(String::from),
    )?;
    for (name, hr) in &images {
        let hr = mod_crop(hr, scale);
        let lr = bicubic_downsample(&hr, scale)?;
        let lr_path = out_dir.join(name);
        save_image(&lr, &lr_path)?;
        row(
            &mut manifest,
            &[
                name.clone(),
                hr_dir.join(name).display().to_string(),
                lr_path.display().to_string(),
                hr.height().to_string(),
                hr.width().to_string(),
                lr.height().to_string(),
                lr.width().to_string(),
            ],
        )?;
    }
    manifest.flush()?;
    let body = format!("prepared {} images from {} at scale {scale}\n", images.len(), hr_dir.display());
    write_log(&out_dir.join("prepare.log"), "prepare", cfg, &body, false)?;
    Ok(images.len())
}

// train ----------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Mr,
    Wp,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Mr => "mr",
            Branch::Wp => "wp",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    /// Stage and iteration counter of the last state written.
    pub stage: Stage,
    pub iteration: u64,
    pub last_record: Option<LogRecord>,
}

pub const TRAIN_LOG: &str = "train_log.csv";

pub fn checkpoint_name(stage: Stage) -> String {
    format!("{}.ckpt", stage.name())
}

/// Trains one branch into `out_dir`. `stop_at` counts iterations; for the
/// WP branch stage 2 continues the count after stage 1's budget, and for
/// the MR branch it must fall on an epoch boundary.
pub fn cmd_train(
    branch: Branch,
    cfg: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    stop_at: Option<u64>,
) -> Result<TrainOutcome, CliError> {
    match cfg.dtype {
        DType::F32 => train_typed::<f32>(branch, cfg, out_dir, resume, stop_at),
        DType::F64 => train_typed::<f64>(branch, cfg, out_dir, resume, stop_at),
    }
}

fn build_extractor<T: Real>(choice: &ExtractorChoice) -> Result<Box<dyn FeatureExtractor<T>>, CliError> {
    Ok(match choice {
        ExtractorChoice::Identity => Box::new(IdentityExtractor),
        ExtractorChoice::Random { seed, widths } => Box::new(ConvStackExtractor::<T>::seeded_random(*seed, widths)),
        ExtractorChoice::Asset(p) => Box::new(ConvStackExtractor::<T>::from_asset(p)?),
    })
}

/// Fixed held-out crops for per-epoch SSIM; drawn from their own RNG.
fn validation_pairs<T: Real>(cfg: &RunConfig, data: &DatasetConfig) -> Result<Vec<PatchPair<T>>, CliError> {
    let usable = data.hr_patch() as i64 - 2 * Protocol::STANDARD.shave as i64;
    if usable < bigans_core::metrics::SSIM_WINDOW as i64 {
        return Err(CliError::Usage(format!(
            "MR validation needs an HR patch of at least {} pixels, got {} (raise data.lr_patch)",
            bigans_core::metrics::SSIM_WINDOW + 2 * Protocol::STANDARD.shave,
            data.hr_patch()
        )));
    }
    let vcfg = DatasetConfig {
        hr_dir: cfg.val_dir.clone().unwrap_or_else(|| data.hr_dir.clone()),
        batch_size: 1,
        flip: false,
        ..data.clone()
    };
    let src = PairSource::<T>::load(&vcfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VALIDATION_SEED_SALT);
    Ok((0..cfg.val_pairs).map(|_| src.sample_batch(&vcfg, &mut rng)).collect::<Result<_, _>>()?)
}

fn train_typed<T: Real>(
    branch: Branch,
    cfg: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    stop_at: Option<u64>,
) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    let data = cfg.dataset();
    let source = PairSource::<T>::load(&data)?;
    let extractor = build_extractor::<T>(&cfg.extractor)?;
    let ctx = TrainContext {
        weights: cfg.weights,
        extractor: extractor.as_ref(),
        optimizer: cfg.optimizer,
        schedule: cfg.schedule,
    };
    let disc = cfg.discriminator();
    let generator = match branch {
        Branch::Mr => cfg.mr_generator(),
        Branch::Wp => cfg.wp_generator(),
    };
    let mut state: TrainState<T> = match resume {
        Some(p) => load_checkpoint_for(p, &generator, &disc)?,
        None => {
            let stage = if branch == Branch::Mr { Stage::Mr } else { Stage::Wp1 };
            TrainState::new(stage, generator, disc, cfg.seed)?
        }
    };
    let validator = match branch {
        Branch::Mr => Some(SsimValidator::new(validation_pairs::<T>(cfg, &data)?, state.generator.clone())?),
        Branch::Wp => None,
    };

    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join(TRAIN_LOG);
    let append = resume.is_some() && fs::metadata(&log_path).map(|m| m.len() > 0).unwrap_or(false);
    let file = OpenOptions::new().create(true).append(append).write(true).truncate(!append).open(&log_path)?;
    let mut log = LogWriter::new(BufWriter::new(file), !append)?;
    let mut last_record = None;
    let mut checkpoints = Vec::new();

    let result = (|| -> Result<(), CliError> {
        let mut on_record = |r: &LogRecord| -> Result<(), TrainError> {
            log.write(r)?;
            last_record = Some(r.clone());
            Ok(())
        };
        match branch {
            Branch::Mr => {
                let per_epoch = source.batches_per_epoch(&data) as u64;
                let epochs = match stop_at {
                    Some(n) if n % per_epoch != 0 => {
                        return Err(CliError::Usage(format!(
                            "--stop-at {n} is not a multiple of the epoch length {per_epoch}"
                        )))
                    }
                    Some(n) => (n / per_epoch).min(cfg.mr_epochs),
                    None => cfg.mr_epochs,
                };
                let validator = validator.as_ref().expect("mr validator");
                train_mr(&mut state, &source, &data, &ctx, epochs, &mut |p| validator.score(p), &mut on_record)?;
                let path = out_dir.join(checkpoint_name(Stage::Mr));
                save_checkpoint(&state, &path)?;
                checkpoints.push(path);
            }
            Branch::Wp => {
                let total = cfg.schedule.total_iterations;
                let stop = stop_at.unwrap_or(2 * total);
                if state.stage == Stage::Wp1 {
                    run_iterations(&mut state, &source, &data, &ctx, stop.min(total), &mut on_record)?;
                    let path = out_dir.join(checkpoint_name(Stage::Wp1));
                    save_checkpoint(&state, &path)?;
                    checkpoints.push(path);
                    if state.iteration < total {
                        return Ok(());
                    }
                    state = TrainState::warm_start_stage2(&state, cfg.carry_discriminator)?;
                }
                let until = stop.saturating_sub(total).min(total);
                run_iterations(&mut state, &source, &data, &ctx, until, &mut on_record)?;
                let path = out_dir.join(checkpoint_name(Stage::Wp2));
                save_checkpoint(&state, &path)?;
                checkpoints.push(path);
            }
        }
        Ok(())
    })();
    log.flush()?;

    let mut body = match resume {
        Some(p) => format!("# resumed from: {}\n", p.display()),
        None => String::new(),
    };
    match &result {
        Ok(()) => {
            body += &format!("stage {} stopped at iteration {}\n", state.stage, state.iteration);
            if let Some(b) = &state.best {
                body += &format!("best validation ssim {:.6} at epoch {}\n", b.ssim, b.epoch);
            }
            for c in &checkpoints {
                body += &format!("wrote {}\n", c.display());
            }
        }
        Err(e) => body += &format!("failed: {e}\n"),
    }
    write_log(&out_dir.join("train.log"), &format!("train {}", branch.name()), cfg, &body, resume.is_some())?;
    result?;
    Ok(TrainOutcome { checkpoints, stage: state.stage, iteration: state.iteration, last_record })
}

// infer ----------------------------------------------------------------------

/// Super-resolves every PNG in `input_dir` with the checkpoint's generator.
/// With `branch` set, the checkpoint must match that branch's configured
/// architecture.
pub fn cmd_infer(
    checkpoint: &Path,
    input_dir: &Path,
    out_dir: &Path,
    branch: Option<Branch>,
    cfg: &RunConfig,
) -> Result<usize, CliError> {
    match cfg.dtype {
        DType::F32 => infer_typed::<f32>(checkpoint, input_dir, out_dir, branch, cfg),
        DType::F64 => infer_typed::<f64>(checkpoint, input_dir, out_dir, branch, cfg),
    }
}

fn infer_typed<T: Real>(
    checkpoint: &Path,
    input_dir: &Path,
    out_dir: &Path,
    branch: Option<Branch>,
    cfg: &RunConfig,
) -> Result<usize, CliError> {
    let state: TrainState<T> = match branch {
        Some(Branch::Mr) => load_checkpoint_for(checkpoint, &cfg.mr_generator(), &cfg.discriminator())?,
        Some(Branch::Wp) => load_checkpoint_for(checkpoint, &cfg.wp_generator(), &cfg.discriminator())?,
        None => load_checkpoint(checkpoint)?,
    };
    let images = load_dir::<T>(input_dir)?;
    fs::create_dir_all(out_dir)?;
    for (name, lr) in &images {
        let sr = super_resolve(&state, lr)?;
        save_image(&sr, &out_dir.join(name))?;
    }
    let body = format!(
        "checkpoint {} (stage {}, iteration {})\nsuper-resolved {} images from {}\n",
        checkpoint.display(),
        state.stage,
        state.iteration,
        images.len(),
        input_dir.display()
    );
    write_log(&out_dir.join("infer.log"), "infer", cfg, &body, false)?;
    Ok(images.len())
}

// fuse -----------------------------------------------------------------------

/// Fuses same-named images: `wp_dir` holds the perception-oriented results,
/// `mr_dir` the distortion-oriented ones.
pub fn cmd_fuse(wp_dir: &Path, mr_dir: &Path, out_dir: &Path, cfg: &RunConfig) -> Result<usize, CliError> {
    let names = match_dirs(wp_dir, mr_dir)?;
    fs::create_dir_all(out_dir)?;
    for name in &names {
        let big: ImageTensor<f64> = load_image(&wp_dir.join(name))?;
        let small: ImageTensor<f64> = load_image(&mr_dir.join(name))?;
        save_image(&fuse(&big, &small, &cfg.fusion)?, &out_dir.join(name))?;
    }
    let body = format!("fused {} images with xi {}\n", names.len(), cfg.fusion.xi);
    write_log(&out_dir.join("fuse.log"), "fuse", cfg, &body, false)?;
    Ok(names.len())
}

// evaluate / sweep -------------------------------------------------------------

fn build_scorer(cfg: &RunConfig) -> Result<Option<Box<dyn PerceptualScorer<f64>>>, CliError> {
    Ok(match &cfg.scorer {
        ScorerChoice::None => None,
        ScorerChoice::Proxy => Some(Box::new(ProxyScorer)),
        ScorerChoice::File { path, polarity } => Some(Box::new(FileScorer::load(path, *polarity)?)),
    })
}

pub fn cmd_evaluate(sr_dir: &Path, hr_dir: &Path, out_csv: &Path, cfg: &RunConfig) -> Result<MetricReport, CliError> {
    let scorer = build_scorer(cfg)?;
    let report = evaluate_dir(sr_dir, hr_dir, scorer.as_deref(), &cfg.metrics)?;
    ensure_parent(out_csv)?;
    report.save_csv(out_csv)?;
    let m = &report.means;
    let mut body = format!(
        "{} images: rmse {:.4} psnr {:.4} ({} infinite) ssim {:.6}\n",
        report.records.len(),
        m.rmse,
        m.psnr,
        m.psnr_infinite,
        m.ssim
    );
    if let Some(p) = m.perceptual {
        body += &format!("perceptual {p:.6}\n");
    }
    write_log(&log_beside(out_csv), "evaluate", cfg, &body, false)?;
    Ok(report)
}

/// Traces the perception–distortion curve over `sweep.grid`. RMSE is taken
/// against `hr_dir` when given, otherwise against the MR images.
pub fn cmd_sweep(
    wp_dir: &Path,
    mr_dir: &Path,
    hr_dir: Option<&Path>,
    out_csv: &Path,
    plot_path: &Path,
    cfg: &RunConfig,
) -> Result<Vec<PlanePoint>, CliError> {
    let scorer = build_scorer(cfg)?
        .ok_or_else(|| CliError::Usage("sweep needs a perceptual scorer (metrics.scorer)".into()))?;
    let names = match_dirs(wp_dir, mr_dir)?;
    if let Some(hr) = hr_dir {
        match_dirs(wp_dir, hr)?;
    }
    let mut items = Vec::with_capacity(names.len());
    for name in &names {
        items.push(SweepItem {
            id: name.clone(),
            perceptual: load_image::<f64>(&wp_dir.join(name))?,
            distortion: load_image::<f64>(&mr_dir.join(name))?,
            reference: hr_dir.map(|d| load_image::<f64>(&d.join(name))).transpose()?,
        });
    }
    let points = plane_sweep(&items, &cfg.grid(), scorer.as_ref(), &cfg.metrics, cfg.fusion.rule)?;
    ensure_parent(out_csv)?;
    write_plane_csv(&points, fs::File::create(out_csv)?)?;
    ensure_parent(plot_path)?;
    render_plane_plot(&points, 480, 360)
        .save(plot_path)
        .map_err(|e| CliError::Data(format!("writing {}: {e}", plot_path.display())))?;
    let mut body = format!("{} images, {} thresholds\n", names.len(), points.len());
    for p in &points {
        body += &format!("xi {} perceptual {:.6} rmse {:.6}\n", p.xi, p.perceptual, p.rmse);
    }
    write_log(&log_beside(out_csv), "sweep", cfg, &body, false)?;
    Ok(points)
}

