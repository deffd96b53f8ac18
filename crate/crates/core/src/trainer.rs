//! Adversarial training for both branches.
//!
//! One [`train_step`] makes one discriminator update followed by one
//! generator update on the same batch. The generator objective depends on
//! the stage:
//!
//! | stage | objective | adversarial term |
//! |---|---|---|
//! | `mr`  | pixel + λ₁·adv + λ₂·perceptual | `-mean(D)` |
//! | `wp1` | pixel + λ₁·adv | `-mean(log D)` |
//! | `wp2` | λ₁·adv + λ₂·perceptual | `-mean(log D)` |

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::arrayfile::{ArrayFile, ArrayFileError};
use crate::data::{DataError, DatasetConfig, PairSource, PatchPair};
use crate::imgio::ImageTensor;
use crate::losses::{
    adv_loss_log_grad, adv_loss_nolog_grad, discriminator_loss_grad, perceptual_loss_grad, pixel_loss_grad,
    stage1_loss, stage2_loss, total_loss_mr, FeatureExtractor, LossError, LossWeights,
};
use crate::metrics::{ssim, MetricsError, Protocol};
use crate::models::{
    trace_discriminator, DiscriminatorConfig, GeneratorConfig, MRGeneratorConfig, ModelError, WPGeneratorConfig,
};
use crate::optim::{Adam, OptimizerConfig};
use crate::params::{init_parameters, Architecture, ParamError, ParameterSet};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at iteration {}: {record:?}", record.iteration)]
    NonFinite { record: LogRecord },
    #[error("iteration {iter} outside schedule [0, {total}]")]
    IterationOutOfRange { iter: u64, total: u64 },
    #[error("stage wp2 requires a generator warm-started from stage wp1")]
    MissingWarmStart,
    #[error("stage {stage} cannot drive a {arch} generator")]
    StageArch { stage: Stage, arch: &'static str },
    #[error("empty validation set")]
    EmptyValidation,
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    File(#[from] ArrayFileError),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint arrays: {0}")]
    Params(#[from] ParamError),
    #[error("checkpoint was written for `{found}`, trainer is configured for `{expected}`")]
    ConfigMismatch { expected: String, found: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Mr,
    Wp1,
    Wp2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Mr => "mr",
            Stage::Wp1 => "wp1",
            Stage::Wp2 => "wp2",
        }
    }

    pub fn has_pixel_term(self) -> bool {
        matches!(self, Stage::Mr | Stage::Wp1)
    }

    pub fn has_perceptual_term(self) -> bool {
        matches!(self, Stage::Mr | Stage::Wp2)
    }

    /// MR drops the logarithm from the adversarial term.
    pub fn log_adversarial(self) -> bool {
        !matches!(self, Stage::Mr)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mr" => Ok(Stage::Mr),
            "wp1" => Ok(Stage::Wp1),
            "wp2" => Ok(Stage::Wp2),
            _ => Err(format!("unknown stage `{s}`")),
        }
    }
}

/// Single step decay: `lr0` before `decay_at`, `lr0 / decay_factor` after.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub total_iterations: u64,
    pub decay_at: u64,
    pub decay_factor: f64,
}

impl Default for Schedule {
    /// Desk-scale default with the same shape as the full 5e5/2.5e5 run.
    fn default() -> Self {
        Self { total_iterations: 2000, decay_at: 1000, decay_factor: 10.0 }
    }
}

impl Schedule {
    pub const REPLICATION: Schedule = Schedule { total_iterations: 500_000, decay_at: 250_000, decay_factor: 10.0 };

    /// No decay over `total_iterations`.
    pub fn constant(total_iterations: u64) -> Self {
        Self { total_iterations, decay_at: total_iterations.max(1), decay_factor: 1.0 }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.decay_at == 0 || self.decay_at > self.total_iterations {
            return Err(TrainError::Schedule(format!(
                "need 0 < decay_at ({}) <= total_iterations ({})",
                self.decay_at, self.total_iterations
            )));
        }
        if !(self.decay_factor >= 1.0) {
            return Err(TrainError::Schedule(format!("decay_factor must be >= 1, got {}", self.decay_factor)));
        }
        Ok(())
    }
}

pub fn lr_at(sched: &Schedule, opt: &OptimizerConfig, iter: u64) -> Result<f64, TrainError> {
    if iter > sched.total_iterations {
        return Err(TrainError::IterationOutOfRange { iter, total: sched.total_iterations });
    }
    Ok(if iter < sched.decay_at { opt.lr0 } else { opt.lr0 / sched.decay_factor })
}

/// Best validation result seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct BestRecord<T> {
    pub ssim: f64,
    /// 1-based epoch.
    pub epoch: u64,
    pub params: ParameterSet<T>,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub stage: Stage,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub g: ParameterSet<T>,
    pub g_opt: Adam<T>,
    pub d: ParameterSet<T>,
    pub d_opt: Adam<T>,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub best: Option<BestRecord<T>>,
    /// Set when the generator was taken over from a finished `wp1` run.
    pub warm_started: bool,
}

impl<T: Real> PartialEq for TrainState<T> {
    fn eq(&self, o: &Self) -> bool {
        self.stage == o.stage
            && self.generator == o.generator
            && self.discriminator == o.discriminator
            && self.g == o.g
            && self.g_opt == o.g_opt
            && self.d == o.d
            && self.d_opt == o.d_opt
            && self.iteration == o.iteration
            && rng_words(&self.rng) == rng_words(&o.rng)
            && self.best == o.best
            && self.warm_started == o.warm_started
    }
}

fn rng_words(r: &ChaCha8Rng) -> ([u8; 32], u64, u128) {
    (r.get_seed(), r.get_stream(), r.get_word_pos())
}

impl<T: Real> TrainState<T> {
    /// Fresh Xavier-initialized networks; generator first, then
    /// discriminator, both drawn from the state RNG.
    pub fn new(
        stage: Stage,
        generator: GeneratorConfig,
        discriminator: DiscriminatorConfig,
        seed: u64,
    ) -> Result<Self, TrainError> {
        check_stage_arch(stage, &generator)?;
        generator.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = init_parameters(&generator, &mut rng);
        let d = init_parameters(&discriminator, &mut rng);
        Ok(Self {
            stage,
            g_opt: Adam::new(&g),
            d_opt: Adam::new(&d),
            generator,
            discriminator,
            g,
            d,
            iteration: 0,
            rng,
            best: None,
            warm_started: false,
        })
    }

    /// Stage-2 state: the stage-1 generator weights with fresh optimizer
    /// moments and iteration counter. The discriminator is re-initialized
    /// unless `carry_discriminator` is set.
    pub fn warm_start_stage2(stage1: &TrainState<T>, carry_discriminator: bool) -> Result<Self, TrainError> {
        if stage1.stage != Stage::Wp1 {
            return Err(TrainError::MissingWarmStart);
        }
        let mut rng = stage1.rng.clone();
        let d = if carry_discriminator {
            stage1.d.clone()
        } else {
            init_parameters(&stage1.discriminator, &mut rng)
        };
        Ok(Self {
            stage: Stage::Wp2,
            generator: stage1.generator.clone(),
            discriminator: stage1.discriminator.clone(),
            g: stage1.g.clone(),
            g_opt: Adam::new(&stage1.g),
            d_opt: Adam::new(&d),
            d,
            iteration: 0,
            rng,
            best: None,
            warm_started: true,
        })
    }

    /// Generator weights to use for inference: the best validated ones when
    /// present, otherwise the current ones.
    pub fn inference_params(&self) -> &ParameterSet<T> {
        self.best.as_ref().map(|b| &b.params).unwrap_or(&self.g)
    }
}

fn check_stage_arch(stage: Stage, g: &GeneratorConfig) -> Result<(), TrainError> {
    match (stage, g) {
        (Stage::Mr, GeneratorConfig::Mr(_)) | (Stage::Wp1 | Stage::Wp2, GeneratorConfig::Wp(_)) => Ok(()),
        (stage, GeneratorConfig::Mr(_)) => Err(TrainError::StageArch { stage, arch: "mr" }),
        (stage, GeneratorConfig::Wp(_)) => Err(TrainError::StageArch { stage, arch: "wp" }),
    }
}

/// Loss configuration shared by every step of a run.
pub struct TrainContext<'a, T> {
    pub weights: LossWeights,
    pub extractor: &'a dyn FeatureExtractor<T>,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
}

/// One row of the scalar training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    /// Zero-based index of the step that produced this record.
    pub iteration: u64,
    pub stage: Stage,
    pub pixel: Option<f64>,
    pub adversarial: f64,
    pub perceptual: Option<f64>,
    /// Generator objective for the stage.
    pub total: f64,
    pub d_loss: f64,
    pub lr: f64,
}

impl LogRecord {
    pub const CSV_HEADER: &'static str = "iteration,stage,pixel,adversarial,perceptual,total,d_loss,lr";

    pub fn to_csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        format!(
            "{},{},{},{:e},{},{:e},{:e},{:e}",
            self.iteration,
            self.stage,
            opt(self.pixel),
            self.adversarial,
            opt(self.perceptual),
            self.total,
            self.d_loss,
            self.lr
        )
    }

    fn is_finite(&self) -> bool {
        self.pixel.is_none_or(f64::is_finite)
            && self.perceptual.is_none_or(f64::is_finite)
            && self.adversarial.is_finite()
            && self.total.is_finite()
            && self.d_loss.is_finite()
    }
}

/// Append-only CSV sink for [`LogRecord`]s.
pub struct LogWriter<W: Write> {
    out: W,
}

impl<W: Write> LogWriter<W> {
    pub fn new(mut out: W, write_header: bool) -> std::io::Result<Self> {
        if write_header {
            writeln!(out, "{}", LogRecord::CSV_HEADER)?;
        }
        Ok(Self { out })
    }

    pub fn write(&mut self, r: &LogRecord) -> std::io::Result<()> {
        writeln!(self.out, "{}", r.to_csv_line())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

fn seed_tensor<T: Real>(values: &[T]) -> Tensor<T> {
    Tensor::from_vec(&[values.len(), 1, 1, 1], values.to_vec())
}

fn add_grads<T: Real>(a: &mut ParameterSet<T>, b: &ParameterSet<T>) {
    for (name, t) in a.iter_mut() {
        if let Ok(g) = b.get(name) {
            t.add_assign(g);
        }
    }
}

fn to_f64<T: Real>(v: T) -> f64 {
    v.as_f64()
}

/// One discriminator update then one generator update on `batch`.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    batch: &PatchPair<T>,
    ctx: &TrainContext<'_, T>,
) -> Result<LogRecord, TrainError> {
    check_stage_arch(state.stage, &state.generator)?;
    if state.stage == Stage::Wp2 && !state.warm_started {
        return Err(TrainError::MissingWarmStart);
    }
    let lr = lr_at(&ctx.schedule, &ctx.optimizer, state.iteration)?;
    let stage = state.stage;
    let w = ctx.weights;

    let g_trace = state.generator.trace(&state.g, &batch.lr)?;
    let sr = g_trace.output().clone();
    let hr = &batch.hr.data;

    // Discriminator: real patches vs. the current (detached) generator output.
    let real = trace_discriminator(&state.d, &state.discriminator, hr)?;
    let fake = trace_discriminator(&state.d, &state.discriminator, &sr)?;
    let (d_loss, g_real, g_fake) = discriminator_loss_grad(real.output().data(), fake.output().data());
    let (mut d_grads, _) = real.backward(&seed_tensor(&g_real));
    let (d_grads_fake, _) = fake.backward(&seed_tensor(&g_fake));
    add_grads(&mut d_grads, &d_grads_fake);
    let d_loss = to_f64(d_loss);
    if !d_loss.is_finite() {
        return Err(TrainError::NonFinite {
            record: LogRecord {
                iteration: state.iteration,
                stage,
                pixel: None,
                adversarial: f64::NAN,
                perceptual: None,
                total: f64::NAN,
                d_loss,
                lr,
            },
        });
    }
    state.d_opt.step(&mut state.d, &d_grads, lr, &ctx.optimizer);

    // Generator: adversarial signal through the updated discriminator.
    let judged = trace_discriminator(&state.d, &state.discriminator, &sr)?;
    let (adv, adv_grad_d) = if stage.log_adversarial() {
        adv_loss_log_grad(judged.output().data())
    } else {
        adv_loss_nolog_grad(judged.output().data())
    };
    let (_, mut sr_grads) = judged.backward(&seed_tensor(&adv_grad_d));
    let mut grad_sr = sr_grads.remove(0);
    grad_sr.scale(T::lit(w.lambda1));

    let pixel = if stage.has_pixel_term() {
        let (l, g) = pixel_loss_grad(hr, &sr)?;
        grad_sr.add_assign(&g);
        Some(to_f64(l))
    } else {
        None
    };
    let perceptual = if stage.has_perceptual_term() {
        let (l, g) = perceptual_loss_grad(ctx.extractor, hr, &sr)?;
        grad_sr.axpy(T::lit(w.lambda2), &g);
        Some(to_f64(l))
    } else {
        None
    };
    let adv = to_f64(adv);
    let total = match stage {
        Stage::Mr => total_loss_mr(pixel.unwrap_or(0.0), adv, perceptual.unwrap_or(0.0), &w),
        Stage::Wp1 => stage1_loss(pixel.unwrap_or(0.0), adv, &w),
        Stage::Wp2 => stage2_loss(adv, perceptual.unwrap_or(0.0), &w),
    };
    let record = LogRecord { iteration: state.iteration, stage, pixel, adversarial: adv, perceptual, total, d_loss, lr };
    if !record.is_finite() || !grad_sr.all_finite() {
        return Err(TrainError::NonFinite { record });
    }
    let (g_grads, _) = g_trace.backward(&grad_sr);
    state.g_opt.step(&mut state.g, &g_grads, lr, &ctx.optimizer);
    state.iteration += 1;
    Ok(record)
}

/// Runs steps, drawing batches from the state RNG, until the iteration
/// counter reaches `until`.
pub fn run_iterations<T: Real>(
    state: &mut TrainState<T>,
    source: &PairSource<T>,
    data: &DatasetConfig,
    ctx: &TrainContext<'_, T>,
    until: u64,
    on_record: &mut dyn FnMut(&LogRecord) -> Result<(), TrainError>,
) -> Result<(), TrainError> {
    while state.iteration < until {
        let batch = source.sample_batch(data, &mut state.rng)?;
        let rec = train_step(state, &batch, ctx)?;
        on_record(&rec)?;
    }
    Ok(())
}

/// Mean protocol SSIM of clamped generator outputs on held-out pairs.
pub struct SsimValidator<T> {
    pairs: Vec<PatchPair<T>>,
    generator: GeneratorConfig,
}

impl<T: Real> SsimValidator<T> {
    pub fn new(pairs: Vec<PatchPair<T>>, generator: GeneratorConfig) -> Result<Self, TrainError> {
        if pairs.is_empty() {
            return Err(TrainError::EmptyValidation);
        }
        Ok(Self { pairs, generator })
    }

    pub fn score(&self, params: &ParameterSet<T>) -> Result<f64, TrainError> {
        let mut total = 0.0;
        for p in &self.pairs {
            let sr = self.generator.infer(params, &p.lr)?;
            total += ssim(&Protocol::STANDARD.apply(&p.hr)?, &Protocol::STANDARD.apply(&sr)?)?;
        }
        Ok(total / self.pairs.len() as f64)
    }
}

/// Index of the maximum score; ties go to the earliest.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Epoch-based single-stage MR training. After each epoch the generator is
/// scored by `validate`; the best-scoring parameters (earliest on ties) are
/// kept in `state.best` and returned. Resumes from `state.iteration`.
pub fn train_mr<T: Real>(
    state: &mut TrainState<T>,
    source: &PairSource<T>,
    data: &DatasetConfig,
    ctx: &TrainContext<'_, T>,
    epochs: u64,
    validate: &mut dyn FnMut(&ParameterSet<T>) -> Result<f64, TrainError>,
    on_record: &mut dyn FnMut(&LogRecord) -> Result<(), TrainError>,
) -> Result<ParameterSet<T>, TrainError> {
    if state.stage != Stage::Mr {
        return Err(TrainError::StageArch { stage: state.stage, arch: "mr" });
    }
    let per_epoch = source.batches_per_epoch(data) as u64;
    let end = epochs * per_epoch;
    while state.iteration < end {
        let epoch_end = (state.iteration / per_epoch + 1) * per_epoch;
        run_iterations(state, source, data, ctx, epoch_end, on_record)?;
        let epoch = epoch_end / per_epoch;
        let score = validate(&state.g)?;
        if state.best.as_ref().is_none_or(|b| score > b.ssim) {
            state.best = Some(BestRecord { ssim: score, epoch, params: state.g.clone() });
        }
    }
    state
        .best
        .as_ref()
        .map(|b| b.params.clone())
        .ok_or(TrainError::Schedule("no epochs were run".into()))
}

/// Outcome of the two-stage WP run.
pub struct WpResult<T> {
    pub stage1: TrainState<T>,
    pub stage2: TrainState<T>,
}

/// Stage 1 (pixel + adversarial) then stage 2 (adversarial + perceptual),
/// each for `ctx.schedule.total_iterations` steps. Stage 2 starts from the
/// final stage-1 generator with fresh optimizer moments.
pub fn train_wp<T: Real>(
    stage1: TrainState<T>,
    source: &PairSource<T>,
    data: &DatasetConfig,
    ctx: &TrainContext<'_, T>,
    carry_discriminator: bool,
    on_record: &mut dyn FnMut(&LogRecord) -> Result<(), TrainError>,
) -> Result<WpResult<T>, TrainError> {
    let mut s1 = stage1;
    if s1.stage != Stage::Wp1 {
        return Err(TrainError::StageArch { stage: s1.stage, arch: "wp" });
    }
    run_iterations(&mut s1, source, data, ctx, ctx.schedule.total_iterations, on_record)?;
    let mut s2 = TrainState::warm_start_stage2(&s1, carry_discriminator)?;
    run_iterations(&mut s2, source, data, ctx, ctx.schedule.total_iterations, on_record)?;
    Ok(WpResult { stage1: s1, stage2: s2 })
}

// Checkpoints ---------------------------------------------------------------

fn parse_echo(s: &str) -> Result<BTreeMap<String, String>, CheckpointError> {
    s.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| CheckpointError::Header(format!("bad config token `{kv}`")))
        })
        .collect()
}

fn field<V: FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<V, CheckpointError> {
    m.get(key)
        .ok_or_else(|| CheckpointError::Header(format!("missing `{key}`")))?
        .parse()
        .map_err(|_| CheckpointError::Header(format!("bad value for `{key}`")))
}

pub fn generator_from_echo(s: &str) -> Result<GeneratorConfig, CheckpointError> {
    let m = parse_echo(s)?;
    match m.get("arch").map(String::as_str) {
        Some("mr") => Ok(GeneratorConfig::Mr(MRGeneratorConfig {
            n_features: field(&m, "n_features")?,
            n_mr_blocks: field(&m, "n_mr_blocks")?,
        })),
        Some("wp") => Ok(GeneratorConfig::Wp(WPGeneratorConfig {
            n_features: field(&m, "n_features")?,
            n_resblocks: field(&m, "n_resblocks")?,
        })),
        other => Err(CheckpointError::Header(format!("unknown generator arch {other:?}"))),
    }
}

pub fn discriminator_from_echo(s: &str) -> Result<DiscriminatorConfig, CheckpointError> {
    let m = parse_echo(s)?;
    if m.get("arch").map(String::as_str) != Some("disc") {
        return Err(CheckpointError::Header("not a discriminator config".into()));
    }
    Ok(DiscriminatorConfig {
        use_batchnorm: field(&m, "use_batchnorm")?,
        base_features: field(&m, "base_features")?,
        input_size: field(&m, "input_size")?,
        dense_features: field(&m, "dense_features")?,
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex32(s: &str) -> Result<[u8; 32], CheckpointError> {
    if s.len() != 64 {
        return Err(CheckpointError::Header("rng seed must be 64 hex digits".into()));
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
            .map_err(|_| CheckpointError::Header("bad hex in rng seed".into()))?;
    }
    Ok(out)
}

fn push_set<T: Real>(file: &mut ArrayFile<T>, prefix: &str, set: &ParameterSet<T>) {
    for (name, t) in set.iter() {
        file.arrays.push((format!("{prefix}/{name}"), t.clone()));
    }
}

fn take_set<T: Real>(file: &ArrayFile<T>, prefix: &str) -> ParameterSet<T> {
    let mut set = ParameterSet::new();
    let p = format!("{prefix}/");
    for (name, t) in &file.arrays {
        if let Some(rest) = name.strip_prefix(&p) {
            set.insert(rest, t.clone());
        }
    }
    set
}

pub fn checkpoint_to_file<T: Real>(state: &TrainState<T>) -> ArrayFile<T> {
    let mut f = ArrayFile::default();
    let h = &mut f.header;
    h.insert("content".into(), "train-state".into());
    h.insert("dtype".into(), T::DTYPE.name().into());
    h.insert("stage".into(), state.stage.name().into());
    h.insert("generator".into(), state.generator.echo());
    h.insert("discriminator".into(), state.discriminator.echo());
    h.insert("iteration".into(), state.iteration.to_string());
    h.insert("g_opt_t".into(), state.g_opt.t.to_string());
    h.insert("d_opt_t".into(), state.d_opt.t.to_string());
    h.insert("rng_seed".into(), hex(&state.rng.get_seed()));
    h.insert("rng_stream".into(), state.rng.get_stream().to_string());
    h.insert("rng_word_pos".into(), state.rng.get_word_pos().to_string());
    h.insert("warm_started".into(), state.warm_started.to_string());
    if let Some(b) = &state.best {
        // Bit pattern so the score round-trips exactly.
        h.insert("best_ssim_bits".into(), b.ssim.to_bits().to_string());
        h.insert("best_epoch".into(), b.epoch.to_string());
    }
    push_set(&mut f, "g", &state.g);
    push_set(&mut f, "g_m", &state.g_opt.m);
    push_set(&mut f, "g_v", &state.g_opt.v);
    push_set(&mut f, "d", &state.d);
    push_set(&mut f, "d_m", &state.d_opt.m);
    push_set(&mut f, "d_v", &state.d_opt.v);
    if let Some(b) = &state.best {
        push_set(&mut f, "best", &b.params);
    }
    f
}

pub fn checkpoint_from_file<T: Real>(f: &ArrayFile<T>) -> Result<TrainState<T>, CheckpointError> {
    let h = &f.header;
    if h.get("content").map(String::as_str) != Some("train-state") {
        return Err(CheckpointError::Header("not a training checkpoint".into()));
    }
    let stage: Stage = h
        .get("stage")
        .ok_or_else(|| CheckpointError::Header("missing `stage`".into()))?
        .parse()
        .map_err(CheckpointError::Header)?;
    let generator = generator_from_echo(h.get("generator").map(String::as_str).unwrap_or(""))?;
    let discriminator = discriminator_from_echo(h.get("discriminator").map(String::as_str).unwrap_or(""))?;
    let g = take_set(f, "g");
    let d = take_set(f, "d");
    generator.check(&g)?;
    discriminator.check(&d)?;
    let g_opt = Adam { m: take_set(f, "g_m"), v: take_set(f, "g_v"), t: field(h, "g_opt_t")? };
    let d_opt = Adam { m: take_set(f, "d_m"), v: take_set(f, "d_v"), t: field(h, "d_opt_t")? };
    generator.check(&g_opt.m)?;
    generator.check(&g_opt.v)?;
    discriminator.check(&d_opt.m)?;
    discriminator.check(&d_opt.v)?;
    let mut rng = ChaCha8Rng::from_seed(unhex32(h.get("rng_seed").map(String::as_str).unwrap_or(""))?);
    rng.set_stream(field(h, "rng_stream")?);
    rng.set_word_pos(field(h, "rng_word_pos")?);
    let best = match h.get("best_ssim_bits") {
        Some(bits) => {
            let bits: u64 = bits.parse().map_err(|_| CheckpointError::Header("bad best_ssim_bits".into()))?;
            let params = take_set(f, "best");
            generator.check(&params)?;
            Some(BestRecord { ssim: f64::from_bits(bits), epoch: field(h, "best_epoch")?, params })
        }
        None => None,
    };
    Ok(TrainState {
        stage,
        generator,
        discriminator,
        g,
        g_opt,
        d,
        d_opt,
        iteration: field(h, "iteration")?,
        rng,
        best,
        warm_started: field(h, "warm_started")?,
    })
}

pub fn save_checkpoint<T: Real>(state: &TrainState<T>, path: &Path) -> Result<(), CheckpointError> {
    Ok(checkpoint_to_file(state).save(path)?)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<TrainState<T>, CheckpointError> {
    checkpoint_from_file(&ArrayFile::load(path)?)
}

/// Loads a checkpoint and refuses it unless its architecture matches the
/// trainer's configuration.
pub fn load_checkpoint_for<T: Real>(
    path: &Path,
    generator: &GeneratorConfig,
    discriminator: &DiscriminatorConfig,
) -> Result<TrainState<T>, CheckpointError> {
    let state = load_checkpoint(path)?;
    if &state.generator != generator {
        return Err(CheckpointError::ConfigMismatch { expected: generator.echo(), found: state.generator.echo() });
    }
    if &state.discriminator != discriminator {
        return Err(CheckpointError::ConfigMismatch {
            expected: discriminator.echo(),
            found: state.discriminator.echo(),
        });
    }
    Ok(state)
}

/// Runs the generator (clamped) over a batch of LR images.
pub fn super_resolve<T: Real>(state: &TrainState<T>, lr: &ImageTensor<T>) -> Result<ImageTensor<T>, TrainError> {
    Ok(state.generator.infer(state.inference_params(), lr)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_points() {
        let opt = OptimizerConfig::default();
        let s = Schedule::REPLICATION;
        assert_eq!(lr_at(&s, &opt, 0).unwrap(), 1e-4);
        assert_eq!(lr_at(&s, &opt, 249_999).unwrap(), 1e-4);
        assert!((lr_at(&s, &opt, 250_000).unwrap() - 1e-5).abs() < 1e-20);
        assert!((lr_at(&s, &opt, 499_999).unwrap() - 1e-5).abs() < 1e-20);
        assert!(matches!(lr_at(&s, &opt, 500_001), Err(TrainError::IterationOutOfRange { .. })));
    }

    #[test]
    fn lr_is_non_increasing() {
        let opt = OptimizerConfig::default();
        let s = Schedule { total_iterations: 100, decay_at: 37, decay_factor: 10.0 };
        let lrs: Vec<f64> = (0..=100).map(|i| lr_at(&s, &opt, i).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::default().validate().is_ok());
        assert!(Schedule { total_iterations: 10, decay_at: 0, decay_factor: 10.0 }.validate().is_err());
        assert!(Schedule { total_iterations: 10, decay_at: 11, decay_factor: 10.0 }.validate().is_err());
    }

    #[test]
    fn best_selection() {
        assert_eq!(select_best(&[0.5]), Some(0));
        assert_eq!(select_best(&[0.5, 0.9, 0.7]), Some(1));
        assert_eq!(select_best(&[0.9, 0.9]), Some(0));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn echo_round_trip() {
        let g = GeneratorConfig::Mr(MRGeneratorConfig { n_features: 8, n_mr_blocks: 7 });
        assert_eq!(generator_from_echo(&g.echo()).unwrap(), g);
        let d = DiscriminatorConfig { use_batchnorm: false, base_features: 4, input_size: 24, dense_features: 16 };
        assert_eq!(discriminator_from_echo(&d.echo()).unwrap(), d);
    }
}
