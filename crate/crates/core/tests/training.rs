use bigans_core::arrayfile::ArrayFileError;
use bigans_core::data::{DatasetConfig, PairSource, PatchPair};
use bigans_core::losses::{discriminator_loss_grad, IdentityExtractor, LossWeights};
use bigans_core::models::trace_discriminator;
use bigans_core::optim::OptimizerConfig;
use bigans_core::synthetic::toy_image;
use bigans_core::trainer::*;
use bigans_core::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_data() -> DatasetConfig {
    DatasetConfig { lr_patch: 6, batch_size: 2, seed: 1, ..Default::default() }
}

fn toy_source<T: Real>(n: usize) -> PairSource<T> {
    PairSource::new((0..n as u64).map(|s| toy_image(s + 1, 48)).collect(), &toy_data()).unwrap()
}

fn tiny_mr() -> GeneratorConfig {
    GeneratorConfig::Mr(MRGeneratorConfig { n_features: 4, n_mr_blocks: 1 })
}

fn tiny_wp() -> GeneratorConfig {
    GeneratorConfig::Wp(WPGeneratorConfig { n_features: 4, n_resblocks: 1 })
}

fn tiny_disc(use_batchnorm: bool) -> DiscriminatorConfig {
    DiscriminatorConfig { use_batchnorm, base_features: 2, input_size: 24, dense_features: 8 }
}

fn ctx(total: u64) -> TrainContext<'static, f32> {
    TrainContext {
        weights: LossWeights::default(),
        extractor: &IdentityExtractor,
        optimizer: OptimizerConfig { lr0: 1e-3, ..Default::default() },
        schedule: Schedule { total_iterations: total, decay_at: total / 2, decay_factor: 10.0 },
    }
}

fn no_log(_: &LogRecord) -> Result<(), TrainError> {
    Ok(())
}

#[test]
fn step_is_deterministic() {
    let src = toy_source::<f32>(2);
    let data = toy_data();
    let c = ctx(10);
    let batch = src.sample_batch(&data, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut a = TrainState::<f32>::new(Stage::Mr, tiny_mr(), tiny_disc(false), 5).unwrap();
    let mut b = a.clone();
    let ra = train_step(&mut a, &batch, &c).unwrap();
    let rb = train_step(&mut b, &batch, &c).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
    assert_eq!(a.iteration, 1);
}

#[test]
fn discriminator_update_ignores_the_generator_objective() {
    let src = toy_source::<f64>(2);
    let data = toy_data();
    let batch = src.sample_batch(&data, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut state = TrainState::<f64>::new(Stage::Mr, tiny_mr(), tiny_disc(true), 6).unwrap();
    let c = TrainContext {
        weights: LossWeights::default(),
        extractor: &IdentityExtractor,
        optimizer: OptimizerConfig::default(),
        schedule: Schedule::constant(10),
    };

    let sr = state.generator.trace(&state.g, &batch.lr).unwrap().output().clone();
    let real = trace_discriminator(&state.d, &state.discriminator, &batch.hr.data).unwrap();
    let fake = trace_discriminator(&state.d, &state.discriminator, &sr).unwrap();
    let (_, gr, gf) = discriminator_loss_grad(real.output().data(), fake.output().data());
    let seed = |v: Vec<f64>| Tensor::from_vec(&[v.len(), 1, 1, 1], v);
    let (mut grads, _) = real.backward(&seed(gr));
    let (gfake, _) = fake.backward(&seed(gf));
    for (name, t) in grads.iter_mut() {
        t.add_assign(gfake.get(name).unwrap());
    }
    let mut expected = state.d.clone();
    let mut opt = state.d_opt.clone();
    opt.step(&mut expected, &grads, 1e-4, &c.optimizer);

    train_step(&mut state, &batch, &c).unwrap();
    assert_eq!(state.d, expected);
}

#[test]
fn non_finite_loss_aborts_with_record() {
    let src = toy_source::<f32>(1);
    let data = toy_data();
    let batch = src.sample_batch(&data, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mut state = TrainState::<f32>::new(Stage::Wp1, tiny_wp(), tiny_disc(false), 7).unwrap();
    state.g.get_mut("tail.bias").unwrap().data_mut()[0] = f32::NAN;
    let before = state.clone();
    match train_step(&mut state, &batch, &ctx(10)) {
        Err(TrainError::NonFinite { record }) => {
            assert_eq!(record.iteration, 0);
            assert!(record.pixel.is_some_and(f64::is_nan));
        }
        other => panic!("expected a numeric abort, got {other:?}"),
    }
    assert_eq!(state.iteration, 0);
    assert_eq!(state.g.get("head.weight").unwrap(), before.g.get("head.weight").unwrap());
}

#[test]
fn stage_two_requires_warm_start() {
    let src = toy_source::<f32>(1);
    let batch = src.sample_batch(&toy_data(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let mut state = TrainState::<f32>::new(Stage::Wp2, tiny_wp(), tiny_disc(false), 8).unwrap();
    assert!(matches!(train_step(&mut state, &batch, &ctx(10)), Err(TrainError::MissingWarmStart)));
    assert!(matches!(
        TrainState::<f32>::new(Stage::Mr, tiny_wp(), tiny_disc(false), 8),
        Err(TrainError::StageArch { .. })
    ));
}

#[test]
fn mr_loss_halves_within_200_steps() {
    let src = toy_source::<f32>(2);
    let data = DatasetConfig { batch_size: 4, ..toy_data() };
    let mut state = TrainState::<f32>::new(Stage::Mr, tiny_mr(), tiny_disc(false), 9).unwrap();
    let mut totals = Vec::new();
    run_iterations(&mut state, &src, &data, &ctx(200), 200, &mut |r| {
        assert!(r.pixel.is_some() && r.perceptual.is_some());
        totals.push(r.total);
        Ok(())
    })
    .unwrap();
    let tail = totals[180..].iter().sum::<f64>() / 20.0;
    assert!(tail <= 0.5 * totals[10], "iteration 10: {}, last 20 mean: {tail}", totals[10]);
}

#[test]
fn supervised_limit_overfits_one_image() {
    let src = toy_source::<f32>(1);
    let data = toy_data();
    let mut state = TrainState::<f32>::new(Stage::Mr, tiny_mr(), tiny_disc(false), 10).unwrap();
    let c = TrainContext { weights: LossWeights { lambda1: 0.0, lambda2: 0.0 }, ..ctx(150) };
    let mut best = Vec::new();
    run_iterations(&mut state, &src, &data, &c, 150, &mut |r| {
        assert_eq!(r.total, r.pixel.unwrap());
        let b = best.last().copied().unwrap_or(f64::INFINITY);
        best.push(b.min(r.total));
        Ok(())
    })
    .unwrap();
    assert!(best.windows(2).all(|w| w[1] <= w[0]));
    assert!(best[149] < 0.5 * best[0]);
}

#[test]
fn best_epoch_selection() {
    let src = toy_source::<f32>(2);
    let data = toy_data();
    let cases: [(&[f64], u64); 3] = [(&[0.5, 0.9, 0.7], 2), (&[0.9, 0.9], 1), (&[0.3], 1)];
    for (scores, want) in cases {
        let mut state = TrainState::<f32>::new(Stage::Mr, tiny_mr(), tiny_disc(false), 11).unwrap();
        let mut snapshots = Vec::new();
        let mut i = 0;
        let best = train_mr(
            &mut state,
            &src,
            &data,
            &ctx(100),
            scores.len() as u64,
            &mut |p| {
                snapshots.push(p.clone());
                i += 1;
                Ok(scores[i - 1])
            },
            &mut no_log,
        )
        .unwrap();
        let rec = state.best.as_ref().unwrap();
        assert_eq!(rec.epoch, want);
        assert_eq!(rec.ssim, scores[want as usize - 1]);
        assert_eq!(best, snapshots[want as usize - 1]);
        assert_eq!(state.inference_params(), &best);
    }
}

#[test]
fn ssim_validator_needs_data() {
    assert!(matches!(SsimValidator::<f32>::new(vec![], tiny_mr()), Err(TrainError::EmptyValidation)));
    let src = toy_source::<f32>(1);
    let pair = PatchPair { lr: src.images[0].lr.clone(), hr: src.images[0].hr.clone() };
    let v = SsimValidator::new(vec![pair], tiny_mr()).unwrap();
    let state = TrainState::<f32>::new(Stage::Mr, tiny_mr(), tiny_disc(false), 12).unwrap();
    let s = v.score(&state.g).unwrap();
    assert!((-1.0..=1.0).contains(&s));
}

#[test]
fn two_stage_warm_start_and_log_composition() {
    let src = toy_source::<f32>(2);
    let data = toy_data();
    let s1 = TrainState::<f32>::new(Stage::Wp1, tiny_wp(), tiny_disc(true), 13).unwrap();
    let mut log = Vec::new();
    let res = train_wp(s1, &src, &data, &ctx(20), false, &mut |r| {
        log.push(r.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(res.stage1.iteration, 20);
    assert_eq!(res.stage2.iteration, 20);
    assert!(res.stage2.warm_started);
    assert_eq!(log.len(), 40);
    for r in &log[..20] {
        assert_eq!(r.stage, Stage::Wp1);
        assert!(r.pixel.is_some() && r.perceptual.is_none());
    }
    for r in &log[20..] {
        assert_eq!(r.stage, Stage::Wp2);
        assert!(r.pixel.is_none() && r.perceptual.is_some());
    }
    assert_eq!(log[19].lr, 1e-4);
    assert_eq!(log[20].lr, 1e-3);

    let warm = TrainState::warm_start_stage2(&res.stage1, false).unwrap();
    assert_eq!(warm.g, res.stage1.g);
    assert_eq!(warm.iteration, 0);
    assert_eq!(warm.g_opt.t, 0);
    assert!(warm.g_opt.m.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    assert_ne!(warm.d, res.stage1.d);
    assert_eq!(TrainState::warm_start_stage2(&res.stage1, true).unwrap().d, res.stage1.d);
}

fn trained_state() -> TrainState<f32> {
    let src = toy_source::<f32>(2);
    let mut s = TrainState::<f32>::new(Stage::Mr, tiny_mr(), tiny_disc(true), 14).unwrap();
    train_mr(&mut s, &src, &toy_data(), &ctx(10), 3, &mut |_| Ok(0.5), &mut no_log).unwrap();
    s
}

#[test]
fn checkpoint_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    let s = trained_state();
    assert!(s.best.is_some());
    save_checkpoint(&s, &path).unwrap();
    let back: TrainState<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(back, s);

    let d = TrainState::<f64>::new(Stage::Wp1, tiny_wp(), tiny_disc(false), 15).unwrap();
    save_checkpoint(&d, &path).unwrap();
    assert_eq!(load_checkpoint::<f64>(&path).unwrap(), d);
    assert!(load_checkpoint::<f32>(&path).is_err());
}

#[test]
fn checkpoint_guards() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("wp1.ckpt");
    let s = TrainState::<f32>::new(Stage::Wp1, tiny_wp(), tiny_disc(false), 16).unwrap();
    save_checkpoint(&s, &path).unwrap();
    assert!(matches!(
        load_checkpoint_for::<f32>(&path, &tiny_mr(), &tiny_disc(false)),
        Err(CheckpointError::ConfigMismatch { .. })
    ));
    assert!(load_checkpoint_for::<f32>(&path, &tiny_wp(), &tiny_disc(false)).is_ok());
    assert!(matches!(
        load_checkpoint_for::<f32>(&path, &tiny_wp(), &tiny_disc(true)),
        Err(CheckpointError::ConfigMismatch { .. })
    ));

    let bytes = std::fs::read(&path).unwrap();
    for cut in [bytes.len() - 1, bytes.len() / 2, 20] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(CheckpointError::File(ArrayFileError::Corrupt(_)))
        ));
    }
    let mut flipped = bytes.clone();
    flipped[0] ^= 0xff;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(CheckpointError::File(ArrayFileError::BadMagic))));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let src = toy_source::<f32>(2);
    let data = toy_data();
    let c = ctx(30);
    let start = TrainState::<f32>::new(Stage::Wp1, tiny_wp(), tiny_disc(true), 17).unwrap();

    let mut straight = start.clone();
    let mut log_a = Vec::new();
    run_iterations(&mut straight, &src, &data, &c, 30, &mut |r| {
        log_a.push(r.clone());
        Ok(())
    })
    .unwrap();

    let mut first = start;
    let mut log_b = Vec::new();
    run_iterations(&mut first, &src, &data, &c, 12, &mut |r| {
        log_b.push(r.clone());
        Ok(())
    })
    .unwrap();
    save_checkpoint(&first, &path).unwrap();
    drop(first);
    let mut resumed = load_checkpoint::<f32>(&path).unwrap();
    run_iterations(&mut resumed, &src, &data, &c, 30, &mut |r| {
        log_b.push(r.clone());
        Ok(())
    })
    .unwrap();

    assert_eq!(resumed, straight);
    assert_eq!(log_a, log_b);
}

#[test]
fn log_csv_format() {
    let mut buf = Vec::new();
    let mut w = LogWriter::new(&mut buf, true).unwrap();
    w.write(&LogRecord {
        iteration: 3,
        stage: Stage::Wp1,
        pixel: Some(0.5),
        adversarial: 0.25,
        perceptual: None,
        total: 0.50025,
        d_loss: 1.0,
        lr: 1e-4,
    })
    .unwrap();
    drop(w);
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), LogRecord::CSV_HEADER);
    let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(fields.len(), 8);
    assert_eq!(fields[0], "3");
    assert_eq!(fields[1], "wp1");
    assert_eq!(fields[2].parse::<f64>().unwrap(), 0.5);
    assert_eq!(fields[4], "");
    assert_eq!(fields[7].parse::<f64>().unwrap(), 1e-4);
}
