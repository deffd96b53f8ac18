use bigans_core::models::*;
use bigans_core::params::{init_parameters, xavier_bound, Architecture, LayerKind};
use bigans_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn mr(n: usize, b: usize) -> GeneratorConfig {
    GeneratorConfig::Mr(MRGeneratorConfig { n_features: n, n_mr_blocks: b })
}

fn wp(n: usize, r: usize) -> GeneratorConfig {
    GeneratorConfig::Wp(WPGeneratorConfig { n_features: n, n_resblocks: r })
}

#[test]
fn generators_are_exactly_x4() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for g in [mr(4, 1), wp(4, 2)] {
        let p = init_parameters::<f32, _, _>(&g, &mut rng);
        for (h, w) in [(8, 8), (24, 24), (33, 33), (5, 11)] {
            let x = ImageTensor::rgb(Tensor::<f32>::full(&[2, 3, h, w], 0.3));
            let y = g.trace(&p, &x).unwrap();
            assert_eq!(y.output().shape(), &[2, 3, 4 * h, 4 * w], "{} {h}x{w}", g.echo());
        }
    }
}

#[test]
fn default_generators_on_paper_patch_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for g in [GeneratorConfig::Mr(Default::default()), GeneratorConfig::Wp(Default::default())] {
        let p = init_parameters::<f32, _, _>(&g, &mut rng);
        let x = ImageTensor::rgb(Tensor::<f32>::full(&[1, 3, 24, 24], 0.5));
        let y = g.infer(&p, &x).unwrap();
        assert_eq!(y.shape(), &[1, 3, 96, 96]);
        assert!(y.data.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn generators_contain_no_batchnorm() {
    for g in [mr(64, 4), mr(64, 7), wp(64, 16), mr(3, 1)] {
        assert!(is_batchnorm_free(&g), "{}", g.echo());
    }
    assert!(!is_batchnorm_free(&DiscriminatorConfig::default()));
    assert!(is_batchnorm_free(&DiscriminatorConfig { use_batchnorm: false, ..Default::default() }));
}

#[test]
fn discriminator_layout() {
    let d = DiscriminatorConfig::default();
    assert_eq!(d.widths(), [64, 64, 128, 128, 256, 256, 512, 512]);
    assert_eq!(d.strides(), [1, 2, 1, 2, 1, 2, 1, 2]);
    assert_eq!(d.final_size(), 6);
    let bn: Vec<String> = d
        .layer_specs()
        .into_iter()
        .filter(|s| matches!(s.kind, LayerKind::BatchNorm { .. }))
        .map(|s| s.name)
        .collect();
    assert_eq!(bn, ["bn2", "bn3", "bn4", "bn5", "bn6", "bn7", "bn8"]);
}

#[test]
fn discriminator_outputs_are_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = DiscriminatorConfig { use_batchnorm: true, base_features: 4, input_size: 16, dense_features: 8 };
    let mut p = init_parameters::<f64, _, _>(&d, &mut rng);
    let x = ImageTensor::rgb(rand_tensor(&mut rng, &[5, 3, 16, 16], 0.0, 1.0));
    let out = discriminator_forward(&p, &d, &x).unwrap();
    assert_eq!(out.len(), 5);
    assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));

    p.zero_prefix("fc1");
    p.zero_prefix("fc2");
    assert!(discriminator_forward(&p, &d, &x).unwrap().iter().all(|&v| v == 0.5));

    let wrong = ImageTensor::rgb(Tensor::<f64>::zeros(&[1, 3, 8, 8]));
    assert!(matches!(discriminator_forward(&p, &d, &wrong), Err(ModelError::InputSize { .. })));
}

#[test]
fn full_size_discriminator_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = DiscriminatorConfig { base_features: 4, dense_features: 16, ..Default::default() };
    let p = init_parameters::<f32, _, _>(&d, &mut rng);
    let x = ImageTensor::rgb(Tensor::<f32>::full(&[16, 3, 96, 96], 0.5));
    assert_eq!(discriminator_forward(&p, &d, &x).unwrap().len(), 16);
}

#[test]
fn zero_weight_resblock_and_mr_block_are_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = MRGeneratorConfig { n_features: 6, n_mr_blocks: 1 };
    let mut p = init_parameters::<f64, _, _>(&g, &mut rng);
    p.zero_weights();
    let x = rand_tensor(&mut rng, &[2, 6, 5, 7], -1.0, 1.0);
    assert_eq!(resblock_forward(&p, "mr0.res0", &x).unwrap(), x);
    assert_eq!(mr_block_forward(&p, "mr0", &x).unwrap(), x);
    for group in mr_block_groups(&p, "mr0", &x).unwrap() {
        assert_eq!(group, x);
    }
    // Zero gate alone: output is the block input whatever the groups are.
    let mut q = init_parameters::<f64, _, _>(&g, &mut rng);
    q.zero_prefix("mr0.gate");
    assert_eq!(mr_block_forward(&q, "mr0", &x).unwrap(), x);
}

#[test]
fn resblock_shape_is_preserved() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = MRGeneratorConfig { n_features: 64, n_mr_blocks: 1 };
    let p = init_parameters::<f32, _, _>(&g, &mut rng);
    let x = Tensor::<f32>::full(&[2, 64, 24, 24], 0.1);
    assert_eq!(resblock_forward(&p, "mr0.res0", &x).unwrap().shape(), &[2, 64, 24, 24]);
    assert_eq!(mr_block_forward(&p, "mr0", &x).unwrap().shape(), &[2, 64, 24, 24]);
    assert_eq!(upsample_x2(&p, "up0", &x).unwrap().shape(), &[2, 64, 48, 48]);
}

/// Dense-matrix oracle: builds the conv as an explicit matrix on a 4×4 grid.
fn conv_matrix(w: &Tensor<f64>, c: usize, hw: usize) -> Vec<Vec<f64>> {
    let k = w.shape()[2];
    let pad = k / 2;
    let n = c * hw * hw;
    let mut m = vec![vec![0.0; n]; n];
    for oc in 0..c {
        for oy in 0..hw {
            for ox in 0..hw {
                let row = (oc * hw + oy) * hw + ox;
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = oy as isize + ky as isize - pad as isize;
                            let ix = ox as isize + kx as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= hw as isize || ix >= hw as isize {
                                continue;
                            }
                            let col = (ic * hw + iy as usize) * hw + ix as usize;
                            m[row][col] += w.data()[((oc * c + ic) * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    m
}

fn matvec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

#[test]
fn resblock_matches_dense_oracle_in_linear_region() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let c = 64;
    let hw = 4;
    let g = MRGeneratorConfig { n_features: c, n_mr_blocks: 1 };
    let mut p = init_parameters::<f64, _, _>(&g, &mut rng);
    // Non-negative weights on a positive input keep every pre-activation
    // positive, so PReLU acts as the identity.
    for name in ["mr0.res0.conv1.weight", "mr0.res0.conv2.weight"] {
        let t = p.get_mut(name).unwrap();
        for v in t.data_mut() {
            *v = v.abs();
        }
    }
    let x = rand_tensor(&mut rng, &[1, c, hw, hw], 0.1, 1.0);
    let w1 = p.get("mr0.res0.conv1.weight").unwrap().clone();
    let w2 = p.get("mr0.res0.conv2.weight").unwrap().clone();
    let h = matvec(&conv_matrix(&w1, c, hw), x.data());
    assert!(h.iter().all(|&v| v > 0.0));
    let y2 = matvec(&conv_matrix(&w2, c, hw), &h);
    let want: Vec<f64> = y2.iter().zip(x.data()).map(|(a, b)| a + b).collect();
    let got = resblock_forward(&p, "mr0.res0", &x).unwrap();
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn gate_selecting_first_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 5;
    let g = MRGeneratorConfig { n_features: n, n_mr_blocks: 1 };
    let mut p = init_parameters::<f64, _, _>(&g, &mut rng);
    let w = p.get_mut("mr0.gate.weight").unwrap();
    for oc in 0..n {
        for ic in 0..4 * n {
            *w.at_mut(oc, ic, 0, 0) = if ic == oc { 1.0 } else { 0.0 };
        }
    }
    let groups: Vec<Tensor<f64>> = (0..4).map(|_| rand_tensor(&mut rng, &[2, n, 3, 3], -1.0, 1.0)).collect();
    let x = rand_tensor(&mut rng, &[2, n, 3, 3], -1.0, 1.0);
    let y = gate_unit_forward(&p, "mr0.gate", &groups, &x).unwrap();
    let mut want = groups[0].clone();
    want.add_assign(&x);
    assert!(y.max_abs_diff(&want) < 1e-15);

    p.zero_prefix("mr0.gate");
    assert_eq!(gate_unit_forward(&p, "mr0.gate", &groups, &x).unwrap(), x);
    assert!(matches!(gate_unit_forward(&p, "mr0.gate", &groups[..3], &x), Err(ModelError::GroupCount { .. })));
}

#[test]
fn zero_weight_generators() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = ImageTensor::rgb(rand_tensor(&mut rng, &[1, 3, 6, 6], 0.0, 1.0));
    for g in [mr(4, 2), wp(4, 2)] {
        let mut p = init_parameters::<f64, _, _>(&g, &mut rng);
        p.zero_weights();
        let y = g.trace(&p, &x).unwrap();
        assert!(y.output().data().iter().all(|&v| v == 0.0));
    }

    // Zero ResBlocks: the WP trunk passes the shallow features through.
    let cfg = WPGeneratorConfig { n_features: 4, n_resblocks: 3 };
    let mut p = init_parameters::<f64, _, _>(&GeneratorConfig::Wp(cfg.clone()), &mut rng);
    for r in 0..3 {
        p.zero_prefix(&format!("res{r}."));
    }
    let (shallow, trunk) = wp_trunk_features(&p, &cfg, &x).unwrap();
    assert_eq!(shallow, trunk);
}

#[test]
fn pixel_shuffle_of_constant_upsample_is_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let g = MRGeneratorConfig { n_features: 2, n_mr_blocks: 1 };
    let mut p = init_parameters::<f64, _, _>(&g, &mut rng);
    // Zero weights with equal biases: the conv emits a constant map, the
    // shuffle keeps it constant, PReLU maps it to another constant.
    p.zero_prefix("up0.conv");
    p.get_mut("up0.conv.bias").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.7);
    let x = rand_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
    let y = upsample_x2(&p, "up0", &x).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.7));
}

#[test]
fn init_is_deterministic_and_bounded() {
    assert!((xavier_bound(576, 576) - (6.0f64 / 1152.0).sqrt()).abs() < 1e-15);
    let g = mr(64, 1);
    let a = init_parameters::<f32, _, _>(&g, &mut ChaCha8Rng::seed_from_u64(11));
    let b = init_parameters::<f32, _, _>(&g, &mut ChaCha8Rng::seed_from_u64(11));
    assert_eq!(a, b);
    let bound = xavier_bound(576, 576) as f32;
    let w = a.get("mr0.res0.conv1.weight").unwrap();
    assert!(w.data().iter().all(|v| v.abs() <= bound));
    assert!(w.data().iter().any(|v| v.abs() > 0.9 * bound));
    assert!(a.get("mr0.res0.conv1.bias").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(a.get("mr0.res0.act.slope").unwrap().data().iter().all(|&v| v == 0.25));
    assert!(g.check(&a).is_ok());
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = wp(4, 1);
    let p = init_parameters::<f32, _, _>(&g, &mut rng);
    let x = ImageTensor::rgb(Tensor::from_fn(&[1, 3, 5, 5], |i| (i as f32 * 0.1).sin().abs()));
    assert_eq!(g.infer(&p, &x).unwrap(), g.infer(&p, &x).unwrap());
}

#[test]
fn mismatched_parameters_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let p = init_parameters::<f32, _, _>(&mr(4, 1), &mut rng);
    assert!(mr(4, 2).check(&p).is_err());
    assert!(mr(8, 1).check(&p).is_err());
    let x = ImageTensor::rgb(Tensor::<f32>::zeros(&[1, 3, 4, 4]));
    assert!(mr(4, 2).trace(&p, &x).is_err());
}
