use bigans_core::data::{apply_flips, bicubic_downsample, sample_patch_pair, DatasetConfig, SourceImage};
use bigans_core::fusion::soft;
use bigans_core::imgio::{crop, quantize_to_8bit, rgb_to_y, shave_border};
use bigans_core::metrics::{perceptual_index, psnr, rmse, ssim};
use bigans_core::*;
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn img255(h: usize, w: usize) -> impl Strategy<Value = ImageTensor<f64>> {
    prop::collection::vec(0.0f64..=255.0, 3 * h * w)
        .prop_map(move |v| ImageTensor::new(Tensor::from_vec(&[1, 3, h, w], v), Range::EightBit, ColorSpace::Rgb))
}

fn pair(h: usize, w: usize) -> impl Strategy<Value = (ImageTensor<f64>, ImageTensor<f64>)> {
    (img255(h, w), img255(h, w))
}

fn unit_img(h: usize, w: usize) -> impl Strategy<Value = ImageTensor<f64>> {
    prop::collection::vec(0.0f64..=1.0, 3 * h * w).prop_map(move |v| ImageTensor::rgb(Tensor::from_vec(&[1, 3, h, w], v)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fused_values_lie_between_inputs((g_big, g_small) in pair(4, 5), xi in 0.0f64..300.0) {
        let out = fuse(&g_big, &g_small, &FusionParams::new(xi).unwrap()).unwrap();
        for ((&o, &a), &b) in out.data.data().iter().zip(g_big.data.data()).zip(g_small.data.data()) {
            prop_assert!(o >= a.min(b) && o <= a.max(b));
            prop_assert!(((o - a).abs() - (a - b).abs().min(xi)).abs() < 1e-9);
            prop_assert!(((o - b).abs() - ((a - b).abs() - xi).max(0.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn fusion_is_monotone_in_threshold((g_big, g_small) in pair(4, 4), x1 in 0.0f64..50.0, dx in 0.0f64..50.0) {
        let f1 = fuse(&g_big, &g_small, &FusionParams::new(x1).unwrap()).unwrap();
        let f2 = fuse(&g_big, &g_small, &FusionParams::new(x1 + dx).unwrap()).unwrap();
        for i in 0..f1.data.len() {
            let (a, b) = (g_big.data.data()[i], g_small.data.data()[i]);
            let (v1, v2) = (f1.data.data()[i], f2.data.data()[i]);
            prop_assert!((v2 - b).abs() <= (v1 - b).abs() + 1e-12);
            prop_assert!((v2 - a).abs() + 1e-12 >= (v1 - a).abs());
        }
    }

    #[test]
    fn fusion_rmse_to_perceptual_input_is_bounded((g_big, g_small) in pair(5, 5), xi in 0.0f64..5.0) {
        let out = fuse(&g_big, &g_small, &FusionParams::new(xi).unwrap()).unwrap();
        prop_assert!(rmse(&g_big, &out).unwrap() <= xi + 1e-9);
    }

    #[test]
    fn fusing_an_image_with_itself_is_identity(a in img255(3, 3), xi in 0.0f64..10.0) {
        prop_assert_eq!(fuse(&a, &a, &FusionParams::new(xi).unwrap()).unwrap().data, a.data);
    }

    #[test]
    fn soft_is_odd_and_shrinks(d in -100.0f64..100.0, xi in 0.0f64..20.0) {
        prop_assert_eq!(soft(-d, xi), -soft(d, xi));
        prop_assert!(soft(d, xi).abs() <= d.abs());
        prop_assert!((d - soft(d, xi)).abs() <= xi + 1e-12);
    }

    #[test]
    fn luma_stays_in_studio_range(img in unit_img(3, 4)) {
        let y = rgb_to_y(&img).unwrap();
        for &v in y.data.data() {
            prop_assert!(v >= 16.0 / 255.0 - 1e-12 && v <= 235.0 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn shaves_compose(a in 0usize..4, b in 0usize..4) {
        let img = ImageTensor::rgb(Tensor::<f64>::from_fn(&[1, 3, 17, 19], |i| i as f64));
        let two = shave_border(&shave_border(&img, a).unwrap(), b).unwrap();
        prop_assert_eq!(two, shave_border(&img, a + b).unwrap());
    }

    #[test]
    fn quantization_is_idempotent(img in unit_img(3, 3)) {
        let q = quantize_to_8bit(&img);
        prop_assert_eq!(quantize_to_8bit(&q), q.clone());
        prop_assert!(q.data.data().iter().all(|v| v.fract() == 0.0));
    }

    #[test]
    fn metrics_are_symmetric((a, b) in pair(12, 12)) {
        prop_assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn perceptual_index_is_monotone(ma in 0.0f64..10.0, niqe in 0.0f64..20.0, d in 1e-3f64..5.0) {
        prop_assert_eq!(perceptual_index(ma, niqe), 0.5 * ((10.0 - ma) + niqe));
        prop_assert!(perceptual_index(ma + d, niqe) < perceptual_index(ma, niqe));
        prop_assert!(perceptual_index(ma, niqe + d) > perceptual_index(ma, niqe));
    }

    #[test]
    fn constant_survives_downsampling(c in 0.0f64..1.0, hq in 1usize..6, wq in 1usize..6) {
        let img = ImageTensor::rgb(Tensor::full(&[1, 3, 4 * hq, 4 * wq], c));
        let lr = bicubic_downsample(&img, 4).unwrap();
        prop_assert_eq!(lr.shape(), &[1, 3, hq, wq][..]);
        prop_assert!(lr.data.data().iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn patches_are_aligned_crops(seed in any::<u64>()) {
        let hr = ImageTensor::rgb(Tensor::<f64>::from_fn(&[1, 3, 40, 36], |i| ((i * 7919) % 101) as f64 / 100.0));
        let src = SourceImage::new(hr, 4).unwrap();
        let cfg = DatasetConfig { lr_patch: 3, ..Default::default() };
        let pair = sample_patch_pair(&src, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(pair.hr.shape(), &[1, 3, 12, 12][..]);
        // Locate the HR crop, then check the LR crop sits at offset / 4.
        let mut found = false;
        'outer: for oy in 0..=7 {
            for ox in 0..=6 {
                if crop(&src.hr.data, oy * 4, ox * 4, 12, 12) == pair.hr.data {
                    prop_assert_eq!(&crop(&src.lr.data, oy, ox, 3, 3), &pair.lr.data);
                    found = true;
                    break 'outer;
                }
            }
        }
        prop_assert!(found);
    }

    #[test]
    fn flips_are_involutions(h in any::<bool>(), v in any::<bool>(), img in unit_img(3, 4)) {
        let p = data::PatchPair { lr: img.clone(), hr: img.clone() };
        let twice = apply_flips(&apply_flips(&p, h, v), h, v);
        prop_assert_eq!(twice, p);
    }
}

#[test]
fn fusion_endpoints_are_exact_on_random_pairs() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    for _ in 0..100 {
        let (a, b) = pair(6, 7).new_tree(&mut runner).unwrap().current();
        let max_delta = a.data.data().iter().zip(b.data.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert_eq!(fuse(&a, &b, &FusionParams::new(0.0).unwrap()).unwrap().data, a.data);
        assert_eq!(fuse(&a, &b, &FusionParams::new(max_delta).unwrap()).unwrap().data, b.data);
    }
}
