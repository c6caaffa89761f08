use proptest::prelude::*;
use stitchlab_core::diffusion::{NoiseSchedule, ScheduleConfig};
use stitchlab_core::encoder::{cosine, similarity};
use stitchlab_core::eval::{class_metrics, ssim};
use stitchlab_core::features::{self, HfConfig};
use stitchlab_core::losses::LossConfig;
use stitchlab_core::prior::{blend, fuse_inference, PriorConfig};
use stitchlab_core::{Image, Mask, TokenSequence};

fn image(h: usize, w: usize, c: usize) -> impl Strategy<Value = Image> {
    proptest::collection::vec(0.0f64..=1.0, h * w * c).prop_map(move |d| Image::from_vec(h, w, c, d).unwrap())
}

fn sized_image(c: usize) -> impl Strategy<Value = Image> {
    (8usize..28, 8usize..28).prop_flat_map(move |(h, w)| image(h, w, c))
}

fn image_and_mask() -> impl Strategy<Value = (Image, Mask)> {
    (8usize..24, 8usize..24).prop_flat_map(|(h, w)| {
        (
            image(h, w, 3),
            proptest::collection::vec(any::<bool>(), h * w)
                .prop_map(move |bits| Mask::from_fn(h, w, |y, x| bits[y * w + x])),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn operator_maps_stay_in_unit_range(img in sized_image(3)) {
        let cfg = HfConfig::default();
        for map in [features::sobel(&img), features::laplacian(&img), features::canny(&img, &cfg)] {
            prop_assert!(map.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let hf = features::high_frequency(&img, &cfg).unwrap();
        prop_assert_eq!(hf.channels(), 3);
        prop_assert!(hf.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let tex = features::hog_texture(&img).unwrap();
        prop_assert!(tex.max_value() <= 1.0 && tex.min_value() >= 0.0);
    }

    #[test]
    fn canny_is_binary(img in sized_image(1)) {
        let e = features::canny(&img, &HfConfig::default());
        prop_assert!(e.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(a in image(12, 12, 3), b in image(12, 12, 3)) {
        let ab = ssim(&a, &b).unwrap();
        prop_assert_eq!(ab, ssim(&b, &a).unwrap());
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_is_bounded(a in proptest::collection::vec(-5.0f64..5.0, 1..16), scale in 0.1f64..10.0) {
        let b: Vec<f64> = a.iter().map(|v| v * scale).collect();
        let c = cosine(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&c));
        if a.iter().any(|v| *v != 0.0) {
            prop_assert!((c - 1.0).abs() < 1e-12);
        }
        let t = TokenSequence::new(1, a.len(), a.clone()).unwrap();
        let s = similarity(&t, &t).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn prior_never_touches_pixels_outside_the_mask(
        (scene, mask) in image_and_mask(),
        lambda in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = stitchlab_core::Seed(seed).rng();
        let eps = Image::from_vec(scene.height(), scene.width(), 3,
            stitchlab_core::nn::gaussian_vec(scene.height() * scene.width() * 3, &mut rng)).unwrap();
        let cfg = PriorConfig { enabled: true, lambda, ..PriorConfig::default() };
        let fused = fuse_inference(&eps, &scene, &mask, &cfg, &HfConfig::default()).unwrap();
        for y in 0..scene.height() {
            for x in 0..scene.width() {
                if !mask.get(y, x) {
                    for c in 0..3 {
                        prop_assert_eq!(fused.get(y, x, c), eps.get(y, x, c));
                    }
                }
            }
        }
        let z = Image::zeros(scene.height(), scene.width(), 1);
        let zero_blend = blend(&eps, &z, &mask, 0.0);
        prop_assert_eq!(zero_blend, eps);
    }

    #[test]
    fn forward_process_inverts(x0 in image(6, 5, 3), t in 0usize..1000, seed in any::<u64>()) {
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let mut rng = stitchlab_core::Seed(seed).rng();
        let eps = Image::from_vec(6, 5, 3, stitchlab_core::nn::gaussian_vec(90, &mut rng)).unwrap();
        let xt = s.q_sample(&x0, t, &eps).unwrap();
        let back = s.reconstruct_x0_raw(&xt, &eps, t).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ocr_gate_follows_text_and_timestep(t in 0usize..1000, text in any::<bool>()) {
        let cfg = LossConfig::default();
        prop_assert_eq!(cfg.ocr_active(t, text), text && t < cfg.ocr_gate_t);
        let off = LossConfig { ocr_enabled: false, ..LossConfig::default() };
        prop_assert!(!off.ocr_active(t, text));
    }

    #[test]
    fn f1_is_the_harmonic_mean(pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..80)) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let r = class_metrics(&truth, &pred, 5);
        let hits = truth.iter().zip(&pred).filter(|(a, b)| a == b).count();
        prop_assert!((r.accuracy - hits as f64 / truth.len() as f64).abs() < 1e-12);
        for m in &r.per_class {
            let want = if m.precision + m.recall > 0.0 {
                2.0 * m.precision * m.recall / (m.precision + m.recall)
            } else {
                0.0
            };
            prop_assert!((m.f1 - want).abs() <= 1e-9);
        }
    }
}
