use erdetect::analysis::{kl_divergence, wasserstein_1d};
use erdetect::detect::{auc, roc_curve, youden_split};
use erdetect::features::{ErConfig, erase_and_restore, pca_project};
use erdetect::image::{Image, Mask, erase, erased_count, sample_mask};
use erdetect::inpaint::{median_restore_masked, telea_inpaint};
use erdetect::model::softmax;
use erdetect::rng;
use proptest::prelude::*;

fn image_strategy() -> impl Strategy<Value = Image> {
    (2usize..12, 2usize..12, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(h, w, c)| {
        proptest::collection::vec(0.0f64..=1.0, h * w * c).prop_map(move |px| Image::new(h, w, c, px).unwrap())
    })
}

fn image_and_mask() -> impl Strategy<Value = (Image, Mask)> {
    (image_strategy(), 0.0f64..=0.45, any::<u64>()).prop_map(|(img, f, seed)| {
        let mask = sample_mask(img.height(), img.width(), f, &mut rng::from_seed(seed)).unwrap();
        (img, mask)
    })
}

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..10.0, len).prop_map(|v| {
        let s: f64 = v.iter().sum::<f64>() + 1e-9;
        v.iter().map(|x| (x + 1e-9 / v.len() as f64) / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_has_exact_distinct_count((img, mask) in image_and_mask()) {
        let f = mask.len() as f64 / (img.height() * img.width()) as f64;
        prop_assert!(f <= 0.5 + 1e-12);
        let mut seen = mask.coords().to_vec();
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), mask.len());
        prop_assert!(mask.coords().iter().all(|&(r, c)| r < img.height() && c < img.width()));
    }

    #[test]
    fn mask_size_matches_rounded_fraction(h in 1usize..40, w in 1usize..40, f in 0.0f64..=0.5, seed in any::<u64>()) {
        let mask = sample_mask(h, w, f, &mut rng::from_seed(seed)).unwrap();
        prop_assert_eq!(mask.len(), erased_count(h, w, f));
    }

    #[test]
    fn telea_touches_only_masked_pixels_and_stays_in_range((img, mask) in image_and_mask(), radius in 1usize..5) {
        let erased = erase(&img, &mask, 0.0).unwrap();
        let out = telea_inpaint(&erased, &mask, radius).unwrap();
        let grid = mask.to_grid();
        for r in 0..img.height() {
            for c in 0..img.width() {
                for ch in 0..img.channels() {
                    let v = out.get(r, c, ch);
                    prop_assert!((0.0..=1.0).contains(&v));
                    if !grid[r * img.width() + c] {
                        prop_assert_eq!(v, erased.get(r, c, ch));
                    }
                }
            }
        }
    }

    #[test]
    fn telea_restores_constant_images(h in 2usize..10, w in 2usize..10, v in 0.0f64..=1.0, seed in any::<u64>()) {
        let img = Image::filled(h, w, 3, v);
        let mask = sample_mask(h, w, 0.45, &mut rng::from_seed(seed)).unwrap();
        let out = telea_inpaint(&erase(&img, &mask, 0.0).unwrap(), &mask, 3).unwrap();
        for &p in out.pixels() {
            prop_assert!((p - v).abs() <= 1e-9);
        }
    }

    #[test]
    fn masked_median_touches_only_masked_pixels((img, mask) in image_and_mask()) {
        let out = median_restore_masked(&img, &mask, 3).unwrap();
        let grid = mask.to_grid();
        for (i, (&a, &b)) in img.pixels().iter().zip(out.pixels()).enumerate() {
            if !grid[i / img.channels()] {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn erase_and_restore_is_seed_deterministic(img in image_strategy(), seed in any::<u64>()) {
        let cfg = ErConfig::default();
        let a = erase_and_restore(&img, &cfg, &mut rng::from_seed(seed)).unwrap();
        let b = erase_and_restore(&img, &cfg, &mut rng::from_seed(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn quantization_is_idempotent_and_close(img in image_strategy()) {
        let q = img.quantized();
        prop_assert!(q.is_quantized());
        prop_assert_eq!(&q.quantized(), &q);
        for (a, b) in img.pixels().iter().zip(q.pixels()) {
            prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn softmax_is_a_distribution(logits in proptest::collection::vec(-500.0f64..500.0, 1..30)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let shifted: Vec<f64> = logits.iter().map(|x| x + 17.0).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_self(p in distribution(10), q in distribution(10)) {
        prop_assert!(kl_divergence(&p, &q, 1e-12).unwrap() >= -1e-12);
        prop_assert!(kl_divergence(&p, &p, 1e-12).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn wasserstein_is_a_metric(p in distribution(8), q in distribution(8), r in distribution(8)) {
        let pq = wasserstein_1d(&p, &q).unwrap();
        prop_assert!(pq >= 0.0);
        prop_assert!((pq - wasserstein_1d(&q, &p).unwrap()).abs() <= 1e-12);
        prop_assert!(pq <= wasserstein_1d(&p, &r).unwrap() + wasserstein_1d(&r, &q).unwrap() + 1e-12);
        prop_assert!(pq <= 7.0 + 1e-9);
    }

    #[test]
    fn roc_is_monotone_and_auc_bounded(
        neg in proptest::collection::vec(-5.0f64..5.0, 1..40),
        pos in proptest::collection::vec(-5.0f64..5.0, 1..40),
    ) {
        let roc = roc_curve(&neg, &pos);
        prop_assert_eq!(roc[0], (0.0, 0.0));
        prop_assert_eq!(*roc.last().unwrap(), (1.0, 1.0));
        for w in roc.windows(2) {
            prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
        let a = auc(&roc);
        prop_assert!((0.0..=1.0).contains(&a));
        let flipped = auc(&roc_curve(&pos, &neg));
        prop_assert!((a + flipped - 1.0).abs() <= 1e-9);
        let (_, fpr, tpr) = youden_split(&neg, &pos).unwrap();
        prop_assert!(tpr - fpr >= -1e-12);
    }

    #[test]
    fn pca_basis_is_orthonormal(rows in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 6), 5..20)) {
        let r = pca_project(&rows, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = r.basis[i].iter().zip(&r.basis[j]).map(|(a, b)| a * b).sum();
                let expected = f64::from(u8::from(i == j));
                prop_assert!((dot - expected).abs() <= 1e-9);
            }
        }
        for w in r.variances.windows(2) {
            prop_assert!(w[0] >= w[1] - 1e-12);
        }
    }
}
