use braid::imageio::write_ppm;
use braid::metrics::{evaluate_dir, evaluate_images, identity_features, item_file_name, pearson, pixcorr, ssim, two_way_identification};
use braid::representations::{noise_image, Image};
use braid::Error;
use proptest::prelude::*;

fn ramp(seed: u64) -> Image {
    noise_image(seed, 0)
}

fn pixels(img: &Image) -> Vec<f64> {
    img.data.iter().map(|&v| v as f64).collect()
}

#[test]
fn pixcorr_identity_negation_and_shift() {
    let x = ramp(1);
    assert!((pixcorr(&x, &x).unwrap() - 1.0).abs() < 1e-6);
    let neg = Image::new(3, 32, 32, x.data.iter().map(|v| 1.0 - v).collect()).unwrap();
    assert!((pixcorr(&x, &neg).unwrap() + 1.0).abs() < 1e-6);
    let up = Image::new(3, 32, 32, x.data.iter().map(|v| v + 0.1).collect()).unwrap();
    assert!((pixcorr(&x, &up).unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn pixcorr_rejects_constant_and_mismatched_images() {
    let c = Image::filled(3, 32, 32, 0.3);
    assert!(matches!(pixcorr(&c, &ramp(2)), Err(Error::UndefinedCorrelation(_))));
    assert!(matches!(pixcorr(&ramp(2), &Image::filled(3, 16, 16, 0.3)), Err(Error::Dimension(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn pixcorr_invariant_to_positive_affine_maps(seed in 0u64..1000, a in 0.05f32..4.0, b in -2.0f32..2.0) {
        let x = ramp(seed);
        let y = ramp(seed + 7);
        let t = Image::new(3, 32, 32, y.data.iter().map(|v| a * v + b).collect()).unwrap();
        let r0 = pixcorr(&x, &y).unwrap();
        let r1 = pixcorr(&x, &t).unwrap();
        prop_assert!((r0 - r1).abs() < 1e-5);
        prop_assert!((-1.0..=1.0).contains(&r1));
    }

    #[test]
    fn ssim_symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
        let (a, b) = (ramp(s1), ramp(s2));
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }
}

#[test]
fn ssim_identity_and_constant_images() {
    let x = ramp(3);
    assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-6);
    let v = ssim(&Image::filled(3, 32, 32, 0.2), &Image::filled(3, 32, 32, 0.4)).unwrap();
    let c1 = 0.01f64.powi(2);
    assert!((v - (2.0 * 0.2 * 0.4 + c1) / (0.2f64.powi(2) + 0.4f64.powi(2) + c1)).abs() < 1e-6);
    assert!((v - 0.8001).abs() < 1e-4);
}

#[test]
fn ssim_rejects_images_smaller_than_window() {
    let a = Image::filled(3, 6, 6, 0.1);
    assert!(matches!(ssim(&a, &a), Err(Error::Parameter(_))));
}

#[test]
fn two_way_identity_swap_and_errors() {
    let xs: Vec<Vec<f64>> = (0..10).map(|i| pixels(&ramp(i))).collect();
    assert_eq!(two_way_identification(&xs, &xs, identity_features).unwrap(), 1.0);
    let swapped = vec![xs[1].clone(), xs[0].clone()];
    assert_eq!(two_way_identification(&swapped, &xs[..2], identity_features).unwrap(), 0.0);
    assert!(two_way_identification(&xs[..3], &xs[..2], identity_features).is_err());
    assert!(two_way_identification(&xs[..1], &xs[..1], identity_features).is_err());
}

#[test]
fn two_way_ties_score_half() {
    let gt = vec![vec![0.0, 1.0, 2.0], vec![0.0, 2.0, 4.0]];
    let dec = vec![vec![3.0, 2.0, 1.0], vec![1.0, 0.0, 5.0]];
    // gt rows are perfectly correlated, so every comparison ties
    assert_eq!(two_way_identification(&dec, &gt, identity_features).unwrap(), 0.5);
}

#[test]
fn two_way_on_unrelated_noise_is_at_chance() {
    let gt: Vec<Vec<f64>> = (0..200).map(|i| pixels(&noise_image(11, i))).collect();
    let dec: Vec<Vec<f64>> = (0..200).map(|i| pixels(&noise_image(12, i))).collect();
    let acc = two_way_identification(&dec, &gt, identity_features).unwrap();
    assert!((acc - 0.5).abs() <= 0.05, "{acc}");
}

#[test]
fn feature_function_is_applied_to_both_sides() {
    let gt: Vec<Vec<f64>> = (0..6).map(|i| pixels(&ramp(100 + i))).collect();
    let dec: Vec<Vec<f64>> = gt.iter().map(|v| v.iter().rev().cloned().collect()).collect();
    assert!(two_way_identification(&dec, &gt, identity_features).unwrap() < 0.9);
    // a permutation-invariant feature cannot tell a reversed image from its source
    let sorted = |x: &[f64]| {
        let mut v = x.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    assert_eq!(two_way_identification(&dec, &gt, sorted).unwrap(), 1.0);
}

#[test]
fn pearson_matches_statrs() {
    use statrs::statistics::Statistics;
    let a = pixels(&ramp(5));
    let b = pixels(&ramp(6));
    let cov = a.clone().covariance(b.clone());
    let expect = cov / (a.clone().std_dev() * b.clone().std_dev());
    assert!((pearson(&a, &b).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn evaluate_of_ground_truth_copies_is_perfect_and_consistent() {
    let gt: Vec<Image> = (0..8).map(ramp).collect();
    let rep = evaluate_images(&gt, &gt, serde_json::json!({"seed": 1})).unwrap();
    assert_eq!(rep.n, 8);
    for name in ["pixcorr", "ssim", "two_way"] {
        let m = &rep.metrics[name];
        assert_eq!(m.items.len(), 8);
        assert!((m.mean - 1.0).abs() < 1e-6, "{name} {}", m.mean);
    }
    let dec: Vec<Image> = (0..8).map(|i| ramp(50 + i)).collect();
    let rep = evaluate_images(&dec, &gt, serde_json::Value::Null).unwrap();
    for m in rep.metrics.values() {
        let mean = m.items.iter().sum::<f64>() / m.items.len() as f64;
        assert!((mean - m.mean).abs() < 1e-9);
    }
    assert_eq!(rep, evaluate_images(&dec, &gt, serde_json::Value::Null).unwrap());
}

#[test]
fn evaluate_dir_reads_items_and_names_missing_ones() {
    let dir = tempfile::tempdir().unwrap();
    let gt: Vec<Image> = (0..3).map(ramp).collect();
    for (i, im) in gt.iter().enumerate().take(2) {
        write_ppm(&dir.path().join(item_file_name(i)), im).unwrap();
    }
    match evaluate_dir(dir.path(), &gt, serde_json::Value::Null) {
        Err(Error::Data(msg)) => assert!(msg.contains(&item_file_name(2)), "{msg}"),
        other => panic!("expected a data error, got {other:?}"),
    }
    write_ppm(&dir.path().join(item_file_name(2)), &gt[2]).unwrap();
    let rep = evaluate_dir(dir.path(), &gt, serde_json::Value::Null).unwrap();
    // PPM quantization keeps correlations near one
    assert!(rep.metrics["pixcorr"].mean > 0.9999);
}
