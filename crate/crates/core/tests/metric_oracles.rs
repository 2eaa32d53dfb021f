use invguard::metrics::{calibrate_threshold, candidate_thresholds, error_rates, matching_rate_from_distances, mse, psnr, ssim, LabeledDistance};
use invguard::ImageTensor;
use proptest::prelude::*;
use serde::Deserialize;

#[derive(Deserialize)]
struct Pair {
    shape: (usize, usize, usize),
    a: Vec<f64>,
    b: Vec<f64>,
    mse: f64,
    ssim: f64,
    psnr: f64,
}

fn fixtures() -> Vec<Pair> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/metric_pairs.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn reference_fixture_agreement() {
    let pairs = fixtures();
    assert_eq!(pairs.len(), 20);
    for (i, p) in pairs.iter().enumerate() {
        let a = ImageTensor::new(p.shape, p.a.clone()).unwrap();
        let b = ImageTensor::new(p.shape, p.b.clone()).unwrap();
        assert!((mse(&a, &b).unwrap() - p.mse).abs() < 1e-6, "pair {i} mse");
        assert!((ssim(&a, &b).unwrap() - p.ssim).abs() < 1e-6, "pair {i} ssim");
        assert!((psnr(&a, &b).unwrap() - p.psnr).abs() < 1e-6, "pair {i} psnr");
    }
}

#[test]
fn mse_matches_direct_recomputation() {
    for p in fixtures() {
        let a = ImageTensor::new(p.shape, p.a.clone()).unwrap();
        let b = ImageTensor::new(p.shape, p.b.clone()).unwrap();
        let mut acc = 0.0;
        for k in 0..p.a.len() {
            acc += (p.a[k] - p.b[k]).powi(2);
        }
        assert!((mse(&a, &b).unwrap() - acc / p.a.len() as f64).abs() < 1e-15);
    }
}

fn image_pair() -> impl Strategy<Value = (ImageTensor, ImageTensor)> {
    (7usize..12, 7usize..12, 1usize..4).prop_flat_map(|(h, w, c)| {
        let n = h * w * c;
        (
            prop::collection::vec(0.0f64..=1.0, n),
            prop::collection::vec(0.0f64..=1.0, n),
        )
            .prop_map(move |(a, b)| {
                (
                    ImageTensor::new((h, w, c), a).unwrap(),
                    ImageTensor::new((h, w, c), b).unwrap(),
                )
            })
    })
}

fn labeled_pairs() -> impl Strategy<Value = Vec<LabeledDistance>> {
    prop::collection::vec((0.0f64..2.0, any::<bool>()), 2..60)
        .prop_filter("both classes", |v| v.iter().any(|p| p.1) && v.iter().any(|p| !p.1))
        .prop_map(|v| {
            v.into_iter()
                .map(|(distance, same_identity)| LabeledDistance { distance, same_identity })
                .collect()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metric_ranges_and_psnr_identity((a, b) in image_pair()) {
        let m = mse(&a, &b).unwrap();
        prop_assert!(m >= 0.0);
        let s = ssim(&a, &b).unwrap();
        prop_assert!(s <= 1.0 + 1e-12 && s >= -1.0 - 1e-12);
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
        if m > 0.0 {
            prop_assert!((psnr(&a, &b).unwrap() - (10.0 * (1.0 / m).log10()).min(100.0)).abs() < 1e-12);
        }
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn calibration_is_optimal_over_midpoints(pairs in labeled_pairs()) {
        let Ok(c) = calibrate_threshold(&pairs) else {
            // Only possible when every distance coincides.
            prop_assert!(candidate_thresholds(&pairs).is_empty());
            return Ok(());
        };
        prop_assert!(c.threshold > 0.0);
        for t in candidate_thresholds(&pairs) {
            let (far, frr) = error_rates(&pairs, t);
            prop_assert!(c.equal_error_rate <= far.max(frr));
        }
        prop_assert_eq!(calibrate_threshold(&pairs).unwrap(), c.clone());
        let (far, frr) = error_rates(&c.pairs, c.threshold);
        prop_assert_eq!(far.max(frr), c.equal_error_rate);
    }

    #[test]
    fn matching_rate_ignores_pair_order(mut d in prop::collection::vec(0.0f64..2.0, 1..40), seed in any::<u64>()) {
        let c = calibrate_threshold(&[
            LabeledDistance { distance: 0.5, same_identity: true },
            LabeledDistance { distance: 1.5, same_identity: false },
        ]).unwrap();
        let before = matching_rate_from_distances(&d, &c).unwrap();
        let k = (seed as usize) % d.len();
        d.rotate_left(k);
        d.reverse();
        prop_assert_eq!(before, matching_rate_from_distances(&d, &c).unwrap());
    }
}
