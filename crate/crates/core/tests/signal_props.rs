use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rfmeta::fingerprint::{histogram_intersection_distance, Histogram};
use rfmeta::propagation::{measure_rss, path_loss_db, Environment, LosProbability, ModelFamily, PathLossParams};
use rfmeta::Point2;

fn single_slope() -> impl Strategy<Value = PathLossParams> {
    (
        prop_oneof![Just(ModelFamily::LogDistance), Just(ModelFamily::SingleSlopeLosNlos)],
        0.5f64..5.0,
        0.5f64..5.0,
        -10.0f64..10.0,
        500.0f64..6000.0,
    )
        .prop_map(|(family, n1, n2, g, f)| PathLossParams {
            model_family: family,
            exponent_primary: n1,
            exponent_secondary: n2,
            antenna_gain_db: g,
            frequency_mhz: f,
            ..PathLossParams::default()
        })
}

fn normalized(raw: Vec<f64>) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn histogram() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..16).prop_flat_map(|n| {
        (
            prop::collection::vec(0.01f64..1.0, n).prop_map(normalized),
            prop::collection::vec(0.01f64..1.0, n).prop_map(normalized),
        )
    })
}

proptest! {
    #[test]
    fn single_slope_loss_increases_with_distance(params in single_slope(), d in 0.1f64..50.0, step in 1e-3f64..10.0, los in any::<bool>()) {
        let near = path_loss_db(&params, d, los, 0.0).unwrap();
        let far = path_loss_db(&params, d + step, los, 0.0).unwrap();
        prop_assert!(far > near);
    }

    #[test]
    fn intersection_distance_is_a_bounded_symmetric_metric((a, b) in histogram()) {
        let ha = Histogram::new(a, true).unwrap();
        let hb = Histogram::new(b, true).unwrap();
        let d = histogram_intersection_distance(&ha, &hb).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, histogram_intersection_distance(&hb, &ha).unwrap());
        prop_assert_eq!(histogram_intersection_distance(&ha, &ha).unwrap(), 0.0);
    }

    #[test]
    fn measurements_replay_from_the_same_stream(seed in any::<u64>(), x in 0.0f64..20.0, y in 0.0f64..20.0) {
        let env = Environment::with_random_aps(
            "p",
            20.0,
            20.0,
            24,
            PathLossParams::log_distance(20.0, 3.0, 4.0),
            LosProbability::InhMixedOffice,
            seed,
        ).unwrap();
        let p = Point2::new(x, y);
        let a = measure_rss(&env, p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = measure_rss(&env, p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a.rss_dbm.len(), 24);
        prop_assert_eq!(a, b);
    }
}
