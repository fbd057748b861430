use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfmeta::neuralnet::{grad, init_params, loss, loss_and_grad, Batch, InitScheme, LossKind, NetSpec, ParamVector};

const H: f64 = 1e-5;

fn central_difference(spec: &NetSpec, params: &ParamVector, batch: &Batch, kind: LossKind) -> Vec<f64> {
    (0..params.len())
        .map(|i| {
            let mut plus = params.clone();
            plus.as_mut_slice()[i] += H;
            let mut minus = params.clone();
            minus.as_mut_slice()[i] -= H;
            (loss(spec, &plus, batch, kind).unwrap() - loss(spec, &minus, batch, kind).unwrap()) / (2.0 * H)
        })
        .collect()
}

fn max_relative_error(numeric: &[f64], analytic: &[f64]) -> f64 {
    numeric
        .iter()
        .zip(analytic)
        .map(|(n, a)| (n - a).abs() / (n.abs() + a.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

fn random_case(seed: u64) -> (NetSpec, ParamVector, Batch, LossKind) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = rng.random_range(1..=6);
    let depth = rng.random_range(1..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=8)).collect();
    let n = rng.random_range(1..=6);
    let inputs = Array2::from_shape_fn((n, input), |_| rng.random_range(-2.0..2.0));
    let classification = seed % 3 == 2;
    let (spec, batch, kind) = if classification {
        let classes = rng.random_range(2..=4);
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        (
            NetSpec::classification(input, &hidden, classes).unwrap(),
            Batch::classification(inputs, labels).unwrap(),
            LossKind::CrossEntropy,
        )
    } else {
        let targets = Array2::from_shape_fn((n, 2), |_| rng.random_range(-3.0..3.0));
        let kind = if seed % 3 == 0 { LossKind::Mse } else { LossKind::Rmse };
        (NetSpec::regression(input, &hidden).unwrap(), Batch::regression(inputs, targets).unwrap(), kind)
    };
    let mut params = init_params(&spec, InitScheme::GlorotUniform, &mut rng);
    for b in params.as_mut_slice().iter_mut() {
        *b += rng.random_range(-0.1..0.1);
    }
    (spec, params, batch, kind)
}

#[test]
fn analytic_gradients_match_central_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let (spec, params, batch, kind) = random_case(seed);
        let analytic = grad(&spec, &params, &batch, kind).unwrap();
        let numeric = central_difference(&spec, &params, &batch, kind);
        let err = max_relative_error(&numeric, analytic.as_slice());
        assert!(err < 1e-5, "seed {seed}: relative error {err:e}");
        worst = worst.max(err);
    }
    assert!(worst < 1e-5);
}

#[test]
fn rmse_gradient_is_scaled_mse_gradient() {
    for seed in 0..20 {
        let (spec, params, batch, _) = random_case(seed * 3);
        let (mse, g_mse) = loss_and_grad(&spec, &params, &batch, LossKind::Mse).unwrap();
        let (rmse, g_rmse) = loss_and_grad(&spec, &params, &batch, LossKind::Rmse).unwrap();
        assert!(rmse > 0.0);
        assert_eq!(rmse, mse.sqrt());
        let scale = 1.0 / (2.0 * rmse);
        for (a, b) in g_rmse.as_slice().iter().zip(g_mse.as_slice()) {
            assert!((a - b * scale).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {}", b * scale);
        }
    }
}

#[test]
fn three_four_five_losses() {
    let spec = NetSpec::new(vec![1, 2]).unwrap();
    let params = ParamVector::zeros(spec.param_count());
    let batch = Batch::regression(Array2::zeros((1, 1)), Array2::from_shape_vec((1, 2), vec![3.0, 4.0]).unwrap()).unwrap();
    assert_eq!(loss(&spec, &params, &batch, LossKind::Mse).unwrap(), 25.0);
    assert_eq!(loss(&spec, &params, &batch, LossKind::Rmse).unwrap(), 5.0);
}

#[test]
fn glorot_weight_spread_matches_uniform_moment() {
    let spec = NetSpec::new(vec![50, 200]).unwrap();
    let p = init_params(&spec, InitScheme::GlorotUniform, &mut ChaCha8Rng::seed_from_u64(4));
    let w = &p.as_slice()[..50 * 200];
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
    let limit = (6.0f64 / 250.0).sqrt();
    let expected = limit / 3.0f64.sqrt();
    assert!((sd - expected).abs() < 0.2 * expected);
}

fn arb_spec() -> impl Strategy<Value = NetSpec> {
    (1usize..6, prop::collection::vec(1usize..9, 1..3), 1usize..4).prop_map(|(i, h, o)| {
        let mut sizes = vec![i];
        sizes.extend(h);
        sizes.push(o);
        NetSpec::new(sizes).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flatten_round_trips_bit_exactly(spec in arb_spec(), seed in any::<u64>()) {
        let p = init_params(&spec, InitScheme::GlorotUniform, &mut ChaCha8Rng::seed_from_u64(seed));
        let layers = p.unflatten(&spec).unwrap();
        let back = ParamVector::flatten(&spec, &layers).unwrap();
        prop_assert_eq!(
            p.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn losses_are_pure_and_rmse_is_sqrt_mse(seed in any::<u64>(), n in 1usize..8) {
        let spec = NetSpec::regression(3, &[4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&spec, InitScheme::GlorotUniform, &mut rng);
        let batch = Batch::regression(
            Array2::from_shape_fn((n, 3), |_| rng.random_range(-5.0..5.0)),
            Array2::from_shape_fn((n, 2), |_| rng.random_range(-5.0..5.0)),
        ).unwrap();
        let mse = loss(&spec, &params, &batch, LossKind::Mse).unwrap();
        prop_assert!(mse >= 0.0);
        prop_assert_eq!(loss(&spec, &params, &batch, LossKind::Mse).unwrap(), mse);
        prop_assert_eq!(loss(&spec, &params, &batch, LossKind::Rmse).unwrap(), mse.sqrt());
        prop_assert_eq!(grad(&spec, &params, &batch, LossKind::Mse).unwrap(), grad(&spec, &params, &batch, LossKind::Mse).unwrap());
    }
}
