mod common;

use bnn_core::tensor_grad::{forward, DropoutMode, Layer, NetworkSpec, ParamVector, Tensor};
use common::{max_grad_rel_error, random_batch, random_cnn4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn single_layer_net(layer: Layer, size: usize) -> NetworkSpec {
    let out = match layer {
        Layer::Conv2d {
            out_channels,
            kernel,
            padding,
            ..
        } => out_channels * (size + 2 * padding + 1 - kernel).pow(2),
        Layer::MaxPool2d { window } => (size / window).pow(2),
        _ => size * size,
    };
    let mut layers = vec![layer];
    if layer != Layer::Flatten {
        layers.push(Layer::Flatten);
    }
    layers.push(Layer::Linear {
        in_features: out,
        out_features: 3,
    });
    NetworkSpec::new((size, size), layers).unwrap()
}

fn check(spec: &NetworkSpec, size: usize, dropout: DropoutMode, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ParamVector::init_fan_in(spec, &mut rng).unwrap();
    let batch = random_batch(3, size, size, &mut rng);
    let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..spec.num_classes())).collect();
    max_grad_rel_error(spec, &params.values, &batch, &labels, dropout, 100, &mut rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_gradients(cin in 1usize..2, cout in 1usize..4, kernel in 1usize..4, padding in 0usize..2, size in 5usize..9, seed in any::<u64>()) {
        let spec = single_layer_net(Layer::Conv2d { in_channels: cin, out_channels: cout, kernel, padding }, size);
        prop_assert!(check(&spec, size, DropoutMode::Inactive, seed) <= 1e-5);
    }

    #[test]
    fn pool_relu_flatten_linear_gradients(window in 2usize..4, size in 6usize..10, seed in any::<u64>()) {
        for layer in [Layer::MaxPool2d { window }, Layer::Relu, Layer::Flatten, Layer::Linear { in_features: size * size, out_features: 5 }] {
            let spec = match layer {
                Layer::Linear { .. } => NetworkSpec::new((size, size), vec![Layer::Flatten, layer, Layer::Relu, Layer::Linear { in_features: 5, out_features: 2 }]).unwrap(),
                _ => single_layer_net(layer, size),
            };
            prop_assert!(check(&spec, size, DropoutMode::Inactive, seed) <= 1e-5, "{layer:?}");
        }
    }

    #[test]
    fn dropout_gradients_with_fixed_masks(rate in 0.1f64..0.8, mask_seed in any::<u64>(), seed in any::<u64>()) {
        let spec = NetworkSpec::new((4, 4), vec![
            Layer::Flatten,
            Layer::Linear { in_features: 16, out_features: 12 },
            Layer::Relu,
            Layer::Dropout { rate },
            Layer::Linear { in_features: 12, out_features: 2 },
        ]).unwrap();
        let err = check(&spec, 4, DropoutMode::Active { seed: mask_seed }, seed);
        prop_assert!(err <= 1e-5);
    }

    #[test]
    fn four_layer_cnn_gradients(size in prop::sample::select(vec![8usize, 12]), seed in any::<u64>()) {
        let spec = random_cnn4(size, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(check(&spec, size, DropoutMode::Inactive, seed ^ 1) <= 1e-5);
    }
}

#[test]
fn dropout_preserves_expected_logits() {
    let rate = 0.5;
    let spec = NetworkSpec::new(
        (2, 2),
        vec![
            Layer::Flatten,
            Layer::Linear {
                in_features: 4,
                out_features: 6,
            },
            Layer::Dropout { rate },
            Layer::Linear {
                in_features: 6,
                out_features: 2,
            },
        ],
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = ParamVector::init_fan_in(&spec, &mut rng).unwrap();
    let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = 20_000;
    let batch = Tensor::new(vec![n, 2, 2], x.repeat(n)).unwrap();
    let exact = forward(&spec, &params.values, &batch, DropoutMode::Inactive).unwrap();
    let noisy = forward(&spec, &params.values, &batch, DropoutMode::Active { seed: 5 }).unwrap();
    for c in 0..2 {
        let draws: Vec<f64> = (0..n).map(|i| noisy.row(i)[c]).collect();
        let m = common::mean(&draws);
        let se = (common::covariance(&draws, &draws) / n as f64).sqrt();
        assert!((m - exact.row(0)[c]).abs() < 4.0 * se, "class {c}: {m} vs {}", exact.row(0)[c]);
        assert!(se > 0.0);
    }
}
