#![allow(dead_code)]

use bnn_core::tensor_grad::{loss_grad, DropoutMode, Layer, NetworkSpec, Reduction, Tensor};
use rand::seq::index::sample;
use rand::Rng;

/// Largest relative error between `loss_grad` and central differences over `n_coords`
/// random coordinates. Relative to max(|analytic|, |numeric|, 1e-4).
pub fn max_grad_rel_error(
    spec: &NetworkSpec,
    params: &[f64],
    batch: &Tensor,
    labels: &[usize],
    dropout: DropoutMode,
    n_coords: usize,
    rng: &mut impl Rng,
) -> f64 {
    let (_, grad) = loss_grad(spec, params, batch, labels, Reduction::Sum, dropout).unwrap();
    let h = 1e-6;
    let coords = sample(rng, params.len(), n_coords.min(params.len()));
    let mut worst: f64 = 0.0;
    let mut p = params.to_vec();
    for i in coords {
        let orig = p[i];
        p[i] = orig + h;
        let up = loss_grad(spec, &p, batch, labels, Reduction::Sum, dropout).unwrap().0;
        p[i] = orig - h;
        let down = loss_grad(spec, &p, batch, labels, Reduction::Sum, dropout).unwrap().0;
        p[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / grad[i].abs().max(fd.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    worst
}

/// conv → relu → pool → conv → relu → pool → linear → relu → linear on `size`×`size`.
pub fn random_cnn4(size: usize, rng: &mut impl Rng) -> NetworkSpec {
    let c1 = rng.random_range(1..=4);
    let c2 = rng.random_range(1..=4);
    let after = size / 2 / 2;
    let hidden = rng.random_range(3..=8);
    NetworkSpec::new(
        (size, size),
        vec![
            Layer::Conv2d {
                in_channels: 1,
                out_channels: c1,
                kernel: 3,
                padding: 1,
            },
            Layer::Relu,
            Layer::MaxPool2d { window: 2 },
            Layer::Conv2d {
                in_channels: c1,
                out_channels: c2,
                kernel: 3,
                padding: 1,
            },
            Layer::Relu,
            Layer::MaxPool2d { window: 2 },
            Layer::Flatten,
            Layer::Linear {
                in_features: c2 * after * after,
                out_features: hidden,
            },
            Layer::Relu,
            Layer::Linear {
                in_features: hidden,
                out_features: 2,
            },
        ],
    )
    .unwrap()
}

pub fn random_batch(n: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::new(vec![n, h, w], (0..n * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64
}

pub fn lag1_autocorrelation(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let var: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    let cov: f64 = xs.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
    cov / var
}
