mod common;

use bnn_core::hmc::targets::{CorrelatedGaussian, DoubleWell, StandardGaussian};
use bnn_core::hmc::{
    gelman_rubin, kinetic_energy, leapfrog, leapfrog_from, run_chain, run_hmc, HmcConfig, PhasePoint, StepInfo, TransitionKernel,
};
use bnn_core::posterior::Potential;
use bnn_core::Result;
use common::{covariance, lag1_autocorrelation, mean};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn config(step_size: f64, leapfrog_steps: usize, total_steps: usize, thin: usize, seed: u64) -> HmcConfig {
    HmcConfig {
        step_size,
        leapfrog_steps,
        total_steps,
        burn_in: 0,
        thin,
        seed,
        ..HmcConfig::default()
    }
}

#[test]
fn standard_normal_moments() {
    let chain = run_hmc(StandardGaussian { dim: 2 }, &config(0.1, 10, 50_000, 1, 3), vec![0.0, 0.0], None).unwrap();
    let x = chain.parameter_trace(0);
    let y = chain.parameter_trace(1);
    assert!(mean(&x).abs() < 0.05 && mean(&y).abs() < 0.05, "means {} {}", mean(&x), mean(&y));
    assert!((covariance(&x, &x) - 1.0).abs() < 0.1);
    assert!((covariance(&y, &y) - 1.0).abs() < 0.1);
    assert!(covariance(&x, &y).abs() < 0.1);
    assert!(chain.acceptance_rate() > 0.95, "acceptance {}", chain.acceptance_rate());
    assert_eq!(chain.divergent_count, 0);
}

/// Mean |ΔH| of one trajectory of fixed length on the unit oscillator, over random starts.
fn mean_energy_error(step_size: f64, steps: usize, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = StandardGaussian { dim: 1 };
    let mut total = 0.0;
    for _ in 0..draws {
        let theta = vec![rng.sample::<f64, _>(StandardNormal)];
        let m = vec![rng.sample::<f64, _>(StandardNormal)];
        let (u, grad) = target.potential_and_grad(&theta).unwrap();
        let start = PhasePoint {
            theta,
            potential: u,
            grad,
        };
        let (end, m_end) = leapfrog_from(&start, &m, step_size, steps, |t| target.potential_and_grad(t)).unwrap();
        total += (end.potential + kinetic_energy(&m_end) - u - kinetic_energy(&m)).abs();
    }
    total / draws as f64
}

#[test]
fn energy_error_is_second_order() {
    let coarse = mean_energy_error(0.1, 10, 2000, 5);
    let fine = mean_energy_error(0.05, 20, 2000, 5);
    let ratio = coarse / fine;
    assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn leapfrog_reversible_on_correlated_gaussian(
        x in -3.0f64..3.0, y in -3.0f64..3.0, mx in -2.0f64..2.0, my in -2.0f64..2.0,
        eps in 0.01f64..0.2, steps in 1usize..40,
    ) {
        let target = CorrelatedGaussian { rho: 0.7 };
        let grad = |t: &[f64]| -> Result<Vec<f64>> { Ok(target.potential_and_grad(t)?.1) };
        let (t1, m1) = leapfrog(&[x, y], &[mx, my], eps, steps, grad).unwrap();
        let back: Vec<f64> = m1.iter().map(|m| -m).collect();
        let (t2, m2) = leapfrog(&t1, &back, eps, steps, grad).unwrap();
        let err = (t2[0] - x).abs().max((t2[1] - y).abs()).max((m2[0] + mx).abs()).max((m2[1] + my).abs());
        prop_assert!(err < 1e-10, "round trip error {}", err);
    }
}

#[test]
fn double_well_distribution() {
    let target = DoubleWell { height: 1.0 };
    let chain = run_hmc(target, &config(0.2, 10, 60_000, 1, 11), vec![1.0], None).unwrap();
    let xs = chain.parameter_trace(0);
    let (lo, hi, bins) = (-2.5, 2.5, 25);
    let width = (hi - lo) / bins as f64;
    let mut hist = vec![0.0; bins];
    for x in &xs {
        let b = ((x - lo) / width).floor();
        if b >= 0.0 && (b as usize) < bins {
            hist[b as usize] += 1.0 / xs.len() as f64;
        }
    }
    // Exact bin masses by midpoint quadrature.
    let fine = 200;
    let mut exact = vec![0.0; bins];
    for (b, mass) in exact.iter_mut().enumerate() {
        for k in 0..fine {
            let x = lo + width * (b as f64 + (k as f64 + 0.5) / fine as f64);
            *mass += (-(x * x - 1.0f64).powi(2)).exp() * width / fine as f64;
        }
    }
    let z: f64 = exact.iter().sum();
    let tv = 0.5 * hist.iter().zip(&exact).map(|(h, e)| (h - e / z).abs()).sum::<f64>();
    assert!(tv < 0.05, "total variation {tv}");
    let left = xs.iter().filter(|&&x| x < 0.0).count() as f64 / xs.len() as f64;
    assert!((left - 0.5).abs() < 0.1, "left-well mass {left}");
}

#[test]
fn thinning_reduces_autocorrelation() {
    let target = CorrelatedGaussian { rho: 0.95 };
    let mut last = f64::INFINITY;
    for thin in [1, 5, 25] {
        let chain = run_hmc(target, &config(0.05, 5, 100_000, thin, 13), vec![0.0, 0.0], None).unwrap();
        let rho1 = lag1_autocorrelation(&chain.parameter_trace(0));
        assert!(rho1 < last, "thin {thin}: lag-1 autocorrelation {rho1} not below {last}");
        last = rho1;
    }
}

#[test]
fn rhat_iid_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let draw = |rng: &mut ChaCha8Rng, shift: f64| -> Vec<f64> { (0..10_000).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect() };
    let same: Vec<Vec<f64>> = (0..4).map(|_| draw(&mut rng, 0.0)).collect();
    let refs: Vec<&[f64]> = same.iter().map(Vec::as_slice).collect();
    let r = gelman_rubin(&refs).unwrap();
    assert!((0.99..=1.02).contains(&r), "same-distribution R-hat {r}");

    let shifted: Vec<Vec<f64>> = (0..4).map(|k| draw(&mut rng, 3.0 * k as f64)).collect();
    let refs: Vec<&[f64]> = shifted.iter().map(Vec::as_slice).collect();
    let r = gelman_rubin(&refs).unwrap();
    assert!(r > 2.0, "shifted R-hat {r}");
}

#[test]
fn rhat_of_hmc_chains() {
    let chains: Vec<Vec<f64>> = (0..4)
        .map(|seed| run_hmc(StandardGaussian { dim: 1 }, &config(0.2, 10, 10_000, 1, 100 + seed), vec![0.0], None).unwrap().parameter_trace(0))
        .collect();
    let refs: Vec<&[f64]> = chains.iter().map(Vec::as_slice).collect();
    let r = gelman_rubin(&refs).unwrap();
    assert!((0.99..=1.02).contains(&r), "R-hat {r}");
}

/// Kernel that moves θ by +1 every step.
struct Counter;

impl TransitionKernel for Counter {
    fn step(&mut self, state: &mut PhasePoint, _rng: &mut ChaCha8Rng) -> Result<StepInfo> {
        state.theta[0] += 1.0;
        Ok(StepInfo {
            accepted: true,
            delta_h: 0.0,
            divergent: false,
        })
    }

    fn evaluate(&self, theta: &[f64]) -> Result<PhasePoint> {
        Ok(PhasePoint {
            theta: theta.to_vec(),
            potential: 0.0,
            grad: vec![0.0; theta.len()],
        })
    }
}

#[test]
fn thinning_keeps_last_state_of_each_block() {
    let cfg = HmcConfig {
        total_steps: 200_000,
        thin: 1000,
        monitor_every: 1000,
        ..HmcConfig::default()
    };
    let chain = run_chain(&mut Counter, &cfg, vec![0.0], None).unwrap();
    assert_eq!(chain.samples.len(), 200);
    for (k, s) in chain.samples.iter().enumerate() {
        assert_eq!(s[0], 1000.0 * (k + 1) as f64);
    }

    let burned = HmcConfig { burn_in: 500, ..cfg };
    let chain = run_chain(&mut Counter, &burned, vec![0.0], None).unwrap();
    assert_eq!(chain.samples.len(), 199);
    assert_eq!(chain.samples[0][0], 1500.0);
}
