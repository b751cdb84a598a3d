//! WebAssembly bindings for the browser demo: synthetic galaxies, a 2-D HMC explorer
//! and an energy / entropy / calibration explorer.

use bnn_core::data::{peak_radius_ratio, synthesize_frlike_with, FrStyle};
use bnn_core::hmc::targets::CorrelatedGaussian;
use bnn_core::hmc::{leapfrog_from, run_hmc, HmcConfig};
use bnn_core::metrics::{avg_energy, uce};
use bnn_core::posterior::Potential;
use bnn_core::predictive::{mean_prediction, normalized_entropy, predictive_entropy, Method, PosteriorPredictive};
use bnn_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use wasm_bindgen::prelude::*;

fn js(e: bnn_core::BnnError) -> JsError {
    JsError::new(&e.to_string())
}

/// One FRI and one FRII source.
#[wasm_bindgen]
pub struct GalaxyPair {
    size: usize,
    images: Vec<f64>,
    ratios: Vec<f64>,
}

#[wasm_bindgen]
impl GalaxyPair {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    /// FRI pixels followed by FRII pixels, row-major.
    #[wasm_bindgen(getter)]
    pub fn images(&self) -> Vec<f64> {
        self.images.clone()
    }

    /// Peak-brightness radius over source extent for each image.
    #[wasm_bindgen(getter)]
    pub fn ratios(&self) -> Vec<f64> {
        self.ratios.clone()
    }
}

#[wasm_bindgen]
pub fn render_galaxies(size: usize, noise_std: f64, seed: u32) -> std::result::Result<GalaxyPair, JsError> {
    if !(8..=150).contains(&size) || !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(JsError::new("size must lie in 8..=150 and noise must be non-negative"));
    }
    let style = FrStyle {
        noise_std: (noise_std, noise_std),
        ..FrStyle::default()
    };
    let (ds, geometry) = synthesize_frlike_with(1, size, &style, &mut ChaCha8Rng::seed_from_u64(seed as u64));
    let ratios = (0..2).map(|i| peak_radius_ratio(ds.image(i), size, &geometry[i])).collect();
    Ok(GalaxyPair {
        size,
        images: ds.images,
        ratios,
    })
}

/// U = h(x² − 1)² + y²/2.
#[derive(Debug, Clone, Copy)]
struct TwoWells {
    height: f64,
}

impl Potential for TwoWells {
    fn dim(&self) -> usize {
        2
    }

    fn potential(&self, t: &[f64]) -> Result<f64> {
        Ok(self.height * (t[0] * t[0] - 1.0).powi(2) + 0.5 * t[1] * t[1])
    }

    fn potential_and_grad(&self, t: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.potential(t)?, vec![4.0 * self.height * t[0] * (t[0] * t[0] - 1.0), t[1]]))
    }
}

#[wasm_bindgen]
pub struct HmcRun {
    samples: Vec<f64>,
    trajectory: Vec<f64>,
    acceptance: f64,
    divergent: usize,
}

#[wasm_bindgen]
impl HmcRun {
    /// x, y pairs of every retained state.
    #[wasm_bindgen(getter)]
    pub fn samples(&self) -> Vec<f64> {
        self.samples.clone()
    }

    /// x, y pairs along one leapfrog trajectory from the final state.
    #[wasm_bindgen(getter)]
    pub fn trajectory(&self) -> Vec<f64> {
        self.trajectory.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn acceptance(&self) -> f64 {
        self.acceptance
    }

    #[wasm_bindgen(getter)]
    pub fn divergent(&self) -> usize {
        self.divergent
    }
}

fn explore<P: Potential + Copy>(target: P, config: &HmcConfig) -> Result<HmcRun> {
    let chain = run_hmc(target, config, vec![0.5, 0.5], None)?;
    let last = chain.samples.last().cloned().unwrap_or(vec![0.5, 0.5]);
    let (u, grad) = target.potential_and_grad(&last)?;
    let mut point = bnn_core::hmc::PhasePoint { theta: last, potential: u, grad };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut m: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
    let mut trajectory = point.theta.clone();
    for _ in 0..config.leapfrog_steps {
        match leapfrog_from(&point, &m, config.step_size, 1, |t| target.potential_and_grad(t)) {
            Ok((next, next_m)) => {
                trajectory.extend(&next.theta);
                point = next;
                m = next_m;
            }
            Err(_) => break,
        }
    }
    Ok(HmcRun {
        samples: chain.samples.concat(),
        trajectory,
        acceptance: chain.acceptance_rate(),
        divergent: chain.divergent_count,
    })
}

/// `target` is `gaussian` (`param` = correlation) or `wells` (`param` = barrier height).
#[wasm_bindgen]
pub fn run_hmc_2d(
    target: &str,
    param: f64,
    step_size: f64,
    leapfrog_steps: usize,
    steps: usize,
    seed: u32,
) -> std::result::Result<HmcRun, JsError> {
    let config = HmcConfig {
        step_size,
        leapfrog_steps,
        total_steps: steps,
        burn_in: 0,
        thin: 1,
        seed: seed as u64,
        monitor_every: steps.max(1),
        ..HmcConfig::default()
    };
    match target {
        "gaussian" if param.abs() < 1.0 => explore(CorrelatedGaussian { rho: param }, &config).map_err(js),
        "wells" if param >= 0.0 => explore(TwoWells { height: param }, &config).map_err(js),
        _ => Err(JsError::new("unknown target or parameter out of range")),
    }
}

/// Summary of N posterior samples of one item's logits (row-major N × K): average energy,
/// entropy in nats, normalised entropy, then the K mean class probabilities.
#[wasm_bindgen]
pub fn logit_summary(logits: Vec<f64>, n_classes: usize) -> std::result::Result<Vec<f64>, JsError> {
    if n_classes < 2 || logits.is_empty() || !logits.len().is_multiple_of(n_classes) {
        return Err(JsError::new("need at least one row of two or more logits"));
    }
    let n = logits.len() / n_classes;
    let pp = PosteriorPredictive::from_logits(Method::Hmc, n, 1, n_classes, logits, vec!["demo".into(); n]).map_err(js)?;
    let (mean, _) = mean_prediction(&pp);
    let mut out = vec![avg_energy(&pp)[0], predictive_entropy(&mean), normalized_entropy(&mean)];
    out.extend(mean);
    Ok(out)
}

/// Simulated classifier whose true error probability per item is `u`, reporting
/// uncertainty `u · (1 − overconfidence)`. Returns UCE in percent, then
/// (count, error rate, mean uncertainty) per bin.
#[wasm_bindgen]
pub fn calibration_demo(n: usize, overconfidence: f64, bins: usize, seed: u32) -> std::result::Result<Vec<f64>, JsError> {
    if n == 0 || bins == 0 || !(0.0..=1.0).contains(&overconfidence) {
        return Err(JsError::new("need items, bins and overconfidence in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let mut reported = Vec::with_capacity(n);
    let mut correct = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        correct.push(rng.random::<f64>() >= u);
        reported.push(u * (1.0 - overconfidence));
    }
    let report = uce(&reported, &correct, bins).map_err(js)?;
    let mut out = vec![report.uce_percent];
    for b in &report.bins {
        out.extend([b.count as f64, b.error_rate, b.mean_uncertainty]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn galaxies_satisfy_fr_rule() {
        let pair = render_galaxies(24, 0.05, 3).ok().unwrap();
        assert_eq!(pair.images.len(), 2 * 24 * 24);
        assert!(pair.ratios[0] < 0.5 && pair.ratios[1] > 0.5);
    }

    #[test]
    fn hmc_explorer_runs() {
        let run = run_hmc_2d("gaussian", 0.6, 0.2, 8, 500, 1).ok().unwrap();
        assert_eq!(run.samples.len(), 1000);
        assert_eq!(run.trajectory.len(), 2 * 9);
        assert!(run.acceptance > 0.8);
        assert!(run_hmc_2d("wells", 2.0, 0.1, 10, 200, 1).is_ok());
    }

    #[test]
    fn summaries() {
        let s = logit_summary(vec![0.0, 0.0, 0.0, 0.0], 2).ok().unwrap();
        assert!((s[0] + std::f64::consts::LN_2).abs() < 1e-12);
        assert!((s[2] - 1.0).abs() < 1e-12);
        let calibrated = calibration_demo(20_000, 0.0, 10, 2).ok().unwrap()[0];
        let over = calibration_demo(20_000, 0.8, 10, 2).ok().unwrap()[0];
        assert!(calibrated < 2.0 && over > 20.0, "{calibrated} {over}");
    }
}
