//! Mean-field Gaussian variational inference (Bayes by backprop).
//!
//! q(θ) = Π N(θ_j; μ_j, σ_j²) with σ = softplus(ρ). The loss minimised per mini-batch is
//!
//! ```text
//! kl_weight: (N/|B|)·E_q[NLL_B] + T·KL(q‖p)
//! joint:     (N/|B|)·E_q[NLL_B] - E_q[log p] - T·H(q)
//! ```
//!
//! The first down-weights the complexity cost; the second is T times the KL from q to
//! the tempered joint (p(D|θ)p(θ))^(1/T), up to constants.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{augment_rotate, ImageDataset};
use crate::error::{BnnError, Result};
use crate::map_trainer::evaluate_params;
use crate::optim::Adam;
use crate::posterior::{Prior, Temperature};
use crate::tensor_grad::{loss_grad, DropoutMode, NetworkSpec, ParamVector, Reduction, Tensor};

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Tempering {
    #[default]
    KlWeight,
    Joint,
}

impl fmt::Display for Tempering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tempering::KlWeight => "kl_weight",
            Tempering::Joint => "joint",
        })
    }
}

impl FromStr for Tempering {
    type Err = BnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl_weight" => Ok(Tempering::KlWeight),
            "joint" => Ok(Tempering::Joint),
            other => Err(BnnError::Config(format!("unknown tempering {other:?}, expected kl_weight or joint"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViConfig {
    pub prior: Prior,
    pub temperature: Temperature,
    pub tempering: Tempering,
    /// Reparameterised draws per optimisation step.
    pub mc_samples: usize,
    /// Posterior draws used at evaluation time.
    pub eval_samples: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Initial σ as a fraction of each layer's fan-in init bound 1/sqrt(fan_in).
    pub init_sigma_scale: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for ViConfig {
    fn default() -> Self {
        Self {
            prior: Prior::Gaussian { std: 0.01 },
            temperature: Temperature::new(0.01).expect("positive"),
            tempering: Tempering::KlWeight,
            mc_samples: 1,
            eval_samples: 200,
            epochs: 1500,
            learning_rate: 5e-5,
            batch_size: 50,
            init_sigma_scale: 0.01,
            augment: false,
            seed: 0,
        }
    }
}

impl ViConfig {
    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        if self.mc_samples == 0 || self.eval_samples == 0 {
            return Err(BnnError::InvalidArgument("mc_samples must be at least 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(BnnError::InvalidArgument("epochs and batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.init_sigma_scale > 0.0) {
            return Err(BnnError::InvalidArgument("learning rate and initial sigma must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPosterior {
    pub mu: ParamVector,
    pub rho: Vec<f64>,
}

impl VariationalPosterior {
    pub fn new(mu: ParamVector, rho: Vec<f64>) -> Result<Self> {
        if rho.len() != mu.len() {
            return Err(BnnError::InvalidArgument(format!("mu has {} entries, rho {}", mu.len(), rho.len())));
        }
        Ok(Self { mu, rho })
    }

    /// μ from the fan-in scheme, σ = `sigma_scale`/sqrt(fan_in) per layer.
    pub fn init(spec: &NetworkSpec, sigma_scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let mu = ParamVector::init_fan_in(spec, rng)?;
        let mut rho = vec![0.0; mu.len()];
        for slot in &mu.layout.slots {
            let r = softplus_inv(sigma_scale / (slot.fan_in as f64).sqrt());
            rho[slot.range()].iter_mut().for_each(|v| *v = r);
        }
        Ok(Self { mu, rho })
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    /// θ = μ + σ ⊙ ε for a given standard-normal ε.
    pub fn params_with_noise(&self, eps: &[f64]) -> Vec<f64> {
        self.mu
            .values
            .iter()
            .zip(&self.rho)
            .zip(eps)
            .map(|((m, &r), e)| m + softplus(r) * e)
            .collect()
    }

    pub fn sample_params(&self, rng: &mut impl Rng) -> Vec<f64> {
        let eps = standard_normal(self.len(), rng);
        self.params_with_noise(&eps)
    }

    pub fn sample_n(&self, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample_params(rng)).collect()
    }

    /// Σ ln σ + d/2·(1 + ln 2π).
    pub fn entropy(&self) -> f64 {
        let d = self.len() as f64;
        self.rho.iter().map(|&r| softplus(r).ln()).sum::<f64>() + 0.5 * d * (1.0 + (2.0 * PI).ln())
    }
}

fn standard_normal(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Closed-form KL(q‖N(0, σ_p²)) summed over parameters.
pub fn kl_gaussian(vp: &VariationalPosterior, prior_std: f64) -> f64 {
    let s2 = prior_std * prior_std;
    vp.mu
        .values
        .iter()
        .zip(&vp.rho)
        .map(|(&m, &r)| {
            let s = softplus(r);
            (prior_std / s).ln() + (s * s + m * m) / (2.0 * s2) - 0.5
        })
        .sum()
}

/// Monte Carlo KL(q‖p) = E_q[log q - log p] from `n` draws; returns (estimate, standard error).
pub fn kl_monte_carlo(vp: &VariationalPosterior, prior: &Prior, n: usize, rng: &mut impl Rng) -> (f64, f64) {
    let sigma = vp.sigma();
    let log_sigma: f64 = sigma.iter().map(|s| s.ln()).sum();
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    let d = vp.len() as f64;
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            let mut log_q = -log_sigma - d * half_log_2pi;
            let mut log_p = 0.0;
            for (j, s) in sigma.iter().enumerate() {
                let e: f64 = rng.sample(StandardNormal);
                log_q -= 0.5 * e * e;
                log_p += prior.log_density(vp.mu.values[j] + s * e);
            }
            log_q - log_p
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// Loss components for one mini-batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    /// (N/|B|) times the mean over draws of the batch NLL.
    pub nll: f64,
    /// KL(q‖p), closed form or Monte Carlo.
    pub kl: f64,
    /// The tempered objective being minimised.
    pub loss: f64,
}

/// A mini-batch of the training set.
pub struct MiniBatch<'a> {
    pub inputs: &'a Tensor,
    pub labels: &'a [usize],
    /// Training-set size N.
    pub n_total: usize,
}

fn weights(config: &ViConfig) -> (f64, f64) {
    let t = config.temperature.value();
    match config.tempering {
        // (cross-entropy weight, entropy weight)
        Tempering::KlWeight => (t, t),
        Tempering::Joint => (1.0, t),
    }
}

/// Loss and its gradient with respect to (μ, ρ) for fixed noise draws `noise[s]`.
pub fn elbo_loss_and_grad(
    vp: &VariationalPosterior,
    spec: &NetworkSpec,
    batch: &MiniBatch,
    config: &ViConfig,
    noise: &[Vec<f64>],
) -> Result<(ElboTerms, Vec<f64>, Vec<f64>)> {
    let d = vp.len();
    let s_count = noise.len() as f64;
    let sigma = vp.sigma();
    let scale = batch.n_total as f64 / batch.labels.len() as f64;
    let mut g_mu = vec![0.0; d];
    let mut g_sigma = vec![0.0; d];
    let mut nll = 0.0;
    for eps in noise {
        let theta = vp.params_with_noise(eps);
        let (l, g) = loss_grad(spec, &theta, batch.inputs, batch.labels, Reduction::Sum, DropoutMode::Inactive)?;
        nll += scale * l / s_count;
        for j in 0..d {
            let gj = scale * g[j] / s_count;
            g_mu[j] += gj;
            g_sigma[j] += gj * eps[j];
        }
    }

    // cross = -E_q[log p], entropy = H(q); KL = cross - entropy
    let (w_cross, w_ent) = weights(config);
    let entropy = vp.entropy();
    let cross = match config.prior {
        Prior::Gaussian { std } => {
            let s2 = std * std;
            let mut c = d as f64 * (std.ln() + 0.5 * (2.0 * PI).ln());
            for j in 0..d {
                let m = vp.mu.values[j];
                c += (m * m + sigma[j] * sigma[j]) / (2.0 * s2);
                g_mu[j] += w_cross * m / s2;
                g_sigma[j] += w_cross * sigma[j] / s2;
            }
            c
        }
        Prior::Laplace { .. } => {
            let mut c = 0.0;
            for eps in noise {
                for j in 0..d {
                    let x = vp.mu.values[j] + sigma[j] * eps[j];
                    c -= config.prior.log_density(x) / s_count;
                    let dlp = config.prior.grad_log_density(x) / s_count;
                    g_mu[j] -= w_cross * dlp;
                    g_sigma[j] -= w_cross * dlp * eps[j];
                }
            }
            c
        }
    };
    for j in 0..d {
        g_sigma[j] -= w_ent / sigma[j];
    }
    let g_rho: Vec<f64> = g_sigma.iter().zip(&vp.rho).map(|(g, &r)| g * sigmoid(r)).collect();
    let kl = cross - entropy;
    let loss = nll + w_cross * cross - w_ent * entropy;
    if !loss.is_finite() {
        return Err(BnnError::NonFinite { context: "ELBO".into() });
    }
    Ok((ElboTerms { nll, kl, loss }, g_mu, g_rho))
}

/// Loss on a mini-batch with `config.mc_samples` fresh draws.
pub fn elbo_loss(vp: &VariationalPosterior, spec: &NetworkSpec, batch: &MiniBatch, config: &ViConfig, rng: &mut impl Rng) -> Result<ElboTerms> {
    let noise: Vec<Vec<f64>> = (0..config.mc_samples).map(|_| standard_normal(vp.len(), rng)).collect();
    Ok(elbo_loss_and_grad(vp, spec, batch, config, &noise)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViEpoch {
    pub epoch: usize,
    pub nll: f64,
    pub kl: f64,
    pub loss: f64,
    /// Validation NLL and accuracy of the mean network μ.
    pub val_nll: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViOutcome {
    pub posterior: VariationalPosterior,
    pub history: Vec<ViEpoch>,
    pub aborted: Option<String>,
}

pub fn train_vi(spec: &NetworkSpec, train: &ImageDataset, val: &ImageDataset, config: &ViConfig) -> Result<ViOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(BnnError::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut vp = VariationalPosterior::init(spec, config.init_sigma_scale, &mut rng)?;
    let d = vp.len();
    let mut adam = Adam::new(2 * d, config.learning_rate);
    let mut packed = vec![0.0; 2 * d];
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut aborted = None;

    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut nll, mut kl, mut loss) = (0.0, 0.0, 0.0);
        let batches = order.chunks(config.batch_size).count() as f64;
        for chunk in order.chunks(config.batch_size) {
            let (inputs, labels) = if config.augment {
                let mut pixels = Vec::with_capacity(chunk.len() * train.pixels());
                for &i in chunk {
                    pixels.extend(augment_rotate(train.image(i), train.height, &mut rng));
                }
                let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
                (Tensor::new(vec![chunk.len(), train.height, train.width], pixels)?, labels)
            } else {
                train.batch(chunk)?
            };
            let noise: Vec<Vec<f64>> = (0..config.mc_samples).map(|_| standard_normal(d, &mut rng)).collect();
            let batch = MiniBatch {
                inputs: &inputs,
                labels: &labels,
                n_total: train.len(),
            };
            let (terms, g_mu, g_rho) = match elbo_loss_and_grad(&vp, spec, &batch, config, &noise) {
                Ok(v) => v,
                Err(BnnError::NonFinite { context }) => {
                    aborted = Some(format!("epoch {epoch}: non-finite {context}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            packed[..d].copy_from_slice(&vp.mu.values);
            packed[d..].copy_from_slice(&vp.rho);
            let grad: Vec<f64> = g_mu.into_iter().chain(g_rho).collect();
            adam.step(&mut packed, &grad);
            vp.mu.values.copy_from_slice(&packed[..d]);
            vp.rho.copy_from_slice(&packed[d..]);
            nll += terms.nll / batches;
            kl += terms.kl / batches;
            loss += terms.loss / batches;
        }
        let (val_nll, val_accuracy) = evaluate_params(spec, &vp.mu.values, val)?;
        history.push(ViEpoch {
            epoch,
            nll,
            kl,
            loss,
            val_nll,
            val_accuracy,
        });
    }
    if let Some(reason) = &aborted {
        log::warn!("variational training aborted: {reason}");
    }
    Ok(ViOutcome {
        posterior: vp,
        history,
        aborted,
    })
}

/// KL(N(μ, σ²)‖N(0, 1)) for one coordinate; used by tests and the browser demo.
pub fn kl_normal_standard(mu: f64, sigma: f64) -> f64 {
    -sigma.ln() + 0.5 * (sigma * sigma + mu * mu) - 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map_trainer::tests::separable_toy;
    use crate::tensor_grad::build_mlp;
    use std::f64::consts::LN_2;

    fn vp_from(spec: &NetworkSpec, mu: f64, sigma: f64) -> VariationalPosterior {
        let d = spec.param_count().unwrap();
        VariationalPosterior::new(ParamVector::from_values(spec, vec![mu; d]).unwrap(), vec![softplus_inv(sigma); d]).unwrap()
    }

    fn one_param() -> NetworkSpec {
        // Linear(1, 1) would not be a 2-class classifier; a 2x2 layer has 6 parameters
        build_mlp(2, &[], 2).unwrap()
    }

    #[test]
    fn softplus_round_trip() {
        for y in [1e-6, 0.01, 0.5, 3.0, 50.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() / y < 1e-9);
        }
    }

    #[test]
    fn closed_form_kl_values() {
        let spec = one_param();
        let d = spec.param_count().unwrap() as f64;
        assert!(kl_gaussian(&vp_from(&spec, 0.0, 1.0), 1.0).abs() < 1e-12);
        assert!((kl_gaussian(&vp_from(&spec, 1.0, 1.0), 1.0) - 0.5 * d).abs() < 1e-9);
        let expected = LN_2 + 0.125 - 0.5;
        assert!((expected - 0.318147).abs() < 1e-6);
        assert!((kl_gaussian(&vp_from(&spec, 0.0, 0.5), 1.0) - expected * d).abs() < 1e-9);
        assert!((kl_normal_standard(0.0, 0.5) - expected).abs() < 1e-12);
    }

    #[test]
    fn tiny_sigma_sample_is_mean() {
        let spec = one_param();
        let vp = vp_from(&spec, 0.3, 1e-300);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(vp.sample_params(&mut rng), vp.mu.values);
    }

    #[test]
    fn sample_moments() {
        let spec = one_param();
        let vp = vp_from(&spec, 0.4, 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| vp.sample_params(&mut rng)[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((mean - 0.4).abs() < 4.0 * 0.7 / (n as f64).sqrt());
        assert!((var - 0.49).abs() / 0.49 < 0.05);
    }

    #[test]
    fn degenerate_q_reduces_to_rescaled_nll() {
        let spec = one_param();
        let data = separable_toy(40, 3);
        let (inputs, labels) = data.batch(&(0..10).collect::<Vec<_>>()).unwrap();
        let vp = vp_from(&spec, 0.2, 1e-300);
        let config = ViConfig {
            prior: Prior::Gaussian { std: 1.0 },
            temperature: Temperature::new(1e-300).unwrap(),
            ..ViConfig::default()
        };
        let batch = MiniBatch {
            inputs: &inputs,
            labels: &labels,
            n_total: 40,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let terms = elbo_loss(&vp, &spec, &batch, &config, &mut rng).unwrap();
        let (nll, _) = loss_grad(&spec, &vp.mu.values, &inputs, &labels, Reduction::Sum, DropoutMode::Inactive).unwrap();
        assert!((terms.loss - 4.0 * nll).abs() < 1e-9, "{terms:?} vs {}", 4.0 * nll);
    }

    #[test]
    fn unit_temperature_is_nll_plus_kl() {
        let spec = one_param();
        let data = separable_toy(20, 4);
        let inputs = data.to_tensor().unwrap();
        let vp = vp_from(&spec, -0.1, 0.3);
        let config = ViConfig {
            prior: Prior::Gaussian { std: 0.5 },
            temperature: Temperature::ONE,
            ..ViConfig::default()
        };
        let batch = MiniBatch {
            inputs: &inputs,
            labels: &data.labels,
            n_total: 20,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let terms = elbo_loss(&vp, &spec, &batch, &config, &mut rng).unwrap();
        assert!((terms.kl - kl_gaussian(&vp, 0.5)).abs() < 1e-9);
        assert!((terms.loss - (terms.nll + terms.kl)).abs() < 1e-9);
    }

    #[test]
    fn monte_carlo_kl_matches_closed_form() {
        let spec = one_param();
        let mut vp = vp_from(&spec, 0.0, 1.0);
        vp.mu.values = vec![0.3, -0.2, 0.1, 0.0, 0.5, -0.4];
        vp.rho = [0.2, 0.5, 0.9, 0.3, 0.7, 0.4].iter().map(|&s| softplus_inv(s)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (est, se) = kl_monte_carlo(&vp, &Prior::Gaussian { std: 0.8 }, 100_000, &mut rng);
        let exact = kl_gaussian(&vp, 0.8);
        assert!((est - exact).abs() < 3.0 * se, "{est} ± {se} vs {exact}");
    }

    fn fd_check(prior: Prior, tempering: Tempering) {
        let spec = build_mlp(2, &[3], 2).unwrap();
        let data = separable_toy(12, 7);
        let inputs = data.to_tensor().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let vp = VariationalPosterior::init(&spec, 0.3, &mut rng).unwrap();
        let noise: Vec<Vec<f64>> = (0..2).map(|_| standard_normal(vp.len(), &mut rng)).collect();
        let config = ViConfig {
            prior,
            tempering,
            temperature: Temperature::new(0.3).unwrap(),
            ..ViConfig::default()
        };
        let batch = MiniBatch {
            inputs: &inputs,
            labels: &data.labels,
            n_total: 30,
        };
        let (_, g_mu, g_rho) = elbo_loss_and_grad(&vp, &spec, &batch, &config, &noise).unwrap();
        let loss = |v: &VariationalPosterior| elbo_loss_and_grad(v, &spec, &batch, &config, &noise).unwrap().0.loss;
        let h = 1e-6;
        for j in 0..vp.len() {
            for (which, analytic) in [(0, g_mu[j]), (1, g_rho[j])] {
                let (mut up, mut down) = (vp.clone(), vp.clone());
                if which == 0 {
                    up.mu.values[j] += h;
                    down.mu.values[j] -= h;
                } else {
                    up.rho[j] += h;
                    down.rho[j] -= h;
                }
                let fd = (loss(&up) - loss(&down)) / (2.0 * h);
                let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3);
                assert!(err < 1e-4, "{prior:?} {tempering} coord {j}/{which}: {analytic} vs {fd}");
            }
        }
    }

    #[test]
    fn reparameterised_gradient_matches_finite_differences() {
        fd_check(Prior::Gaussian { std: 0.7 }, Tempering::KlWeight);
        fd_check(Prior::Gaussian { std: 0.7 }, Tempering::Joint);
        fd_check(Prior::Laplace { scale: 0.5 }, Tempering::KlWeight);
    }

    fn toy_vi_config(seed: u64) -> ViConfig {
        ViConfig {
            prior: Prior::Gaussian { std: 1.0 },
            temperature: Temperature::new(0.1).unwrap(),
            epochs: 150,
            learning_rate: 1e-2,
            batch_size: 20,
            init_sigma_scale: 0.1,
            mc_samples: 4,
            seed,
            ..ViConfig::default()
        }
    }

    #[test]
    fn separable_toy_is_learned_and_deterministic() {
        let spec = build_mlp(2, &[8], 2).unwrap();
        let (tr, va) = (separable_toy(200, 11), separable_toy(100, 12));
        let out = train_vi(&spec, &tr, &va, &toy_vi_config(3)).unwrap();
        let last = out.history.last().unwrap();
        assert!(last.val_accuracy >= 0.95, "{last:?}");
        assert!(out.aborted.is_none());
        assert_eq!(train_vi(&spec, &tr, &va, &toy_vi_config(3)).unwrap().posterior, out.posterior);

        // epoch-averaged trend: no 20-epoch block mean exceeds its predecessor by > 5%
        let blocks: Vec<f64> = out.history.chunks(20).map(|c| c.iter().map(|e| e.loss).sum::<f64>() / c.len() as f64).collect();
        for w in blocks.windows(2) {
            assert!(w[1] <= 1.05 * w[0], "{blocks:?}");
        }
    }
}
