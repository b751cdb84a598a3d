//! Priors, likelihood and the potential energy U(θ) = -log p(D|θ) - log p(θ) shared by
//! every inference method, with optional tempering of the joint density.

use std::f64::consts::{LN_2, PI};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::data::{augment_rotate, ImageDataset};
use crate::error::{BnnError, Result};
use crate::tensor_grad::{loss_grad, DropoutMode, NetworkSpec, Reduction, Tensor};

/// Zero-centred i.i.d. prior over every parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prior {
    Gaussian { std: f64 },
    Laplace { scale: f64 },
}

impl Prior {
    pub fn gaussian(std: f64) -> Result<Self> {
        let p = Prior::Gaussian { std };
        p.validate()?;
        Ok(p)
    }

    pub fn laplace(scale: f64) -> Result<Self> {
        let p = Prior::Laplace { scale };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let v = match *self {
            Prior::Gaussian { std } => std,
            Prior::Laplace { scale } => scale,
        };
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(BnnError::InvalidArgument(format!("prior width must be positive, got {v}")))
        }
    }

    /// Log density of a single coordinate.
    #[inline]
    pub fn log_density(&self, x: f64) -> f64 {
        match *self {
            Prior::Gaussian { std } => -0.5 * (x / std).powi(2) - std.ln() - 0.5 * (2.0 * PI).ln(),
            Prior::Laplace { scale } => -x.abs() / scale - scale.ln() - LN_2,
        }
    }

    /// d/dx log density; zero at the Laplace kink.
    #[inline]
    pub fn grad_log_density(&self, x: f64) -> f64 {
        match *self {
            Prior::Gaussian { std } => -x / (std * std),
            Prior::Laplace { scale } => {
                if x == 0.0 {
                    0.0
                } else {
                    -x.signum() / scale
                }
            }
        }
    }
}

/// Posterior temperature T; the joint density is raised to 1/T.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(t: f64) -> Result<Self> {
        if t > 0.0 && t.is_finite() {
            Ok(Self(t))
        } else {
            Err(BnnError::InvalidArgument(format!("temperature must be positive, got {t}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::ONE
    }
}

/// Sum of i.i.d. prior log densities, normalising constants included.
pub fn log_prior(params: &[f64], prior: &Prior) -> f64 {
    params.iter().map(|&x| prior.log_density(x)).sum()
}

pub fn log_prior_grad(params: &[f64], prior: &Prior) -> Vec<f64> {
    params.iter().map(|&x| prior.grad_log_density(x)).collect()
}

/// A differentiable potential energy over a flat parameter vector.
pub trait Potential {
    fn dim(&self) -> usize;

    fn potential(&self, theta: &[f64]) -> Result<f64>;

    fn potential_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Hook run once per sampler iteration, before a trajectory is simulated. Returns
    /// whether the potential changed (e.g. freshly augmented data).
    fn refresh(&mut self, _rng: &mut ChaCha8Rng) -> Result<bool> {
        Ok(false)
    }
}

/// Network posterior over a fixed training set.
#[derive(Debug, Clone)]
pub struct PosteriorTarget {
    pub spec: NetworkSpec,
    pub prior: Prior,
    pub temperature: Temperature,
    data: Arc<ImageDataset>,
    inputs: Tensor,
    dim: usize,
    augment: bool,
}

impl PosteriorTarget {
    pub fn new(spec: NetworkSpec, prior: Prior, data: Arc<ImageDataset>, temperature: Temperature) -> Result<Self> {
        prior.validate()?;
        if data.is_empty() {
            return Err(BnnError::InvalidArgument("posterior needs a non-empty training set".into()));
        }
        let dim = spec.param_count()?;
        let inputs = data.to_tensor()?;
        Ok(Self {
            spec,
            prior,
            temperature,
            data,
            inputs,
            dim,
            augment: false,
        })
    }

    /// Draw a fresh random rotation of every training image at each `refresh`.
    pub fn with_augmentation(mut self, augment: bool) -> Self {
        self.augment = augment;
        self
    }

    pub fn data(&self) -> &ImageDataset {
        &self.data
    }

    /// Σ log p(y_n | x_n, θ) over the training set.
    pub fn log_likelihood(&self, params: &[f64]) -> Result<f64> {
        Ok(-self.nll_and_grad(params)?.0)
    }

    fn nll_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        loss_grad(
            &self.spec,
            params,
            &self.inputs,
            &self.data.labels,
            Reduction::Sum,
            DropoutMode::Inactive,
        )
    }

    /// U(θ) at T = 1.
    pub fn potential_energy(&self, params: &[f64]) -> Result<f64> {
        Ok(self.potential_energy_and_grad(params)?.0)
    }

    pub fn potential_energy_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (nll, mut grad) = self.nll_and_grad(params)?;
        let u = nll - log_prior(params, &self.prior);
        for (g, &x) in grad.iter_mut().zip(params) {
            *g -= self.prior.grad_log_density(x);
        }
        if !u.is_finite() {
            return Err(BnnError::NonFinite {
                context: "potential energy".into(),
            });
        }
        Ok((u, grad))
    }

    /// U(θ)/T: likelihood and prior tempered together.
    pub fn tempered_potential(&self, params: &[f64]) -> Result<f64> {
        Ok(self.potential_energy(params)? / self.temperature.value())
    }
}

impl Potential for PosteriorTarget {
    fn dim(&self) -> usize {
        self.dim
    }

    fn potential(&self, theta: &[f64]) -> Result<f64> {
        self.tempered_potential(theta)
    }

    fn potential_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let t = self.temperature.value();
        let (u, mut g) = self.potential_energy_and_grad(theta)?;
        if t != 1.0 {
            g.iter_mut().for_each(|v| *v /= t);
        }
        Ok((u / t, g))
    }

    fn refresh(&mut self, rng: &mut ChaCha8Rng) -> Result<bool> {
        if !self.augment {
            return Ok(false);
        }
        let size = self.data.height;
        let mut pixels = Vec::with_capacity(self.data.images.len());
        for i in 0..self.data.len() {
            pixels.extend(augment_rotate(self.data.image(i), size, rng));
        }
        self.inputs = Tensor::new(vec![self.data.len(), size, self.data.width], pixels)?;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthesize_frlike;
    use crate::tensor_grad::{build_desk_cnn, ParamVector};
    use rand::{Rng, SeedableRng};

    fn target(n: usize, prior: Prior, t: f64) -> PosteriorTarget {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ds = synthesize_frlike(n, 8, &mut rng);
        PosteriorTarget::new(build_desk_cnn(8, 0.5).unwrap(), prior, Arc::new(ds), Temperature::new(t).unwrap()).unwrap()
    }

    #[test]
    fn log_prior_values() {
        let d = 7;
        let zeros = vec![0.0; d];
        let g = log_prior(&zeros, &Prior::Gaussian { std: 1.0 });
        assert!((g + d as f64 / 2.0 * (2.0 * PI).ln()).abs() < 1e-12);
        let l = log_prior(&zeros, &Prior::Laplace { scale: 1.0 });
        assert!((l + d as f64 * LN_2).abs() < 1e-12);
        // direct density evaluation
        let direct = (1.0 / (0.1 * (2.0 * PI).sqrt()) * (-0.5f64).exp()).ln();
        assert!((log_prior(&[0.1], &Prior::Gaussian { std: 0.1 }) - direct).abs() < 1e-12);
        assert!((direct - (-(0.1 * (2.0 * PI).sqrt()).ln() - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn log_prior_peaks_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for prior in [Prior::Gaussian { std: 0.3 }, Prior::Laplace { scale: 0.3 }] {
            let best = log_prior(&[0.0; 5], &prior);
            for _ in 0..100 {
                let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                assert!(log_prior(&x, &prior) < best);
            }
        }
        assert!(Prior::gaussian(0.0).is_err());
        assert!(Prior::laplace(-1.0).is_err());
        assert!(Temperature::new(0.0).is_err());
    }

    #[test]
    fn zero_params_potential() {
        let t = target(5, Prior::Gaussian { std: 1.0 }, 1.0);
        let d = t.dim() as f64;
        let u = t.potential_energy(&vec![0.0; t.dim()]).unwrap();
        let expected = 10.0 * LN_2 + d / 2.0 * (2.0 * PI).ln();
        assert!((u - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn potential_is_term_by_term() {
        let t = target(5, Prior::Laplace { scale: 0.5 }, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ParamVector::init_fan_in(&t.spec, &mut rng).unwrap();
        let u = t.potential_energy(&p.values).unwrap();
        let parts = -log_prior(&p.values, &t.prior) - t.log_likelihood(&p.values).unwrap();
        assert!((u - parts).abs() < 1e-10 * u.abs());
    }

    #[test]
    fn tempering_scales_the_joint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = target(4, Prior::Gaussian { std: 0.1 }, 1.0);
        let p = ParamVector::init_fan_in(&base.spec, &mut rng).unwrap();
        let u = base.potential_energy(&p.values).unwrap();
        assert_eq!(base.tempered_potential(&p.values).unwrap(), u);
        for (t, factor) in [(0.5, 2.0), (0.01, 100.0)] {
            let tt = target(4, Prior::Gaussian { std: 0.1 }, t);
            let v = tt.tempered_potential(&p.values).unwrap();
            assert!((v - factor * u).abs() < 1e-12 * v.abs());
            let (v2, g2) = tt.potential_and_grad(&p.values).unwrap();
            let (_, g1) = base.potential_energy_and_grad(&p.values).unwrap();
            assert!((v2 - v).abs() < 1e-12 * v.abs());
            assert!((g2[3] - factor * g1[3]).abs() < 1e-9 * g2[3].abs().max(1.0));
        }
    }

    #[test]
    fn one_more_datum_adds_its_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ds = synthesize_frlike(4, 8, &mut rng);
        let spec = build_desk_cnn(8, 0.5).unwrap();
        let prior = Prior::Gaussian { std: 1.0 };
        let small = ds.subset(&(0..7).collect::<Vec<_>>());
        let t_small = PosteriorTarget::new(spec.clone(), prior, Arc::new(small), Temperature::ONE).unwrap();
        let t_full = PosteriorTarget::new(spec.clone(), prior, Arc::new(ds.clone()), Temperature::ONE).unwrap();
        let p = ParamVector::init_fan_in(&spec, &mut rng).unwrap();
        let (x, y) = ds.batch(&[7]).unwrap();
        let nll = crate::tensor_grad::item_nll(&spec, &p.values, &x, &y).unwrap()[0];
        let diff = t_full.potential_energy(&p.values).unwrap() - t_small.potential_energy(&p.values).unwrap();
        assert!((diff - nll).abs() < 1e-9);
    }

    #[test]
    fn augmentation_refresh_changes_inputs() {
        let mut t = target(3, Prior::Gaussian { std: 1.0 }, 1.0).with_augmentation(true);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = ParamVector::init_fan_in(&t.spec, &mut rng).unwrap();
        let before = t.potential(&p.values).unwrap();
        assert!(t.refresh(&mut rng).unwrap());
        assert_ne!(before, t.potential(&p.values).unwrap());
    }
}
