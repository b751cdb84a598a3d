//! Hamiltonian Monte Carlo with an identity mass matrix: leapfrog trajectories, a
//! Metropolis-Hastings correction, thinning and Gelman-Rubin diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{BnnError, Result};
use crate::posterior::{Potential, Prior};

#[derive(Debug, Clone, PartialEq)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub total_steps: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Proposals with |ΔH| above this are rejected as divergent.
    pub divergence_threshold: f64,
    /// Record the monitor trace every this many steps.
    pub monitor_every: usize,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-4,
            leapfrog_steps: 50,
            total_steps: 200_000,
            burn_in: 0,
            thin: 1000,
            seed: 0,
            divergence_threshold: 1000.0,
            monitor_every: 1,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BnnError::InvalidArgument(m));
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step size must be positive, got {}", self.step_size));
        }
        if self.leapfrog_steps == 0 {
            return bad("at least one leapfrog step is required".into());
        }
        if self.thin == 0 {
            return bad("thin factor must be at least 1".into());
        }
        if self.burn_in >= self.total_steps {
            return bad(format!("burn-in {} must be below total steps {}", self.burn_in, self.total_steps));
        }
        if self.monitor_every == 0 {
            return bad("monitor interval must be at least 1".into());
        }
        Ok(())
    }

    pub fn retained_count(&self) -> usize {
        retained_count(self.total_steps, self.burn_in, self.thin)
    }
}

/// Samples kept after discarding `burn_in` steps and keeping every `thin`-th.
pub fn retained_count(total_steps: usize, burn_in: usize, thin: usize) -> usize {
    total_steps.saturating_sub(burn_in) / thin.max(1)
}

/// K(m) = ½ mᵀm.
pub fn kinetic_energy(momentum: &[f64]) -> f64 {
    0.5 * momentum.iter().map(|m| m * m).sum::<f64>()
}

/// Position, potential and gradient at one point of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePoint {
    pub theta: Vec<f64>,
    pub potential: f64,
    pub grad: Vec<f64>,
}

fn check_finite(values: &[f64], step: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(BnnError::Divergence { step })
    }
}

/// `steps` leapfrog updates (half momentum step, full position step, half momentum step)
/// starting from a point whose potential gradient is already known.
pub fn leapfrog_from<F>(start: &PhasePoint, momentum: &[f64], step_size: f64, steps: usize, mut eval: F) -> Result<(PhasePoint, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut theta = start.theta.clone();
    let mut m = momentum.to_vec();
    let mut grad = start.grad.clone();
    let mut potential = start.potential;
    for step in 0..steps {
        for (mi, g) in m.iter_mut().zip(&grad) {
            *mi -= 0.5 * step_size * g;
        }
        for (t, mi) in theta.iter_mut().zip(&m) {
            *t += step_size * mi;
        }
        check_finite(&theta, step)?;
        let (u, g) = eval(&theta).map_err(|e| match e {
            BnnError::NonFinite { .. } => BnnError::Divergence { step },
            other => other,
        })?;
        potential = u;
        grad = g;
        check_finite(&grad, step)?;
        for (mi, g) in m.iter_mut().zip(&grad) {
            *mi -= 0.5 * step_size * g;
        }
        check_finite(&m, step)?;
    }
    Ok((PhasePoint { theta, potential, grad }, m))
}

/// Leapfrog integration of Hamilton's equations for `H = U(θ) + ½mᵀm`.
pub fn leapfrog<F>(theta: &[f64], momentum: &[f64], step_size: f64, steps: usize, mut grad_u: F) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let start = PhasePoint {
        theta: theta.to_vec(),
        potential: 0.0,
        grad: grad_u(theta)?,
    };
    let (end, m) = leapfrog_from(&start, momentum, step_size, steps, |t| Ok((0.0, grad_u(t)?)))?;
    Ok((end.theta, m))
}

/// Outcome of one Markov transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub accepted: bool,
    /// H(proposal) - H(current); +∞ for a divergent trajectory.
    pub delta_h: f64,
    pub divergent: bool,
}

/// One Markov transition from a cached phase point.
pub trait TransitionKernel {
    fn step(&mut self, state: &mut PhasePoint, rng: &mut ChaCha8Rng) -> Result<StepInfo>;

    /// Potential and gradient at an arbitrary point, used to seed a chain.
    fn evaluate(&self, theta: &[f64]) -> Result<PhasePoint>;
}

/// HMC transition over a [`Potential`].
#[derive(Debug, Clone)]
pub struct HmcKernel<P> {
    pub target: P,
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub divergence_threshold: f64,
}

impl<P: Potential> HmcKernel<P> {
    pub fn new(target: P, config: &HmcConfig) -> Self {
        Self {
            target,
            step_size: config.step_size,
            leapfrog_steps: config.leapfrog_steps,
            divergence_threshold: config.divergence_threshold,
        }
    }
}

impl<P: Potential> TransitionKernel for HmcKernel<P> {
    fn evaluate(&self, theta: &[f64]) -> Result<PhasePoint> {
        let (potential, grad) = self.target.potential_and_grad(theta)?;
        Ok(PhasePoint {
            theta: theta.to_vec(),
            potential,
            grad,
        })
    }

    fn step(&mut self, state: &mut PhasePoint, rng: &mut ChaCha8Rng) -> Result<StepInfo> {
        if self.target.refresh(rng)? {
            *state = self.evaluate(&state.theta)?;
        }
        hmc_step(state, &self.target, self.step_size, self.leapfrog_steps, self.divergence_threshold, rng)
    }
}

/// Resamples momentum, simulates a trajectory and applies the Metropolis-Hastings test,
/// accepting with probability min(1, exp(H(θ, m) - H(θ*, m*))). Divergent trajectories
/// (non-finite or |ΔH| above the threshold) are rejected.
pub fn hmc_step<P: Potential + ?Sized>(
    state: &mut PhasePoint,
    target: &P,
    step_size: f64,
    leapfrog_steps: usize,
    divergence_threshold: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepInfo> {
    let momentum: Vec<f64> = (0..state.theta.len()).map(|_| rng.sample(StandardNormal)).collect();
    let h0 = state.potential + kinetic_energy(&momentum);
    let proposal = leapfrog_from(state, &momentum, step_size, leapfrog_steps, |t| target.potential_and_grad(t));
    let u: f64 = rng.random();
    let (end, delta_h) = match proposal {
        Ok((end, m)) => {
            let dh = end.potential + kinetic_energy(&m) - h0;
            (Some(end), if dh.is_finite() { dh } else { f64::INFINITY })
        }
        Err(BnnError::Divergence { step }) => {
            log::debug!("trajectory diverged at leapfrog step {step}");
            (None, f64::INFINITY)
        }
        Err(other) => return Err(other),
    };
    let divergent = delta_h.abs() > divergence_threshold;
    if divergent {
        log::debug!("rejecting divergent proposal, dH = {delta_h}");
    }
    let accepted = !divergent && (delta_h <= 0.0 || u < (-delta_h).exp());
    if accepted {
        *state = end.expect("accepted proposals are finite");
    }
    Ok(StepInfo {
        accepted,
        delta_h,
        divergent,
    })
}

/// Per-step monitoring output: potential, plus optional NLL and validation accuracy.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChainTrace {
    pub step: Vec<usize>,
    pub potential: Vec<f64>,
    pub nll: Vec<f64>,
    pub val_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub config: HmcConfig,
    pub samples: Vec<Vec<f64>>,
    pub accept_count: usize,
    pub divergent_count: usize,
    pub trace: ChainTrace,
}

impl Chain {
    pub fn acceptance_rate(&self) -> f64 {
        self.accept_count as f64 / self.config.total_steps as f64
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    /// Values of parameter `index` across retained samples.
    pub fn parameter_trace(&self, index: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[index]).collect()
    }
}

/// Monitor called on recorded steps with (θ, potential); returns (NLL, validation accuracy).
pub type Monitor<'a> = dyn Fn(&[f64], f64) -> Result<(f64, f64)> + 'a;

/// Runs `config.total_steps` transitions from `init`, discarding `burn_in` steps and then
/// keeping the last state of every block of `thin` steps.
pub fn run_chain<K: TransitionKernel>(kernel: &mut K, config: &HmcConfig, init: Vec<f64>, monitor: Option<&Monitor>) -> Result<Chain> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = kernel.evaluate(&init)?;
    let mut samples = Vec::with_capacity(config.retained_count());
    let mut trace = ChainTrace::default();
    let (mut accept_count, mut divergent_count) = (0, 0);
    for step in 0..config.total_steps {
        let info = kernel.step(&mut state, &mut rng)?;
        accept_count += info.accepted as usize;
        divergent_count += info.divergent as usize;
        if step >= config.burn_in && (step + 1 - config.burn_in).is_multiple_of(config.thin) {
            samples.push(state.theta.clone());
        }
        if step % config.monitor_every == 0 {
            trace.step.push(step);
            trace.potential.push(state.potential);
            if let Some(monitor) = monitor {
                let (nll, acc) = monitor(&state.theta, state.potential)?;
                trace.nll.push(nll);
                trace.val_accuracy.push(acc);
            }
        }
    }
    if divergent_count > 0 {
        log::warn!("{divergent_count} of {} proposals diverged", config.total_steps);
    }
    Ok(Chain {
        config: config.clone(),
        samples,
        accept_count,
        divergent_count,
        trace,
    })
}

/// HMC over `target` starting at `init`.
pub fn run_hmc<P: Potential>(target: P, config: &HmcConfig, init: Vec<f64>, monitor: Option<&Monitor>) -> Result<Chain> {
    if init.len() != target.dim() {
        return Err(BnnError::InvalidArgument(format!(
            "initial state has {} coordinates, target has {}",
            init.len(),
            target.dim()
        )));
    }
    let mut kernel = HmcKernel::new(target, config);
    run_chain(&mut kernel, config, init, monitor)
}

/// Draws an initial state from the prior.
pub fn init_from_prior(prior: &Prior, dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim)
        .map(|_| match *prior {
            Prior::Gaussian { std } => std * rng.sample::<f64, _>(StandardNormal),
            Prior::Laplace { scale } => {
                let u: f64 = rng.random_range(-0.5..0.5);
                -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Gelman-Rubin potential scale reduction for one scalar across ≥ 2 equal-length chains.
///
/// R̂ = sqrt(((n-1)/n · W + B/n) / W), W the mean within-chain variance and B n times
/// the variance of the chain means. With W = 0, R̂ is 1 if all chains agree and +∞
/// otherwise.
pub fn gelman_rubin(chains: &[&[f64]]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(BnnError::InvalidArgument("R-hat needs at least two chains".into()));
    }
    let n = chains[0].len();
    if n < 2 || chains.iter().any(|c| c.len() != n) {
        return Err(BnnError::InvalidArgument("R-hat needs equal-length chains of at least two draws".into()));
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| sample_variance(c)).collect::<Vec<_>>());
    let b = n as f64 * sample_variance(&means);
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let nf = n as f64;
    Ok((((nf - 1.0) / nf * w + b / nf) / w).sqrt())
}

/// R̂ for each listed parameter index across chains of retained samples.
pub fn gelman_rubin_params(chains: &[&Chain], indices: &[usize]) -> Result<Vec<f64>> {
    indices
        .iter()
        .map(|&i| {
            let traces: Vec<Vec<f64>> = chains.iter().map(|c| c.parameter_trace(i)).collect();
            let refs: Vec<&[f64]> = traces.iter().map(Vec::as_slice).collect();
            gelman_rubin(&refs)
        })
        .collect()
}

/// Analytic potentials for checking the sampler.
pub mod targets {
    use super::*;

    /// Standard normal in `dim` dimensions; in one dimension a unit harmonic oscillator.
    #[derive(Debug, Clone, Copy)]
    pub struct StandardGaussian {
        pub dim: usize,
    }

    impl Potential for StandardGaussian {
        fn dim(&self) -> usize {
            self.dim
        }

        fn potential(&self, theta: &[f64]) -> Result<f64> {
            Ok(0.5 * theta.iter().map(|t| t * t).sum::<f64>())
        }

        fn potential_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((self.potential(theta)?, theta.to_vec()))
        }
    }

    /// U(θ) = height · (θ² - 1)², two wells at ±1.
    #[derive(Debug, Clone, Copy)]
    pub struct DoubleWell {
        pub height: f64,
    }

    impl Potential for DoubleWell {
        fn dim(&self) -> usize {
            1
        }

        fn potential(&self, theta: &[f64]) -> Result<f64> {
            Ok(self.height * (theta[0] * theta[0] - 1.0).powi(2))
        }

        fn potential_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
            let t = theta[0];
            Ok((self.potential(theta)?, vec![4.0 * self.height * t * (t * t - 1.0)]))
        }
    }

    /// Correlated 2-D Gaussian with unit marginal variances and correlation `rho`.
    #[derive(Debug, Clone, Copy)]
    pub struct CorrelatedGaussian {
        pub rho: f64,
    }

    impl Potential for CorrelatedGaussian {
        fn dim(&self) -> usize {
            2
        }

        fn potential(&self, theta: &[f64]) -> Result<f64> {
            let (x, y, r) = (theta[0], theta[1], self.rho);
            Ok((x * x - 2.0 * r * x * y + y * y) / (2.0 * (1.0 - r * r)))
        }

        fn potential_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
            let (x, y, r) = (theta[0], theta[1], self.rho);
            let d = 1.0 - r * r;
            Ok((self.potential(theta)?, vec![(x - r * y) / d, (y - r * x) / d]))
        }
    }
}
