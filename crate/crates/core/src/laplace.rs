//! Last-layer Laplace approximation with a diagonal empirical Fisher.
//!
//! Only the terminal linear layer (weights and bias) is treated probabilistically; every
//! other parameter stays at its MAP value.

use std::f64::consts::PI;
use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::ImageDataset;
use crate::error::{BnnError, Result};
use crate::tensor_grad::{forward_features, logsumexp, softmax, NetworkSpec, ParamVector, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LastLayerPosterior {
    pub map: ParamVector,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub prior_std: f64,
}

impl LastLayerPosterior {
    /// Coordinates of the last layer within the full parameter vector.
    pub fn range(&self) -> Range<usize> {
        self.map.layout.last_layer().range()
    }
}

/// Last-layer logits and per-datum gradient pieces: with features φ and softmax p, the
/// NLL gradient is (p - y)⊗φ for the weights and (p - y) for the bias.
struct LastLayerData {
    features: Tensor,
    /// p - onehot(y) per datum, row-major N x K.
    residuals: Vec<f64>,
    log_likelihood: f64,
}

fn last_layer_data(spec: &NetworkSpec, params: &ParamVector, data: &ImageDataset) -> Result<LastLayerData> {
    let features = forward_features(spec, &params.values, &data.to_tensor()?)?;
    let slot = params.layout.last_layer();
    let k = slot.bias_len;
    let f = features.item_len();
    let w = &params.values[slot.weight_range()];
    let b = &params.values[slot.bias_range()];
    let mut residuals = Vec::with_capacity(data.len() * k);
    let mut log_likelihood = 0.0;
    for (n, &y) in data.labels.iter().enumerate() {
        let phi = features.row(n);
        let logits: Vec<f64> = (0..k)
            .map(|c| b[c] + w[c * f..(c + 1) * f].iter().zip(phi).map(|(a, x)| a * x).sum::<f64>())
            .collect();
        log_likelihood += logits[y] - logsumexp(&logits);
        let p = softmax(&logits);
        residuals.extend(p.iter().enumerate().map(|(c, pc)| pc - (c == y) as usize as f64));
    }
    Ok(LastLayerData {
        features,
        residuals,
        log_likelihood,
    })
}

/// F_jj = Σ_n (∂ log p(y_n | x_n, θ)/∂θ_j)² over the last-layer weights then bias.
pub fn empirical_fisher_diag(spec: &NetworkSpec, params: &ParamVector, data: &ImageDataset) -> Result<Vec<f64>> {
    let lld = last_layer_data(spec, params, data)?;
    let slot = params.layout.last_layer();
    let (k, f) = (slot.bias_len, lld.features.item_len());
    let mut fisher = vec![0.0; k * f + k];
    for n in 0..data.len() {
        let phi = lld.features.row(n);
        for c in 0..k {
            let r = lld.residuals[n * k + c];
            if r == 0.0 {
                continue;
            }
            let r2 = r * r;
            for (fj, x) in fisher[c * f..(c + 1) * f].iter_mut().zip(phi) {
                *fj += r2 * x * x;
            }
            fisher[k * f + c] += r2;
        }
    }
    Ok(fisher)
}

/// Posterior variance 1/(F + 1/γ²) per coordinate.
pub fn laplace_variance(fisher: &[f64], prior_std: f64) -> Vec<f64> {
    let prior_precision = 1.0 / (prior_std * prior_std);
    fisher.iter().map(|f| 1.0 / (f + prior_precision)).collect()
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(BnnError::InvalidArgument(format!("prior std must be positive, got {gamma}")))
    }
}

pub fn fit_laplace(spec: &NetworkSpec, map: &ParamVector, data: &ImageDataset, prior_std: f64) -> Result<LastLayerPosterior> {
    check_gamma(prior_std)?;
    let fisher = empirical_fisher_diag(spec, map, data)?;
    Ok(posterior_from_fisher(map, &fisher, prior_std))
}

fn posterior_from_fisher(map: &ParamVector, fisher: &[f64], prior_std: f64) -> LastLayerPosterior {
    LastLayerPosterior {
        map: map.clone(),
        mean: map.last_layer().to_vec(),
        var: laplace_variance(fisher, prior_std),
        prior_std,
    }
}

/// Diagonal Laplace log marginal likelihood
/// log p(D|θ*) + log N(θ*_L; 0, γ²I) + ½ Σ_j ln(2π var_j), var_j = 1/(H_jj + 1/γ²).
pub fn laplace_log_evidence(log_likelihood: f64, mode: &[f64], curvature: &[f64], prior_std: f64) -> f64 {
    let var = laplace_variance(curvature, prior_std);
    let g2 = prior_std * prior_std;
    let log_prior: f64 = mode.iter().map(|t| -0.5 * t * t / g2 - 0.5 * (2.0 * PI * g2).ln()).sum();
    let log_volume: f64 = var.iter().map(|v| 0.5 * (2.0 * PI * v).ln()).sum();
    log_likelihood + log_prior + log_volume
}

/// Index of the largest objective value; the earliest (smallest γ on an ascending grid)
/// wins ties.
pub fn grid_argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSearch {
    pub grid: Vec<f64>,
    pub log_evidence: Vec<f64>,
    pub best: f64,
}

/// Grid search for the prior std γ maximising the Laplace evidence at fixed θ_MAP.
pub fn optimize_prior_precision(spec: &NetworkSpec, map: &ParamVector, data: &ImageDataset, grid: &[f64]) -> Result<PriorSearch> {
    if grid.is_empty() {
        return Err(BnnError::InvalidArgument("prior grid is empty".into()));
    }
    for &g in grid {
        check_gamma(g)?;
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let lld = last_layer_data(spec, map, data)?;
    let log_lik = lld.log_likelihood;
    let fisher = empirical_fisher_diag(spec, map, data)?;
    let mode = map.last_layer();
    let log_evidence: Vec<f64> = sorted.iter().map(|&g| laplace_log_evidence(log_lik, mode, &fisher, g)).collect();
    let best = sorted[grid_argmax(&log_evidence).expect("non-empty grid")];
    Ok(PriorSearch {
        grid: sorted,
        log_evidence,
        best,
    })
}

/// Fits the Laplace posterior at the evidence-maximising γ from `grid`.
pub fn fit_laplace_tuned(spec: &NetworkSpec, map: &ParamVector, data: &ImageDataset, grid: &[f64]) -> Result<(LastLayerPosterior, PriorSearch)> {
    let search = optimize_prior_precision(spec, map, data, grid)?;
    let fisher = empirical_fisher_diag(spec, map, data)?;
    Ok((posterior_from_fisher(map, &fisher, search.best), search))
}

/// Draws full parameter vectors: MAP everywhere except the last layer, which is
/// N(mean, diag var).
pub fn sample_last_layer(llp: &LastLayerPosterior, n: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let range = llp.range();
    (0..n)
        .map(|_| {
            let mut theta = llp.map.values.clone();
            for (j, t) in theta[range.clone()].iter_mut().enumerate() {
                let e: f64 = rng.sample(StandardNormal);
                *t = llp.mean[j] + llp.var[j].sqrt() * e;
            }
            theta
        })
        .collect()
}
