//! Posterior predictive distributions (N samples × M items × K classes) and the
//! per-item summaries derived from them.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::error::{BnnError, Result};
use crate::laplace::LastLayerPosterior;
use crate::map_trainer::argmax;
use crate::report::fmt_g;
use crate::tensor_grad::{forward, forward_features, softmax, DropoutMode, NetworkSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Map,
    Hmc,
    Vi,
    Lla,
    Dropout,
    Ensemble,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Map, Method::Hmc, Method::Vi, Method::Lla, Method::Dropout, Method::Ensemble];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Map => "map",
            Method::Hmc => "hmc",
            Method::Vi => "vi",
            Method::Lla => "lla",
            Method::Dropout => "dropout",
            Method::Ensemble => "ensemble",
        })
    }
}

impl FromStr for Method {
    type Err = BnnError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| BnnError::Config(format!("unknown method {s:?}, expected one of map, hmc, vi, lla, dropout, ensemble")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorPredictive {
    pub method: Method,
    pub n_samples: usize,
    pub n_items: usize,
    pub n_classes: usize,
    /// Row-major N × M × K.
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Where the samples came from (seeds, checkpoint ids).
    pub sources: Vec<String>,
}

impl PosteriorPredictive {
    pub fn from_logits(method: Method, n_samples: usize, n_items: usize, n_classes: usize, logits: Vec<f64>, sources: Vec<String>) -> Result<Self> {
        if n_samples == 0 || n_classes == 0 {
            return Err(BnnError::InvalidArgument("a predictive needs at least one sample and one class".into()));
        }
        if logits.len() != n_samples * n_items * n_classes {
            return Err(BnnError::InvalidArgument(format!(
                "{} logits for {n_samples} x {n_items} x {n_classes}",
                logits.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(BnnError::NonFinite { context: "predictive logits".into() });
        }
        let probs = logits.chunks(n_classes).flat_map(softmax).collect();
        Ok(Self {
            method,
            n_samples,
            n_items,
            n_classes,
            logits,
            probs,
            sources,
        })
    }

    fn offset(&self, sample: usize, item: usize) -> usize {
        (sample * self.n_items + item) * self.n_classes
    }

    pub fn logits_row(&self, sample: usize, item: usize) -> &[f64] {
        let o = self.offset(sample, item);
        &self.logits[o..o + self.n_classes]
    }

    pub fn probs_row(&self, sample: usize, item: usize) -> &[f64] {
        let o = self.offset(sample, item);
        &self.probs[o..o + self.n_classes]
    }
}

/// Logits of the given parameter vectors on `test`, dropout inactive.
pub fn predictive_from_samples(spec: &NetworkSpec, samples: &[Vec<f64>], test: &Tensor, method: Method) -> Result<PosteriorPredictive> {
    if samples.is_empty() {
        return Err(BnnError::InvalidArgument("at least one posterior sample is required".into()));
    }
    let mut logits = Vec::with_capacity(samples.len() * test.batch_len() * spec.num_classes());
    for theta in samples {
        logits.extend_from_slice(forward(spec, theta, test, DropoutMode::Inactive)?.data());
    }
    let sources = (0..samples.len()).map(|i| format!("sample{i}")).collect();
    PosteriorPredictive::from_logits(method, samples.len(), test.batch_len(), spec.num_classes(), logits, sources)
}

/// `n` stochastic forward passes with dropout rate `p` active at inference.
pub fn mc_dropout_predictive(spec: &NetworkSpec, map: &[f64], p: f64, n: usize, test: &Tensor, rng: &mut impl RngCore) -> Result<PosteriorPredictive> {
    if !spec.has_dropout() {
        return Err(BnnError::InvalidArgument("network has no dropout layers".into()));
    }
    if n == 0 {
        return Err(BnnError::InvalidArgument("at least one forward pass is required".into()));
    }
    let spec = spec.with_dropout_rate(p)?;
    let mut logits = Vec::with_capacity(n * test.batch_len() * spec.num_classes());
    let mut sources = Vec::with_capacity(n);
    for _ in 0..n {
        let seed = rng.next_u64();
        logits.extend_from_slice(forward(&spec, map, test, DropoutMode::Active { seed })?.data());
        sources.push(format!("mask{seed:016x}"));
    }
    PosteriorPredictive::from_logits(Method::Dropout, n, test.batch_len(), spec.num_classes(), logits, sources)
}

/// One sample per ensemble member.
pub fn ensemble_predictive(spec: &NetworkSpec, members: &[Vec<f64>], test: &Tensor) -> Result<PosteriorPredictive> {
    if members.len() < 2 {
        return Err(BnnError::InvalidArgument("an ensemble needs at least two members".into()));
    }
    let mut pp = predictive_from_samples(spec, members, test, Method::Ensemble)?;
    pp.sources = (0..members.len()).map(|i| format!("member{i}")).collect();
    Ok(pp)
}

/// Last-layer Laplace predictive: backbone features are computed once and only the
/// terminal layer is resampled.
pub fn last_layer_predictive(spec: &NetworkSpec, llp: &LastLayerPosterior, n: usize, test: &Tensor, rng: &mut impl Rng) -> Result<PosteriorPredictive> {
    if n == 0 {
        return Err(BnnError::InvalidArgument("at least one sample is required".into()));
    }
    let features = forward_features(spec, &llp.map.values, test)?;
    let slot = llp.map.layout.last_layer();
    let (k, f) = (slot.bias_len, features.item_len());
    let m = test.batch_len();
    let mut logits = Vec::with_capacity(n * m * k);
    let mut layer = vec![0.0; llp.mean.len()];
    for _ in 0..n {
        for (j, w) in layer.iter_mut().enumerate() {
            let e: f64 = rng.sample(StandardNormal);
            *w = llp.mean[j] + llp.var[j].sqrt() * e;
        }
        let (weights, bias) = layer.split_at(k * f);
        for i in 0..m {
            let phi = features.row(i);
            for c in 0..k {
                logits.push(bias[c] + weights[c * f..(c + 1) * f].iter().zip(phi).map(|(a, x)| a * x).sum::<f64>());
            }
        }
    }
    let sources = (0..n).map(|i| format!("sample{i}")).collect();
    PosteriorPredictive::from_logits(Method::Lla, n, m, k, logits, sources)
}

/// Mean probabilities over samples (M × K) and their argmax labels, ties to the lower
/// class index.
pub fn mean_prediction(pp: &PosteriorPredictive) -> (Vec<f64>, Vec<usize>) {
    let (m, k) = (pp.n_items, pp.n_classes);
    let mut mean = vec![0.0; m * k];
    for s in 0..pp.n_samples {
        for i in 0..m {
            for (acc, p) in mean[i * k..(i + 1) * k].iter_mut().zip(pp.probs_row(s, i)) {
                *acc += p;
            }
        }
    }
    let n = pp.n_samples as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    let labels = mean.chunks(k).map(argmax).collect();
    (mean, labels)
}

/// H = -Σ p ln p in nats, with 0 ln 0 = 0.
pub fn predictive_entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Entropy divided by ln K, in [0, 1].
pub fn normalized_entropy(probs: &[f64]) -> f64 {
    if probs.len() < 2 {
        return 0.0;
    }
    (predictive_entropy(probs) / (probs.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredUncertainty {
    /// Mean normalised entropy of the retained samples.
    pub uncertainty: f64,
    /// Mean probabilities of the retained samples.
    pub error_probs: Vec<f64>,
    pub retained: usize,
    /// Fewer than three samples: no filtering was applied.
    pub fallback: bool,
}

/// Per item, keeps the samples whose entropy lies in the central `level` interval of
/// that item's sample entropies (inclusive percentiles; 0.64 keeps the 18th to 82nd)
/// and averages them.
pub fn credible_filtered_uncertainty(pp: &PosteriorPredictive, level: f64) -> Result<Vec<FilteredUncertainty>> {
    if !(level > 0.0 && level <= 1.0) {
        return Err(BnnError::InvalidArgument(format!("credible level must lie in (0, 1], got {level}")));
    }
    let fallback = pp.n_samples < 3;
    if fallback {
        log::warn!("{} posterior samples: credible filtering disabled", pp.n_samples);
    }
    let tail = (1.0 - level) / 2.0;
    let k = pp.n_classes;
    let mut out = Vec::with_capacity(pp.n_items);
    for i in 0..pp.n_items {
        let entropies: Vec<f64> = (0..pp.n_samples).map(|s| normalized_entropy(pp.probs_row(s, i))).collect();
        let (lo, hi) = if fallback {
            (f64::NEG_INFINITY, f64::INFINITY)
        } else {
            let mut sorted = entropies.clone();
            sorted.sort_by(f64::total_cmp);
            (percentile(&sorted, tail), percentile(&sorted, 1.0 - tail))
        };
        let mut probs = vec![0.0; k];
        let mut total = 0.0;
        let mut retained = 0;
        for (s, &h) in entropies.iter().enumerate() {
            if h >= lo && h <= hi {
                total += h;
                retained += 1;
                for (acc, p) in probs.iter_mut().zip(pp.probs_row(s, i)) {
                    *acc += p;
                }
            }
        }
        let r = retained as f64;
        probs.iter_mut().for_each(|p| *p /= r);
        out.push(FilteredUncertainty {
            uncertainty: total / r,
            error_probs: probs,
            retained,
            fallback,
        });
    }
    Ok(out)
}

/// Columns: item_id, true_label, pred_label, mean_prob_0..K-1, uncertainty, method.
pub fn write_predictive_csv(out: &mut impl Write, pp: &PosteriorPredictive, labels: &[usize], filtered: &[FilteredUncertainty]) -> io::Result<()> {
    let (mean, pred) = mean_prediction(pp);
    let k = pp.n_classes;
    let probs_cols: Vec<String> = (0..k).map(|c| format!("mean_prob_{c}")).collect();
    writeln!(out, "item_id,true_label,pred_label,{},uncertainty,method", probs_cols.join(","))?;
    for i in 0..pp.n_items {
        let probs: Vec<String> = mean[i * k..(i + 1) * k].iter().map(|&p| fmt_g(p)).collect();
        writeln!(
            out,
            "{i},{},{},{},{},{}",
            labels[i],
            pred[i],
            probs.join(","),
            fmt_g(filtered[i].uncertainty),
            pp.method
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_grad::{build_desk_cnn, build_mlp, ParamVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pp_from_probs(rows: &[[f64; 2]], n: usize, m: usize) -> PosteriorPredictive {
        let logits: Vec<f64> = rows.iter().flat_map(|r| [r[0].ln(), r[1].ln()]).collect();
        PosteriorPredictive::from_logits(Method::Vi, n, m, 2, logits, vec![]).unwrap()
    }

    #[test]
    fn entropy_values() {
        assert!((predictive_entropy(&[0.5, 0.5]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(predictive_entropy(&[1.0, 0.0]), 0.0);
        assert!((predictive_entropy(&[0.9, 0.1]) - 0.325083).abs() < 1e-6);
        assert!((normalized_entropy(&[0.5, 0.5]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mean_prediction_ties_go_low() {
        let pp = pp_from_probs(&[[0.9, 0.1], [0.1, 0.9]], 2, 1);
        let (mean, labels) = mean_prediction(&pp);
        assert!((mean[0] - 0.5).abs() < 1e-12 && (mean[1] - 0.5).abs() < 1e-12);
        assert_eq!(labels, vec![0]);
    }

    #[test]
    fn sample_level_identities() {
        let spec = build_mlp(3, &[4], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = ParamVector::init_fan_in(&spec, &mut rng).unwrap().values;
        let b = ParamVector::init_fan_in(&spec, &mut rng).unwrap().values;
        let test = Tensor::new(vec![5, 1, 3], (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();

        let single = predictive_from_samples(&spec, std::slice::from_ref(&a), &test, Method::Map).unwrap();
        assert_eq!(single.logits, forward(&spec, &a, &test, DropoutMode::Inactive).unwrap().into_data());

        let dup = predictive_from_samples(&spec, &[a.clone(), a.clone(), a.clone()], &test, Method::Hmc).unwrap();
        for i in 0..5 {
            assert_eq!(dup.probs_row(0, i), dup.probs_row(2, i));
        }

        let two = predictive_from_samples(&spec, &[a.clone(), b.clone()], &test, Method::Hmc).unwrap();
        let (mean, _) = mean_prediction(&two);
        for i in 0..5 {
            for c in 0..2 {
                let direct = 0.5 * (two.probs_row(0, i)[c] + two.probs_row(1, i)[c]);
                assert!((mean[i * 2 + c] - direct).abs() < 1e-15);
            }
        }
        for row in two.probs.chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(ensemble_predictive(&spec, &[a], &test).is_err());
    }

    #[test]
    fn dropout_predictive_properties() {
        let spec = build_desk_cnn(8, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = ParamVector::init_fan_in(&spec, &mut rng).unwrap().values;
        let test = Tensor::new(vec![4, 8, 8], (0..256).map(|i| ((i * 31 % 17) as f64) / 17.0).collect()).unwrap();
        let det = forward(&spec, &theta, &test, DropoutMode::Inactive).unwrap();
        let zero = mc_dropout_predictive(&spec, &theta, 0.0, 5, &test, &mut rng).unwrap();
        for s in 0..5 {
            for i in 0..4 {
                assert_eq!(zero.logits_row(s, i), det.row(i));
            }
        }
        let a = mc_dropout_predictive(&spec, &theta, 0.5, 10, &test, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = mc_dropout_predictive(&spec, &theta, 0.5, 10, &test, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);

        let spread = |p: f64| {
            let pp = mc_dropout_predictive(&spec, &theta, p, 400, &test, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            let mut total = 0.0;
            for i in 0..4 {
                let xs: Vec<f64> = (0..400).map(|s| pp.probs_row(s, i)[0]).collect();
                let m = xs.iter().sum::<f64>() / 400.0;
                total += xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 399.0;
            }
            total
        };
        assert!(spread(0.5) > spread(0.1));
        let no_dropout = build_mlp(2, &[2], 2).unwrap();
        let t2 = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        assert!(mc_dropout_predictive(&no_dropout, &[0.0; 12], 0.5, 2, &t2, &mut rng).is_err());
    }

    #[test]
    fn credible_filter() {
        // identical rows: no filtering effect
        let pp = pp_from_probs(&[[0.8, 0.2]; 5], 5, 1);
        let f = &credible_filtered_uncertainty(&pp, 0.64).unwrap()[0];
        assert!((f.uncertainty - normalized_entropy(&[0.8, 0.2])).abs() < 1e-12);
        assert_eq!(f.retained, 5);

        // one extreme outlier among 100 rows is excluded
        let mut rows = vec![[0.95, 0.05]; 99];
        for (i, r) in rows.iter_mut().enumerate() {
            let p = 0.9 + 0.0009 * i as f64;
            *r = [p, 1.0 - p];
        }
        rows.push([0.5, 0.5]);
        let pp = pp_from_probs(&rows, 100, 1);
        let f = &credible_filtered_uncertainty(&pp, 0.64).unwrap()[0];
        assert!(f.uncertainty < 0.5);
        assert!(f.retained < 100 && f.retained >= 60, "{}", f.retained);
        let full = &credible_filtered_uncertainty(&pp, 1.0).unwrap()[0];
        let mean_h = rows.iter().map(|r| normalized_entropy(r)).sum::<f64>() / 100.0;
        assert!((full.uncertainty - mean_h).abs() < 1e-12);
        assert_eq!(full.retained, 100);

        let pp = pp_from_probs(&[[0.8, 0.2], [0.6, 0.4]], 2, 1);
        assert!(credible_filtered_uncertainty(&pp, 0.64).unwrap()[0].fallback);
    }

    #[test]
    fn percentile_interpolates() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&xs, 0.0), 1.0);
        assert_eq!(percentile(&xs, 1.0), 5.0);
        assert!((percentile(&xs, 0.18) - 1.72).abs() < 1e-12);
    }

    #[test]
    fn csv_dump() {
        let pp = pp_from_probs(&[[0.9, 0.1], [0.2, 0.8]], 1, 2);
        let filtered = credible_filtered_uncertainty(&pp, 0.64).unwrap();
        let mut buf = Vec::new();
        write_predictive_csv(&mut buf, &pp, &[0, 0], &filtered).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "item_id,true_label,pred_label,mean_prob_0,mean_prob_1,uncertainty,method");
        assert_eq!(lines[1], "0,0,0,0.9,0.1,0.468996,vi");
        assert!(lines[2].starts_with("1,0,1,0.2,0.8,"));
    }
}
