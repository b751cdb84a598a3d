//! Test error, uncertainty calibration error, energy scores and their histograms.

use std::io::{self, Write};

use crate::error::{BnnError, Result};
use crate::predictive::{mean_prediction, PosteriorPredictive};
use crate::report::fmt_g;
use crate::tensor_grad::logsumexp;

/// Percentage of items whose mean-prediction label differs from `labels`.
pub fn test_error(pp: &PosteriorPredictive, labels: &[usize]) -> Result<f64> {
    if labels.len() != pp.n_items {
        return Err(BnnError::InvalidArgument(format!("{} labels for {} items", labels.len(), pp.n_items)));
    }
    let (_, pred) = mean_prediction(pp);
    Ok(error_percent(&pred, labels))
}

pub fn error_percent(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let wrong = pred.iter().zip(labels).filter(|(p, l)| p != l).count();
    100.0 * wrong as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_uncertainty: f64,
    pub error_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub uce_percent: f64,
    pub n_bins: usize,
    pub bins: Vec<CalibrationBin>,
}

/// Expected uncertainty calibration error in percent:
/// 100 · Σ_m |B_m|/M · |err(B_m) - ū(B_m)| over equal-width bins on [0, 1], the last bin
/// closed on the right.
pub fn uce(uncertainties: &[f64], correct: &[bool], n_bins: usize) -> Result<CalibrationReport> {
    if uncertainties.len() != correct.len() {
        return Err(BnnError::InvalidArgument("uncertainty and correctness lengths differ".into()));
    }
    if n_bins == 0 {
        return Err(BnnError::InvalidArgument("at least one bin is required".into()));
    }
    if let Some(u) = uncertainties.iter().find(|u| !(0.0..=1.0).contains(*u)) {
        return Err(BnnError::InvalidArgument(format!("uncertainty {u} outside [0, 1]")));
    }
    let mut sum_u = vec![0.0; n_bins];
    let mut wrong = vec![0usize; n_bins];
    let mut count = vec![0usize; n_bins];
    for (&u, &ok) in uncertainties.iter().zip(correct) {
        let b = ((u * n_bins as f64) as usize).min(n_bins - 1);
        sum_u[b] += u;
        wrong[b] += (!ok) as usize;
        count[b] += 1;
    }
    let m = uncertainties.len() as f64;
    let mut total = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            let (mean_uncertainty, error_rate) = if count[b] > 0 {
                let c = count[b] as f64;
                (sum_u[b] / c, wrong[b] as f64 / c)
            } else {
                (0.0, 0.0)
            };
            if count[b] > 0 {
                total += count[b] as f64 / m * (error_rate - mean_uncertainty).abs();
            }
            CalibrationBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count: count[b],
                mean_uncertainty,
                error_rate,
            }
        })
        .collect();
    Ok(CalibrationReport {
        uce_percent: if uncertainties.is_empty() { 0.0 } else { 100.0 * total },
        n_bins,
        bins,
    })
}

/// E = -T · ln Σ_i exp(f_i / T).
pub fn energy_score(logits: &[f64], temperature: f64) -> f64 {
    if temperature == 1.0 {
        return -logsumexp(logits);
    }
    let scaled: Vec<f64> = logits.iter().map(|f| f / temperature).collect();
    -temperature * logsumexp(&scaled)
}

/// Per item, the mean over posterior samples of each sample's energy (T = 1).
pub fn avg_energy(pp: &PosteriorPredictive) -> Vec<f64> {
    (0..pp.n_items)
        .map(|i| (0..pp.n_samples).map(|s| energy_score(pp.logits_row(s, i), 1.0)).sum::<f64>() / pp.n_samples as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyRecord {
    pub item_id: usize,
    /// Dataset tag, e.g. `iD`, `shifted`, `OoD`.
    pub tag: String,
    pub energy: f64,
}

/// Counts over shared bins `[k·w, (k+1)·w)`, one column per tag in first-seen order.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyHistogram {
    pub bin_width: f64,
    /// k of the first bin.
    pub first_bin: i64,
    pub tags: Vec<String>,
    /// `counts[bin][tag]`.
    pub counts: Vec<Vec<usize>>,
}

impl EnergyHistogram {
    pub fn bin_lower(&self, bin: usize) -> f64 {
        (self.first_bin + bin as i64) as f64 * self.bin_width
    }

    pub fn totals(&self) -> Vec<usize> {
        (0..self.tags.len()).map(|t| self.counts.iter().map(|row| row[t]).sum()).collect()
    }
}

fn bin_index(e: f64, width: f64) -> i64 {
    let q = e / width;
    let r = q.round();
    // values on an edge belong to the bin starting there, despite rounding in the division
    if (q - r).abs() < 1e-9 {
        r as i64
    } else {
        q.floor() as i64
    }
}

pub fn energy_histogram(records: &[EnergyRecord], bin_width: f64) -> Result<EnergyHistogram> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(BnnError::InvalidArgument(format!("bin width must be positive, got {bin_width}")));
    }
    let mut tags: Vec<String> = Vec::new();
    for r in records {
        if !r.energy.is_finite() {
            return Err(BnnError::NonFinite {
                context: format!("energy of item {} ({})", r.item_id, r.tag),
            });
        }
        if !tags.contains(&r.tag) {
            tags.push(r.tag.clone());
        }
    }
    if records.is_empty() {
        return Ok(EnergyHistogram {
            bin_width,
            first_bin: 0,
            tags,
            counts: Vec::new(),
        });
    }
    let idx: Vec<i64> = records.iter().map(|r| bin_index(r.energy, bin_width)).collect();
    let lo = *idx.iter().min().expect("non-empty");
    let hi = *idx.iter().max().expect("non-empty");
    let mut counts = vec![vec![0; tags.len()]; (hi - lo + 1) as usize];
    for (r, &k) in records.iter().zip(&idx) {
        let t = tags.iter().position(|t| *t == r.tag).expect("tag collected above");
        counts[(k - lo) as usize][t] += 1;
    }
    Ok(EnergyHistogram {
        bin_width,
        first_bin: lo,
        tags,
        counts,
    })
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn write_calibration_csv(out: &mut impl Write, report: &CalibrationReport) -> io::Result<()> {
    writeln!(out, "bin,lower,upper,count,mean_uncertainty,error_rate")?;
    for (b, bin) in report.bins.iter().enumerate() {
        writeln!(
            out,
            "{b},{},{},{},{},{}",
            fmt_g(bin.lower),
            fmt_g(bin.upper),
            bin.count,
            fmt_g(bin.mean_uncertainty),
            fmt_g(bin.error_rate)
        )?;
    }
    writeln!(out, "uce_percent,{}", fmt_g(report.uce_percent))
}

pub fn write_energy_csv(out: &mut impl Write, records: &[EnergyRecord]) -> io::Result<()> {
    writeln!(out, "item_id,dataset,energy")?;
    for r in records {
        writeln!(out, "{},{},{}", r.item_id, r.tag, fmt_g(r.energy))?;
    }
    Ok(())
}

pub fn write_histogram_csv(out: &mut impl Write, hist: &EnergyHistogram) -> io::Result<()> {
    writeln!(out, "bin_lower,bin_upper,{}", hist.tags.join(","))?;
    for (b, row) in hist.counts.iter().enumerate() {
        let counts: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        writeln!(
            out,
            "{},{},{}",
            fmt_g(hist.bin_lower(b)),
            fmt_g(hist.bin_lower(b + 1)),
            counts.join(",")
        )?;
    }
    Ok(())
}
