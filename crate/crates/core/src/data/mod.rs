//! Image datasets: the BNNDATA1 container, deterministic splits, augmentation,
//! preprocessing and a synthetic Fanaroff-Riley-like generator.

mod container;
mod split;
mod synth;
mod transform;

use std::fmt;
use std::str::FromStr;

pub use container::{decode_dataset, encode_dataset, load_dataset, save_dataset, Manifest, DATA_MAGIC};
pub use split::{split, split_three_way, SplitSpec};
pub use synth::{
    peak_radius_ratio, synthesize_frlike, synthesize_frlike_with, synthesize_uniform_noise, FrStyle, SourceGeometry,
};
pub use transform::{augment_rotate, resize, rotate};

use crate::error::{BnnError, Result};
use crate::tensor_grad::Tensor;

/// Where a dataset sits relative to the training distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    InDistribution,
    Shifted,
    Ood,
    Synthetic,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::InDistribution => "in_distribution",
            Provenance::Shifted => "shifted",
            Provenance::Ood => "ood",
            Provenance::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Provenance {
    type Err = BnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "in_distribution" | "iD" | "id" => Ok(Provenance::InDistribution),
            "shifted" => Ok(Provenance::Shifted),
            "ood" | "OoD" => Ok(Provenance::Ood),
            "synthetic" => Ok(Provenance::Synthetic),
            other => Err(BnnError::Config(format!("unknown provenance {other:?}"))),
        }
    }
}

/// Labelled single-channel images stored row-major, one after another.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    pub name: String,
    pub provenance: Provenance,
    pub class_names: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ImageDataset {
    pub fn new(
        name: impl Into<String>,
        provenance: Provenance,
        class_names: Vec<String>,
        (height, width): (usize, usize),
        images: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            provenance,
            class_names,
            height,
            width,
            images,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(BnnError::InvalidArgument("image dimensions must be positive".into()));
        }
        if self.images.len() != self.labels.len() * self.pixels() {
            return Err(BnnError::InvalidArgument(format!(
                "{} pixels for {} images of {}x{}",
                self.images.len(),
                self.labels.len(),
                self.height,
                self.width
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.n_classes()) {
            return Err(BnnError::InvalidArgument(format!(
                "label {bad} outside the {} declared classes",
                self.n_classes()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, index: usize) -> &[f64] {
        let p = self.pixels();
        &self.images[index * p..(index + 1) * p]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.pixels());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.metadata_only()
        }
    }

    fn metadata_only(&self) -> Self {
        Self {
            name: self.name.clone(),
            provenance: self.provenance,
            class_names: self.class_names.clone(),
            height: self.height,
            width: self.width,
            images: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// All images as a `[M, H, W]` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.len(), self.height, self.width], self.images.clone())
    }

    /// Images and labels at `indices` as a `[B, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let sub = self.subset(indices);
        Ok((sub.to_tensor()?, sub.labels))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn with_provenance(mut self, provenance: Provenance, name: impl Into<String>) -> Self {
        self.provenance = provenance;
        self.name = name.into();
        self
    }

    pub fn normalization(&self) -> Normalization {
        Normalization::fit(&self.images)
    }

    pub fn normalized(&self, norm: &Normalization) -> Self {
        Self {
            images: self.images.iter().map(|&v| norm.apply(v)).collect(),
            labels: self.labels.clone(),
            ..self.metadata_only()
        }
    }
}

/// Global pixel mean and standard deviation of a reference (training) dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 1.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }

    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalization_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = synthesize_frlike(5, 16, &mut rng);
        let once = ds.normalized(&ds.normalization());
        let twice = once.normalized(&once.normalization());
        let stats = once.normalization();
        assert!(stats.mean.abs() < 1e-12 && (stats.std - 1.0).abs() < 1e-12);
        for (a, b) in once.images.iter().zip(&twice.images) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn subset_and_batch_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ds = synthesize_frlike(3, 8, &mut rng);
        let (batch, labels) = ds.batch(&[4, 0]).unwrap();
        assert_eq!(batch.shape(), &[2, 8, 8]);
        assert_eq!(labels, vec![ds.labels[4], ds.labels[0]]);
        assert_eq!(batch.item(0), ds.image(4));
        assert_eq!(ds.class_counts(), vec![3, 3]);
        let bad = ImageDataset::new("x", Provenance::Synthetic, vec!["a".into()], (2, 2), vec![0.0; 4], vec![1]);
        assert!(bad.is_err());
    }
}
