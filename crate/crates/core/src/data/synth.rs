//! Synthetic radio sources built from sums of 2-D Gaussians.
//!
//! Class 0 (FRI) is edge-darkened: the brightest emission is the core and the twin jets
//! fade with distance. Class 1 (FRII) is edge-brightened: a faint core and bright
//! hotspots at the lobe extremities. Every generated image is checked against the
//! Fanaroff-Riley criterion (distance of the brightest pixel from the core relative to
//! the source extent: < 0.5 for FRI, > 0.5 for FRII) and redrawn if it fails.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ImageDataset, Provenance};

/// Ranges the generator samples from. Amplitudes are relative to the FRI core.
#[derive(Debug, Clone, PartialEq)]
pub struct FrStyle {
    pub noise_std: (f64, f64),
    /// Lobe-end distance from the core as a fraction of the image side.
    pub extent: (f64, f64),
    pub fri_jet_amplitude: (f64, f64),
    pub frii_core_amplitude: (f64, f64),
    pub frii_hotspot_amplitude: (f64, f64),
    pub brightness: (f64, f64),
    /// Multiplier on every component width.
    pub width_scale: f64,
}

impl Default for FrStyle {
    fn default() -> Self {
        Self {
            noise_std: (0.02, 0.08),
            extent: (0.22, 0.42),
            fri_jet_amplitude: (0.35, 0.85),
            frii_core_amplitude: (0.15, 0.75),
            frii_hotspot_amplitude: (0.7, 1.0),
            brightness: (0.7, 1.3),
            width_scale: 1.0,
        }
    }
}

impl FrStyle {
    /// Same morphologies seen through a noisier, lower-resolution instrument.
    pub fn shifted() -> Self {
        Self {
            noise_std: (0.08, 0.16),
            extent: (0.18, 0.32),
            width_scale: 1.6,
            ..Self::default()
        }
    }
}

/// Where a generated source sits in its image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceGeometry {
    pub centre: (f64, f64),
    /// Distance from the core to the outermost lobe component, in pixels.
    pub extent: f64,
    /// Jet axis angle in radians.
    pub axis: f64,
}

struct Blob {
    x: f64,
    y: f64,
    amplitude: f64,
    sigma: f64,
}

/// Distance of the brightest pixel from the core divided by the source extent.
pub fn peak_radius_ratio(image: &[f64], size: usize, geometry: &SourceGeometry) -> f64 {
    let (idx, _) = image
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
    let (px, py) = ((idx % size) as f64, (idx / size) as f64);
    let (cx, cy) = geometry.centre;
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() / geometry.extent
}

pub fn synthesize_frlike<R: Rng + ?Sized>(n_per_class: usize, image_size: usize, rng: &mut R) -> ImageDataset {
    synthesize_frlike_with(n_per_class, image_size, &FrStyle::default(), rng).0
}

/// Generates `n_per_class` sources of each class, interleaved FRI, FRII, FRI, ...
///
/// Pixels are rounded to f32 precision so the dataset survives a container round trip
/// unchanged.
pub fn synthesize_frlike_with<R: Rng + ?Sized>(
    n_per_class: usize,
    image_size: usize,
    style: &FrStyle,
    rng: &mut R,
) -> (ImageDataset, Vec<SourceGeometry>) {
    let size = image_size;
    let mut images = Vec::with_capacity(2 * n_per_class * size * size);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    let mut geometry = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        for class in 0..2 {
            let (img, geom) = loop {
                let (img, geom) = draw_source(class, size, style, rng);
                let ratio = peak_radius_ratio(&img, size, &geom);
                let ok = if class == 0 { ratio < 0.5 } else { ratio > 0.5 };
                if ok {
                    break (img, geom);
                }
            };
            images.extend(img.into_iter().map(|v| v as f32 as f64));
            labels.push(class);
            geometry.push(geom);
        }
    }
    let ds = ImageDataset {
        name: "synthetic_fr".into(),
        provenance: Provenance::Synthetic,
        class_names: vec!["FRI".into(), "FRII".into()],
        height: size,
        width: size,
        images,
        labels,
    };
    (ds, geometry)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn draw_source<R: Rng + ?Sized>(class: usize, size: usize, style: &FrStyle, rng: &mut R) -> (Vec<f64>, SourceGeometry) {
    let s = size as f64;
    let unit = (s / 40.0).max(0.8) * style.width_scale;
    let c = (s - 1.0) / 2.0;
    let centre = (c + rng.random_range(-0.04..0.04) * s, c + rng.random_range(-0.04..0.04) * s);
    let extent = uniform(rng, style.extent) * s;
    let axis = rng.random_range(0.0..PI);
    let (dy, dx) = axis.sin_cos();
    let brightness = uniform(rng, style.brightness);
    let at = |side: f64, t: f64| (centre.0 + side * t * extent * dx, centre.1 + side * t * extent * dy);

    let mut blobs = Vec::new();
    if class == 0 {
        blobs.push(Blob {
            x: centre.0,
            y: centre.1,
            amplitude: brightness,
            sigma: 1.2 * unit,
        });
        let jet = uniform(rng, style.fri_jet_amplitude);
        for side in [1.0, -1.0] {
            let side_factor = rng.random_range(0.75..1.0);
            for i in 1..=5 {
                let t = i as f64 / 5.0;
                let (x, y) = at(side, t);
                blobs.push(Blob {
                    x,
                    y,
                    amplitude: brightness * jet * side_factor * (-1.8 * t).exp(),
                    sigma: unit * (1.0 + 1.2 * t),
                });
            }
        }
    } else {
        blobs.push(Blob {
            x: centre.0,
            y: centre.1,
            amplitude: brightness * uniform(rng, style.frii_core_amplitude),
            sigma: unit,
        });
        let hotspot = uniform(rng, style.frii_hotspot_amplitude);
        for side in [1.0, -1.0] {
            let side_factor = rng.random_range(0.85..1.0);
            let reach = rng.random_range(0.92..1.0);
            let (x, y) = at(side, reach);
            blobs.push(Blob {
                x,
                y,
                amplitude: brightness * hotspot * side_factor,
                sigma: 0.9 * unit,
            });
            for t in [0.55, 0.7, 0.85] {
                let (x, y) = at(side, t * reach);
                blobs.push(Blob {
                    x,
                    y,
                    amplitude: brightness * rng.random_range(0.12..0.3),
                    sigma: 1.5 * unit,
                });
            }
        }
    }

    let noise = Normal::new(0.0, uniform(rng, style.noise_std)).expect("noise std is positive");
    let mut img = vec![0.0; size * size];
    for (idx, v) in img.iter_mut().enumerate() {
        let (x, y) = ((idx % size) as f64, (idx / size) as f64);
        let flux: f64 = blobs
            .iter()
            .map(|b| b.amplitude * (-((x - b.x).powi(2) + (y - b.y).powi(2)) / (2.0 * b.sigma * b.sigma)).exp())
            .sum();
        *v = flux + noise.sample(rng);
    }
    (img, SourceGeometry { centre, extent, axis })
}

/// Images of i.i.d. uniform pixels on `range`; a structureless out-of-distribution set.
pub fn synthesize_uniform_noise<R: Rng + ?Sized>(n: usize, image_size: usize, range: (f64, f64), rng: &mut R) -> ImageDataset {
    let images = (0..n * image_size * image_size)
        .map(|_| uniform(rng, range) as f32 as f64)
        .collect();
    ImageDataset {
        name: "uniform_noise".into(),
        provenance: Provenance::Ood,
        class_names: vec!["noise".into()],
        height: image_size,
        width: image_size,
        images,
        labels: vec![0; n],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fr_criterion_holds_for_every_item() {
        for size in [16, 32, 150] {
            let mut rng = ChaCha8Rng::seed_from_u64(size as u64);
            let n = if size == 150 { 10 } else { 100 };
            let (ds, geom) = synthesize_frlike_with(n, size, &FrStyle::default(), &mut rng);
            assert_eq!(ds.len(), 2 * n);
            for i in 0..ds.len() {
                let ratio = peak_radius_ratio(ds.image(i), size, &geom[i]);
                if ds.labels[i] == 0 {
                    assert!(ratio < 0.5, "FRI item {i} ratio {ratio}");
                } else {
                    assert!(ratio > 0.5, "FRII item {i} ratio {ratio}");
                }
            }
        }
    }

    #[test]
    fn generator_is_seed_deterministic() {
        let a = synthesize_frlike(4, 16, &mut ChaCha8Rng::seed_from_u64(7));
        let b = synthesize_frlike(4, 16, &mut ChaCha8Rng::seed_from_u64(7));
        let c = synthesize_frlike(4, 16, &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.images.iter().all(|&v| v == v as f32 as f64));
    }

    #[test]
    fn shifted_style_and_noise_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (ds, _) = synthesize_frlike_with(3, 16, &FrStyle::shifted(), &mut rng);
        assert_eq!(ds.class_counts(), vec![3, 3]);
        let noise = synthesize_uniform_noise(5, 16, (0.0, 1.0), &mut rng);
        assert_eq!(noise.len(), 5);
        assert!(noise.images.iter().all(|&v| (0.0..1.0).contains(&v)));
        assert_eq!(noise.provenance, Provenance::Ood);
    }
}
