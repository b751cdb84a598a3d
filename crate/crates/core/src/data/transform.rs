use rand::Rng;

use crate::error::{BnnError, Result};

/// Rotates a square `size`x`size` image counter-clockwise by `degrees` about its centre.
///
/// Bilinear interpolation with zero fill outside the source support. Multiples of 90
/// degrees take an exact index-permutation path.
pub fn rotate(image: &[f64], size: usize, degrees: f64) -> Vec<f64> {
    debug_assert_eq!(image.len(), size * size);
    let turns = degrees.rem_euclid(360.0);
    for (k, exact) in [0.0, 90.0, 180.0, 270.0].into_iter().enumerate() {
        if turns == exact {
            return rotate_quarter_turns(image, size, k);
        }
    }
    let theta = turns.to_radians();
    let (sin, cos) = theta.sin_cos();
    let c = (size as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            // inverse rotation maps the destination pixel back into the source
            let sx = cos * dx + sin * dy + c;
            let sy = -sin * dx + cos * dy + c;
            out[y * size + x] = bilinear(image, size, sx, sy);
        }
    }
    out
}

fn rotate_quarter_turns(image: &[f64], size: usize, k: usize) -> Vec<f64> {
    let n = size - 1;
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (sx, sy) = match k {
                0 => (x, y),
                1 => (y, n - x),
                2 => (n - x, n - y),
                _ => (n - y, x),
            };
            out[y * size + x] = image[sy * size + sx];
        }
    }
    out
}

fn bilinear(image: &[f64], size: usize, sx: f64, sy: f64) -> f64 {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let (fx, fy) = (sx - x0, sy - y0);
    let pixel = |x: f64, y: f64| -> f64 {
        if x < 0.0 || y < 0.0 || x >= size as f64 || y >= size as f64 {
            0.0
        } else {
            image[y as usize * size + x as usize]
        }
    };
    let top = pixel(x0, y0) * (1.0 - fx) + pixel(x0 + 1.0, y0) * fx;
    let bottom = pixel(x0, y0 + 1.0) * (1.0 - fx) + pixel(x0 + 1.0, y0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotation by an angle drawn uniformly from [0, 360) degrees.
pub fn augment_rotate<R: Rng + ?Sized>(image: &[f64], size: usize, rng: &mut R) -> Vec<f64> {
    let degrees = rng.random_range(0.0..360.0);
    rotate(image, size, degrees)
}

/// Bilinear (triangle-filter) down-sampling of a square image, widening the filter by the
/// scale factor so every source pixel contributes. Up-scaling is rejected.
pub fn resize(image: &[f64], from: usize, to: usize) -> Result<Vec<f64>> {
    if image.len() != from * from {
        return Err(BnnError::InvalidArgument(format!(
            "image has {} pixels, expected {from}x{from}",
            image.len()
        )));
    }
    if to == 0 || to > from {
        return Err(BnnError::InvalidArgument(format!("cannot resize {from} -> {to}; only down-sampling is supported")));
    }
    let weights = triangle_weights(from, to);
    // rows first, then columns
    let mut tmp = vec![0.0; from * to];
    for y in 0..from {
        let row = &image[y * from..(y + 1) * from];
        for (x, (start, w)) in weights.iter().enumerate() {
            tmp[y * to + x] = w.iter().enumerate().map(|(i, wi)| wi * row[start + i]).sum();
        }
    }
    let mut out = vec![0.0; to * to];
    for (y, (start, w)) in weights.iter().enumerate() {
        for x in 0..to {
            out[y * to + x] = w.iter().enumerate().map(|(i, wi)| wi * tmp[(start + i) * to + x]).sum();
        }
    }
    Ok(out)
}

/// Per output pixel: first contributing source index and normalised weights.
fn triangle_weights(from: usize, to: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = from as f64 / to as f64;
    (0..to)
        .map(|j| {
            let centre = (j as f64 + 0.5) * scale;
            let lo = ((centre - scale).floor().max(0.0)) as usize;
            let hi = ((centre + scale).ceil() as usize).min(from);
            let mut w: Vec<f64> = (lo..hi)
                .map(|i| (1.0 - ((i as f64 + 0.5 - centre) / scale).abs()).max(0.0))
                .collect();
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= total);
            (lo, w)
        })
        .collect()
}
