//! Tiled synthetic scenes.
//!
//! The scene is cut into `tile × tile` squares, each assigned one class.
//! Every class has a smooth spectral signature (three Gaussian bumps,
//! rescaled to `[0, 1]`); pixels are their class signature plus Gaussian
//! noise. Signatures are drawn class by class; a draw closer than
//! `10·σ·√C` (L2) to an earlier class is redrawn, and a class that cannot be
//! placed restarts the whole set.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::cube::{HsiCube, LabelMap};
use crate::error::{invalid, Result};
use crate::rng::{stream, Stream};

/// Draws per class before the set is restarted.
pub const DRAWS_PER_CLASS: usize = 2000;
/// Restarts before the separation requirement is declared unattainable.
pub const MAX_RESTARTS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub classes: usize,
    pub tile: usize,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub cube: HsiCube,
    pub labels: LabelMap,
    /// `signatures[k]` belongs to class `k + 1`.
    pub signatures: Vec<Vec<f64>>,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Smallest pairwise L2 distance between signatures.
pub fn min_separation(signatures: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in signatures.iter().enumerate() {
        for b in &signatures[i + 1..] {
            best = best.min(distance(a, b));
        }
    }
    best
}

fn draw_signature(bands: usize, rng: &mut impl Rng) -> Vec<f64> {
    let span = bands as f64;
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let center = rng.random_range(0.0..span);
            let width = rng.random_range(span / 20.0..span / 8.0).max(0.5);
            let amplitude = rng.random_range(0.6..1.0);
            (center, width, amplitude)
        })
        .collect();
    let raw: Vec<f64> = (0..bands)
        .map(|b| {
            bumps
                .iter()
                .map(|&(c, w, a)| a * (-0.5 * ((b as f64 - c) / w).powi(2)).exp())
                .sum()
        })
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > 0.0 {
        raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; bands]
    }
}

fn separated_signatures(classes: usize, bands: usize, threshold: f64, rng: &mut impl Rng) -> Option<Vec<Vec<f64>>> {
    'restart: for _ in 0..MAX_RESTARTS {
        let mut set: Vec<Vec<f64>> = Vec::with_capacity(classes);
        while set.len() < classes {
            let placed = (0..DRAWS_PER_CLASS).find_map(|_| {
                let s = draw_signature(bands, rng);
                set.iter().all(|o| distance(&s, o) > threshold).then_some(s)
            });
            match placed {
                Some(s) => set.push(s),
                None => continue 'restart,
            }
        }
        return Some(set);
    }
    None
}

pub fn generate_synthetic(p: &SyntheticParams) -> Result<SyntheticScene> {
    if p.height == 0 || p.width == 0 || p.bands == 0 || p.tile == 0 {
        return Err(invalid("scene extents and tile size must be positive"));
    }
    if !p.height.is_multiple_of(p.tile) || !p.width.is_multiple_of(p.tile) {
        return Err(invalid(format!(
            "tile {} does not divide the {}x{} scene",
            p.tile, p.height, p.width
        )));
    }
    if p.classes < 2 || p.classes > u16::MAX as usize {
        return Err(invalid(format!("class count must be in 2..=65535, got {}", p.classes)));
    }
    if !(p.noise >= 0.0 && p.noise.is_finite()) {
        return Err(invalid(format!("noise must be a finite non-negative value, got {}", p.noise)));
    }
    let (rows, cols) = (p.height / p.tile, p.width / p.tile);
    if p.classes > rows * cols {
        return Err(invalid(format!(
            "{} classes cannot each own one of {} tiles",
            p.classes,
            rows * cols
        )));
    }
    let mut rng = stream(p.seed, Stream::Data);

    // first K tiles of a random order get one class each, the rest are uniform
    let mut order: Vec<usize> = (0..rows * cols).collect();
    order.shuffle(&mut rng);
    let mut tile_class = vec![0u16; rows * cols];
    for (k, &t) in order.iter().enumerate() {
        tile_class[t] = if k < p.classes {
            k as u16 + 1
        } else {
            rng.random_range(1..=p.classes as u16)
        };
    }

    let threshold = 10.0 * p.noise * (p.bands as f64).sqrt();
    let signatures = separated_signatures(p.classes, p.bands, threshold, &mut rng).ok_or_else(|| {
        invalid(format!(
            "no set of {} signatures separated by more than {threshold:.4}; lower the noise or the class count",
            p.classes
        ))
    })?;

    let normal = Normal::new(0.0, p.noise).map_err(|e| invalid(e.to_string()))?;
    let mut labels = Vec::with_capacity(p.height * p.width);
    let mut values = Vec::with_capacity(p.height * p.width * p.bands);
    for r in 0..p.height {
        for c in 0..p.width {
            let class = tile_class[(r / p.tile) * cols + c / p.tile];
            labels.push(class);
            for &s in &signatures[class as usize - 1] {
                let noise = if p.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                values.push((s + noise) as f32);
            }
        }
    }
    Ok(SyntheticScene {
        cube: HsiCube::new(p.height, p.width, p.bands, values)?,
        labels: LabelMap::new(p.height, p.width, labels)?,
        signatures,
    })
}
