use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Volume3;
use crate::error::{Error, Result};
use crate::geometry::{Point3, Shape};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    /// Sum of 5–15 anisotropic Gaussian bumps.
    Blobs,
    /// Product of low-frequency sinusoids.
    CheckerSmooth,
}

/// Deterministic synthetic image with values normalized to `[0, 1]`.
pub fn make_phantom(shape: Shape, kind: PhantomKind, seed: u64) -> Result<Volume3> {
    if shape.iter().any(|&d| d < 16) {
        return Err(Error::invalid(format!("phantom shape {shape:?} is below the 16³ minimum")));
    }
    let mut rng = rng::stream(seed, 0x5048_414e);
    let dims = shape.map(|d| d as f64);
    let raw = match kind {
        PhantomKind::Blobs => {
            let count = rng.random_range(5..=15);
            let blobs: Vec<([f64; 3], [f64; 3], f64)> = (0..count)
                .map(|_| {
                    let center = dims.map(|d| rng.random_range(0.2..0.8) * d);
                    let sigma = dims.map(|d| rng.random_range(0.06..0.18) * d);
                    (center, sigma, rng.random_range(0.4..1.0))
                })
                .collect();
            Volume3::from_fn(shape, move |p| {
                blobs
                    .iter()
                    .map(|(c, s, a)| {
                        let q: f64 = (0..3).map(|i| ((p[i] - c[i]) / s[i]).powi(2)).sum();
                        a * (-0.5 * q).exp()
                    })
                    .sum()
            })
        }
        PhantomKind::CheckerSmooth => {
            let freq: [f64; 3] = std::array::from_fn(|_| rng.random_range(2..=3) as f64);
            let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
            Volume3::from_fn(shape, move |p: &Point3| {
                (0..3).map(|i| (2.0 * PI * freq[i] * p[i] / dims[i] + phase[i]).sin()).product()
            })
        }
    };
    normalize(raw)
}

fn normalize(v: Volume3) -> Result<Volume3> {
    let (lo, hi) = v.range();
    let span = (hi - lo) as f64;
    if span <= 0.0 {
        return Err(Error::invalid("phantom is constant"));
    }
    let data = v.data().iter().map(|&x| (((x - lo) as f64) / span) as f32).collect();
    Volume3::new(v.shape(), 1, data)
}
