//! Multi-resolution affine registration on sum of squared differences.
//!
//! Each pyramid level runs regular-step gradient descent over 12 parameters:
//! a translation and a 3×3 linear correction acting on coordinates
//! normalized to `[−1, 1]` about the level center, so every parameter is
//! measured in voxels of motion. The step has a fixed length along the
//! normalized gradient and is halved whenever the gradient reverses. Only
//! target voxels whose mapped position falls inside the source grid contribute.

use nalgebra::SVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_same_shape, Call, Diagnostics, IterationLog, Registration, RegistrationBackend};
use crate::error::{Error, Result};
use crate::geometry::{domain_center, voxel_center, AffineTransform, Mat3, Point3, Shape, Transform, Vec3};
use crate::volume::Volume3;

type Vec12 = SVector<f64, 12>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffineSsdParams {
    pub levels: usize,
    /// Iteration cap per level.
    pub iters: usize,
    /// Initial step length per level, in level voxels.
    pub step: f64,
}

impl Default for AffineSsdParams {
    fn default() -> Self {
        Self { levels: 3, iters: 100, step: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct AffineFit {
    pub affine: AffineTransform,
    /// Mean squared difference over the overlap at the finest level.
    pub ssd: f64,
    pub diverged: bool,
    pub log: Vec<IterationLog>,
}

/// Consecutive cost increases tolerated before giving up on a level.
const MAX_INCREASES: usize = 10;
/// A level stops once the step length falls below this (level voxels).
const MIN_STEP: f64 = 1e-3;
/// Step length factor applied when the gradient changes direction.
const RELAXATION: f64 = 0.5;

struct Level {
    source: Volume3,
    target: Volume3,
    grad: Volume3,
    factor: f64,
}

fn gradient_volume(v: &Volume3) -> Volume3 {
    let g = v.gradient();
    Volume3::new(v.shape(), 3, g.iter().flat_map(|g| [g.x as f32, g.y as f32, g.z as f32]).collect())
        .expect("gradient of a finite volume is finite")
}

/// Fine-grid affine expressed on a level whose voxel `c` sits at fine `f·c + (f−1)/2`.
fn to_level(a: &AffineTransform, f: f64) -> (Mat3, Vec3) {
    let o = Vec3::repeat((f - 1.0) / 2.0);
    let m = *a.matrix();
    (m, (m * o + a.offset() - o) / f)
}

fn from_level(m: &Mat3, b: &Vec3, f: f64) -> Result<AffineTransform> {
    let o = Vec3::repeat((f - 1.0) / 2.0);
    AffineTransform::new(*m, b * f + o - m * o)
}

struct Model {
    center: Point3,
    radius: f64,
}

impl Model {
    fn new(shape: Shape) -> Self {
        let center = domain_center(shape);
        let radius = center.coords.amax().max(1.0);
        Self { center, radius }
    }

    /// `(t, L)` with `φ(y) = y + t + L (y − c)/R` ⇔ `A = I + L/R`, `b = t + c − A c`.
    fn params(&self, m: &Mat3, b: &Vec3) -> Vec12 {
        let l = (m - Mat3::identity()) * self.radius;
        let t = m * self.center.coords + b - self.center.coords;
        let mut p = Vec12::zeros();
        p.fixed_rows_mut::<3>(0).copy_from(&t);
        for r in 0..3 {
            for c in 0..3 {
                p[3 + 3 * r + c] = l[(r, c)];
            }
        }
        p
    }

    fn affine(&self, p: &Vec12) -> (Mat3, Vec3) {
        let t = Vec3::new(p[0], p[1], p[2]);
        let l = Mat3::from_fn(|r, c| p[3 + 3 * r + c]);
        let m = Mat3::identity() + l / self.radius;
        (m, t + self.center.coords - m * self.center.coords)
    }
}

fn inside(p: &Point3, shape: Shape) -> bool {
    (0..3).all(|a| p[a] >= 0.0 && p[a] <= (shape[a] - 1) as f64)
}

/// Mean squared difference over the overlap and its parameter gradient.
/// The cost is infinite when nothing overlaps.
fn cost_and_gradient(level: &Level, model: &Model, p: &Vec12) -> (f64, Vec12) {
    let (m, b) = model.affine(p);
    let shape = level.target.shape();
    let sx = shape[0] * shape[1];
    let partial: Vec<(f64, Vec12, usize)> = (0..shape[2])
        .into_par_iter()
        .map(|z| {
            let mut sum = 0.0;
            let mut g = Vec12::zeros();
            let mut n = 0;
            for i in z * sx..(z + 1) * sx {
                let y = voxel_center(shape, i);
                let q = Point3::from(m * y.coords + b);
                if !inside(&q, level.source.shape()) {
                    continue;
                }
                let r = level.source.sample(&q, 0) - level.target.voxel(i, 0) as f64;
                let grad = Vec3::new(level.grad.sample(&q, 0), level.grad.sample(&q, 1), level.grad.sample(&q, 2));
                let u = (y - model.center) / model.radius;
                for a in 0..3 {
                    g[a] += r * grad[a];
                    for c in 0..3 {
                        g[3 + 3 * a + c] += r * grad[a] * u[c];
                    }
                }
                sum += r * r;
                n += 1;
            }
            (sum, g, n)
        })
        .collect();
    let (sum, g, n) = partial.iter().fold((0.0, Vec12::zeros(), 0), |a, p| (a.0 + p.0, a.1 + p.1, a.2 + p.2));
    if n == 0 {
        return (f64::INFINITY, Vec12::zeros());
    }
    (sum / n as f64, g * (2.0 / n as f64))
}

fn run_level(level: &Level, index: usize, start: &AffineTransform, params: &AffineSsdParams, log: &mut Vec<IterationLog>) -> Result<(AffineTransform, f64, bool)> {
    let model = Model::new(level.target.shape());
    let (m0, b0) = to_level(start, level.factor);
    let mut p = model.params(&m0, &b0);
    let (mut cost, mut grad) = cost_and_gradient(level, &model, &p);
    let (mut best, mut best_cost) = (p, cost);
    let mut step = params.step;
    let mut previous: Option<Vec12> = None;
    let mut increases = 0;
    let mut diverged = false;
    for it in 0..params.iters {
        let norm = grad.norm();
        if !(norm > 0.0) {
            break;
        }
        if previous.is_some_and(|g| g.dot(&grad) < 0.0) {
            step *= RELAXATION;
        }
        if step < MIN_STEP {
            break;
        }
        p -= grad * (step / norm);
        previous = Some(grad);
        let last = cost;
        (cost, grad) = cost_and_gradient(level, &model, &p);
        log.push(IterationLog { level: index, iteration: it, cost });
        if cost < best_cost {
            best = p;
            best_cost = cost;
        }
        if cost > last {
            increases += 1;
            if increases >= MAX_INCREASES {
                diverged = true;
                break;
            }
        } else {
            increases = 0;
        }
    }
    let (m, b) = model.affine(&best);
    Ok((from_level(&m, &b, level.factor)?, best_cost, diverged))
}

/// Affine `φ̂` with `source ∘ φ̂ ≈ target`, in fine-grid voxel coordinates.
pub fn affine_ssd_register(source: &Volume3, target: &Volume3, params: &AffineSsdParams) -> Result<AffineFit> {
    check_same_shape(source, target)?;
    if params.levels == 0 || params.iters == 0 || !(params.step > 0.0) {
        return Err(Error::invalid("affine solver needs levels ≥ 1, iters ≥ 1 and step > 0"));
    }
    let mut levels = vec![Level { grad: gradient_volume(source), source: source.clone(), target: target.clone(), factor: 1.0 }];
    while levels.len() < params.levels {
        let prev = levels.last().unwrap();
        if prev.source.shape().iter().any(|&d| d < 8) {
            break;
        }
        let s = prev.source.downsample();
        levels.push(Level { grad: gradient_volume(&s), target: prev.target.downsample(), source: s, factor: prev.factor * 2.0 });
    }
    let mut current = AffineTransform::identity();
    let mut log = Vec::new();
    let mut ssd = f64::INFINITY;
    let mut diverged = false;
    for (index, level) in levels.iter().enumerate().rev() {
        let (a, c, d) = run_level(level, index, &current, params, &mut log)?;
        current = a;
        ssd = c;
        diverged |= d;
    }
    Ok(AffineFit { affine: current, ssd, diverged, log })
}

/// Backend wrapper rendering the fitted affine as a dense field.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AffineSsd {
    pub params: AffineSsdParams,
}

impl RegistrationBackend for AffineSsd {
    fn name(&self) -> &'static str {
        "affine-ssd"
    }

    fn register(&self, source: &Volume3, target: &Volume3, _call: &Call<'_>) -> Result<Registration> {
        let fit = affine_ssd_register(source, target, &self.params)?;
        Ok(Registration {
            transform: Transform::Affine(fit.affine).render(target.shape()),
            diagnostics: Diagnostics { final_cost: Some(fit.ssd), diverged: fit.diverged, inversion_residual: None, log: fit.log },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{make_phantom, PhantomKind};

    fn pair(gt: &Transform) -> (Volume3, Volume3) {
        let source = make_phantom([32, 32, 32], PhantomKind::Blobs, 0).unwrap();
        let target = source.warp(gt).unwrap();
        (source, target)
    }

    #[test]
    fn identical_images_stay_at_identity() {
        let (s, t) = pair(&Transform::identity());
        let fit = affine_ssd_register(&s, &t, &AffineSsdParams::default()).unwrap();
        assert!((fit.affine.matrix() - Mat3::identity()).amax() < 1e-3);
        assert!(fit.affine.offset().amax() < 0.1);
        assert!(!fit.diverged);
    }

    #[test]
    fn recovers_translation() {
        let (s, t) = pair(&Transform::translation(Vec3::new(4.0, -3.0, 2.0)).unwrap());
        let fit = affine_ssd_register(&s, &t, &AffineSsdParams::default()).unwrap();
        assert!((fit.affine.offset() - Vec3::new(4.0, -3.0, 2.0)).amax() < 0.5);
        assert!((fit.affine.matrix() - Mat3::identity()).amax() < 0.02);
    }

    #[test]
    fn recovers_isotropic_scale() {
        let gt = AffineTransform::about_center(Mat3::identity() * 1.1, domain_center([32, 32, 32]), Vec3::zeros()).unwrap();
        let (s, t) = pair(&Transform::Affine(gt.clone()));
        let fit = affine_ssd_register(&s, &t, &AffineSsdParams::default()).unwrap();
        assert!((fit.affine.matrix() - gt.matrix()).amax() < 0.02);
    }

    #[test]
    fn level_maps_round_trip() {
        let a = AffineTransform::new(Mat3::new(1.1, 0.1, 0.0, 0.0, 0.9, 0.05, 0.0, 0.0, 1.0), Vec3::new(2.0, -1.0, 0.5)).unwrap();
        for f in [1.0, 2.0, 4.0] {
            let (m, b) = to_level(&a, f);
            let back = from_level(&m, &b, f).unwrap();
            assert!((back.offset() - a.offset()).amax() < 1e-12);
        }
        let model = Model::new([16, 12, 8]);
        let (m, b) = model.affine(&model.params(a.matrix(), a.offset()));
        assert!((m - a.matrix()).amax() < 1e-12 && (b - a.offset()).amax() < 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        let v = Volume3::zeros([8, 8, 8], 1);
        assert!(affine_ssd_register(&v, &v, &AffineSsdParams { levels: 0, ..Default::default() }).is_err());
        assert!(affine_ssd_register(&v, &Volume3::zeros([8, 8, 9], 1), &AffineSsdParams::default()).is_err());
    }
}
