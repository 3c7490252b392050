//! Thirion-style demons with Gaussian regularization of the displacement.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_same_shape, Call, Diagnostics, IterationLog, Registration, RegistrationBackend};
use crate::error::{Error, Result};
use crate::geometry::{voxel_coords, voxel_count, voxel_index, DenseTransform, Shape, Transform, Vec3};
use crate::volume::Volume3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemonsParams {
    pub iters: usize,
    /// Standard deviation (voxels) of the Gaussian applied to the field after each update.
    pub smooth_sigma: f64,
}

impl Default for DemonsParams {
    fn default() -> Self {
        Self { iters: 100, smooth_sigma: 1.5 }
    }
}

/// Below this the update denominator is treated as zero and the voxel does not move.
const DENOM_EPS: f64 = 1e-9;

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian filter of a vector field, clamp-to-edge.
pub fn gaussian_smooth(field: &[Vec3], shape: Shape, sigma: f64) -> Vec<Vec3> {
    if sigma <= 0.0 {
        return field.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let mut cur = field.to_vec();
    for axis in 0..3 {
        let src = &cur;
        let next: Vec<Vec3> = (0..voxel_count(shape))
            .into_par_iter()
            .map(|i| {
                let c = voxel_coords(shape, i);
                let hi = shape[axis] as i64 - 1;
                let mut acc = Vec3::zeros();
                for (k, w) in kernel.iter().enumerate() {
                    let mut q = c;
                    q[axis] = (c[axis] as i64 + k as i64 - radius).clamp(0, hi) as usize;
                    acc += src[voxel_index(shape, q[0], q[1], q[2])] * *w;
                }
                acc
            })
            .collect();
        cur = next;
    }
    cur
}

/// Nonrigid `φ̂ = id + u` with `source ∘ φ̂ ≈ target`.
pub fn demons_register(source: &Volume3, target: &Volume3, params: &DemonsParams) -> Result<Registration> {
    check_same_shape(source, target)?;
    if params.smooth_sigma < 0.0 {
        return Err(Error::invalid("smoothing sigma must be non-negative"));
    }
    let shape = target.shape();
    let mut u = vec![Vec3::zeros(); voxel_count(shape)];
    let mut log = Vec::with_capacity(params.iters);
    let mut mse = f64::NAN;
    for it in 0..params.iters {
        let warped = source.warp(&Transform::Dense(DenseTransform::new(shape, u.clone())?))?;
        let grad = warped.gradient();
        let updates: Vec<(Vec3, f64)> = (0..voxel_count(shape))
            .into_par_iter()
            .map(|i| {
                let diff = target.voxel(i, 0) as f64 - warped.voxel(i, 0) as f64;
                let g = grad[i];
                let denom = g.norm_squared() + diff * diff;
                let du = if denom > DENOM_EPS { g * (diff / denom) } else { Vec3::zeros() };
                (du, diff * diff)
            })
            .collect();
        mse = updates.iter().map(|u| u.1).sum::<f64>() / updates.len() as f64;
        log.push(IterationLog { level: 0, iteration: it, cost: mse });
        for (ui, (du, _)) in u.iter_mut().zip(&updates) {
            *ui += du;
        }
        u = gaussian_smooth(&u, shape, params.smooth_sigma);
    }
    Ok(Registration {
        transform: DenseTransform::new(shape, u)?,
        diagnostics: Diagnostics { final_cost: Some(mse), log, ..Default::default() },
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Demons {
    pub params: DemonsParams,
}

impl RegistrationBackend for Demons {
    fn name(&self) -> &'static str {
        "demons"
    }

    fn register(&self, source: &Volume3, target: &Volume3, _call: &Call<'_>) -> Result<Registration> {
        demons_register(source, target, &self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{voxel_center, BSplineTransform};
    use crate::volume::{make_phantom, PhantomKind};
    use rand::Rng;

    #[test]
    fn identical_images_give_no_motion() {
        let v = make_phantom([24, 24, 24], PhantomKind::Blobs, 2).unwrap();
        let r = demons_register(&v, &v, &DemonsParams::default()).unwrap();
        assert!(r.transform.displacements().iter().all(|d| d.norm() < 0.1));
    }

    #[test]
    fn constant_images_give_zero_field() {
        let v = Volume3::from_fn([12, 12, 12], |_| 0.5);
        let r = demons_register(&v, &v, &DemonsParams { iters: 10, ..Default::default() }).unwrap();
        assert!(r.transform.displacements().iter().all(|d| *d == Vec3::zeros()));
    }

    #[test]
    fn halves_endpoint_error_on_smooth_deformation() {
        let shape = [32, 32, 32];
        let source = make_phantom(shape, PhantomKind::CheckerSmooth, 0).unwrap();
        let mut rng = crate::rng::stream(5, 0);
        let gt = Transform::BSpline(
            BSplineTransform::from_fn(10, shape, |_| Vec3::from_fn(|_, _| rng.random_range(-2.0..=2.0))).unwrap(),
        );
        let target = source.warp(&gt).unwrap();
        let r = demons_register(&source, &target, &DemonsParams::default()).unwrap();
        let n = voxel_count(shape) as f64;
        let before: f64 = (0..voxel_count(shape)).map(|i| (voxel_center(shape, i) - gt.apply(&voxel_center(shape, i))).norm()).sum::<f64>() / n;
        let after: f64 = (0..voxel_count(shape)).map(|i| (r.transform.at_voxel(i) - gt.apply(&voxel_center(shape, i))).norm()).sum::<f64>() / n;
        assert!(after <= 0.5 * before, "{before} -> {after}");
    }

    #[test]
    fn smoothing_preserves_constants_and_mass() {
        let shape = [9, 7, 5];
        let c = vec![Vec3::new(1.0, -2.0, 0.5); voxel_count(shape)];
        let s = gaussian_smooth(&c, shape, 1.5);
        assert!(s.iter().all(|v| (v - c[0]).amax() < 1e-12));
        assert_eq!(gaussian_smooth(&c, shape, 0.0), c);
        let k = gaussian_kernel(2.0);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(k.len(), 13);
    }
}
