//! Covariance of the composed prediction split into intrinsic spread
//! `E_τ[J Σ Jᵀ]` and bias jitter `Cov_τ[J μ]`, evaluated on the same
//! perturbation draws as the Monte-Carlo estimate.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{voxel_count, AffineTransform, Point3, Shape, Transform};
use crate::perturb::{sample_perturbation, PerturbSpec};
use crate::register::{ErrorModel, OracleBackend, RegistrationBackend, TauFeatures};
use crate::sym::{CovAccumulator, Sym3};
use crate::volume::Volume3;

#[derive(Debug, Clone)]
pub struct CovDecomposition {
    pub shape: Shape,
    pub intrinsic: Vec<Sym3>,
    pub jitter: Vec<Sym3>,
    pub total: Vec<Sym3>,
}

impl CovDecomposition {
    pub fn volumes(&self) -> [(&'static str, Volume3); 3] {
        [
            ("intrinsic", super::sym_volume(self.shape, &self.intrinsic)),
            ("jitter", super::sym_volume(self.shape, &self.jitter)),
            ("total", super::sym_volume(self.shape, &self.total)),
        ]
    }
}

/// Decomposes the covariance predicted for `backend` under `spec` on a grid
/// of `shape`, with the Jacobian of each `τ` taken at `v_τ(y) = τ⁻¹(φ(y))`.
///
/// Divisor `M` on both terms, matching the estimator.
pub fn decompose_cov(backend: &dyn RegistrationBackend, spec: &PerturbSpec, shape: Shape) -> Result<CovDecomposition> {
    let oracle = backend.as_oracle().ok_or(Error::NotAnalytic)?;
    decompose_with(oracle, spec, shape)
}

fn decompose_with(oracle: &OracleBackend, spec: &PerturbSpec, shape: Shape) -> Result<CovDecomposition> {
    spec.validate()?;
    oracle.model.validate(shape)?;
    let n = voxel_count(shape);
    let mut intrinsic = vec![Sym3::ZERO; n];
    let mut jitter = vec![CovAccumulator::default(); n];
    for m in 0..spec.count {
        let tau = sample_perturbation(spec, shape, m)?;
        let features = TauFeatures::of(&tau, shape);
        let sigma = oracle.model.cov(&features);
        let (pulled, _) = oracle.pulled_back_truth(&tau, shape)?;
        intrinsic
            .par_iter_mut()
            .zip(jitter.par_iter_mut())
            .zip(pulled.par_iter())
            .enumerate()
            .for_each(|(i, ((intr, jit), v))| {
                let jac = tau.jacobian_at(&Point3::from(*v)).matrix;
                let spread = Sym3::from_matrix(&(jac * sigma * jac.transpose()));
                *intr = intr.add(&spread);
                jit.push(&(jac * oracle.model.mean_at(&features, i)));
            });
    }
    let inv = 1.0 / spec.count as f64;
    let intrinsic: Vec<Sym3> = intrinsic.iter().map(|s| s.scale(inv)).collect();
    let jitter: Vec<Sym3> = jitter.iter().map(|a| a.covariance(false)).collect();
    let total = intrinsic.iter().zip(&jitter).map(|(a, b)| a.add(b)).collect();
    Ok(CovDecomposition { shape, intrinsic, jitter, total })
}

/// Closed-form `(E_A[A Σ Aᵀ], Cov_A[A μ])` over the given affine samples at
/// target voxel `voxel` of a grid of `shape`. Translation parts cancel.
pub fn closed_form_cov_affine(
    samples: &[AffineTransform],
    model: &ErrorModel,
    shape: Shape,
    voxel: usize,
) -> Result<(Sym3, Sym3)> {
    if samples.is_empty() {
        return Err(Error::invalid("closed form needs at least one affine sample"));
    }
    if voxel >= voxel_count(shape) {
        return Err(Error::invalid("voxel index outside the grid"));
    }
    let mut intrinsic = Sym3::ZERO;
    let mut jitter = CovAccumulator::default();
    for a in samples {
        let features = TauFeatures::of(&Transform::Affine(a.clone()), shape);
        let m = a.matrix();
        intrinsic = intrinsic.add(&Sym3::from_matrix(&(m * model.cov(&features) * m.transpose())));
        jitter.push(&(m * model.mean_at(&features, voxel)));
    }
    Ok((intrinsic.scale(1.0 / samples.len() as f64), jitter.covariance(false)))
}
