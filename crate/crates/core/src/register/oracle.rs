//! Synthetic backend with a known Gaussian error model.
//!
//! For a perturbation `τ` and true transform `φ` the oracle returns
//! `τ⁻¹(φ(y)) + ε(y)` with `ε(y) ~ N(μ(τ; y), Σ(τ; y))` drawn independently per
//! voxel, i.e. it is exactly equivariant up to the injected residual.

use nalgebra::SymmetricEigen;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_same_shape, Call, Diagnostics, Registration, RegistrationBackend};
use crate::error::{Error, Result};
use crate::geometry::{domain_center, voxel_center, voxel_count, DenseTransform, Mat3, Shape, Transform, Vec3};
use crate::rng;
use crate::volume::Volume3;

/// Summary of a perturbation used by τ-dependent error models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauFeatures {
    /// Jacobian of `τ` at the domain center.
    pub center_jacobian: Mat3,
    /// `τ(c) − c` at the domain center `c`.
    pub center_shift: Vec3,
}

impl TauFeatures {
    pub fn of(tau: &Transform, shape: Shape) -> Self {
        let c = domain_center(shape);
        Self { center_jacobian: tau.jacobian_at(&c).matrix, center_shift: tau.apply(&c) - c }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauFeature {
    /// `tr J_τ(c) / 3`.
    MeanScale,
    ShiftX,
    ShiftY,
    ShiftZ,
    ShiftNorm,
}

/// `offset + gain · feature(τ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauScalar {
    pub feature: TauFeature,
    #[serde(default)]
    pub offset: f64,
    #[serde(default = "one")]
    pub gain: f64,
}

fn one() -> f64 {
    1.0
}

impl TauScalar {
    pub fn eval(&self, f: &TauFeatures) -> f64 {
        let x = match self.feature {
            TauFeature::MeanScale => f.center_jacobian.trace() / 3.0,
            TauFeature::ShiftX => f.center_shift.x,
            TauFeature::ShiftY => f.center_shift.y,
            TauFeature::ShiftZ => f.center_shift.z,
            TauFeature::ShiftNorm => f.center_shift.norm(),
        };
        self.offset + self.gain * x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MeanModel {
    Constant { value: [f64; 3] },
    /// One vector per target voxel.
    Field { shape: Shape, values: Vec<[f64; 3]> },
    /// `value · s(τ)`.
    TauScaled { value: [f64; 3], scalar: TauScalar },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CovModel {
    Zero,
    Isotropic { variance: f64 },
    Constant { matrix: [[f64; 3]; 3] },
    /// `matrix · max(s(τ), 0)`.
    TauScaled { matrix: [[f64; 3]; 3], scalar: TauScalar },
}

/// Residual law `ε(τ; y) ~ N(μ(τ; y), Σ(τ; y))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorModel {
    pub mean: MeanModel,
    pub cov: CovModel,
}

fn mat(rows: &[[f64; 3]; 3]) -> Mat3 {
    Mat3::from_fn(|r, c| rows[r][c])
}

fn check_psd(m: &Mat3) -> Result<()> {
    if (m - m.transpose()).amax() > 1e-12 {
        return Err(Error::invalid("error covariance must be symmetric"));
    }
    let min = SymmetricEigen::new(*m).eigenvalues.min();
    if min < -1e-12 * m.amax().max(1.0) {
        return Err(Error::invalid(format!("error covariance is not PSD (min eigenvalue {min:.3e})")));
    }
    Ok(())
}

impl ErrorModel {
    pub fn zero() -> Self {
        Self { mean: MeanModel::Constant { value: [0.0; 3] }, cov: CovModel::Zero }
    }

    pub fn gaussian(mean: [f64; 3], cov: CovModel) -> Self {
        Self { mean: MeanModel::Constant { value: mean }, cov }
    }

    pub fn validate(&self, shape: Shape) -> Result<()> {
        match &self.mean {
            MeanModel::Field { shape: s, values } => {
                if *s != shape {
                    return Err(Error::ShapeMismatch { expected: shape, found: *s });
                }
                if values.len() != voxel_count(shape) {
                    return Err(Error::invalid("mean field length does not match its shape"));
                }
            }
            MeanModel::Constant { .. } | MeanModel::TauScaled { .. } => {}
        }
        match &self.cov {
            CovModel::Zero => Ok(()),
            CovModel::Isotropic { variance } if *variance >= 0.0 => Ok(()),
            CovModel::Isotropic { .. } => Err(Error::invalid("variance must be non-negative")),
            CovModel::Constant { matrix } | CovModel::TauScaled { matrix, .. } => check_psd(&mat(matrix)),
        }
    }

    /// `μ(τ; y)` at target voxel `index`.
    pub fn mean_at(&self, tau: &TauFeatures, index: usize) -> Vec3 {
        match &self.mean {
            MeanModel::Constant { value } => Vec3::from(*value),
            MeanModel::Field { values, .. } => Vec3::from(values[index]),
            MeanModel::TauScaled { value, scalar } => Vec3::from(*value) * scalar.eval(tau),
        }
    }

    /// `Σ(τ)`; no supported model varies the covariance over space.
    pub fn cov(&self, tau: &TauFeatures) -> Mat3 {
        match &self.cov {
            CovModel::Zero => Mat3::zeros(),
            CovModel::Isotropic { variance } => Mat3::identity() * *variance,
            CovModel::Constant { matrix } => mat(matrix),
            CovModel::TauScaled { matrix, scalar } => mat(matrix) * scalar.eval(tau).max(0.0),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        match &self.cov {
            CovModel::Zero => true,
            CovModel::Isotropic { variance } => *variance == 0.0,
            CovModel::Constant { matrix } | CovModel::TauScaled { matrix, .. } => mat(matrix) == Mat3::zeros(),
        }
    }
}

/// Symmetric square root of a PSD matrix.
fn psd_sqrt(m: &Mat3) -> Mat3 {
    if *m == Mat3::zeros() {
        return Mat3::zeros();
    }
    let eig = SymmetricEigen::new(*m);
    let d = Mat3::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    eig.eigenvectors * d * eig.eigenvectors.transpose()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleBackend {
    /// `φ`, target → source.
    pub truth: Transform,
    pub model: ErrorModel,
    pub seed: u64,
    /// Tolerance for pointwise inversion of non-linear perturbations.
    #[serde(default = "default_tol")]
    pub inversion_tol: f64,
    #[serde(default = "default_iters")]
    pub inversion_iters: usize,
}

fn default_tol() -> f64 {
    1e-11
}

fn default_iters() -> usize {
    500
}

impl OracleBackend {
    pub fn new(truth: Transform, model: ErrorModel, seed: u64) -> Self {
        Self { truth, model, seed, inversion_tol: default_tol(), inversion_iters: default_iters() }
    }

    /// `v_τ(y) = τ⁻¹(φ(y))` on the grid, plus the largest inversion residual.
    pub fn pulled_back_truth(&self, tau: &Transform, shape: Shape) -> Result<(Vec<Vec3>, f64)> {
        let solved: Vec<(Vec3, f64)> = (0..voxel_count(shape))
            .into_par_iter()
            .map(|i| {
                let p = self.truth.apply(&voxel_center(shape, i));
                let (v, r) = tau.invert_point(&p, self.inversion_tol, self.inversion_iters)?;
                Ok((v.coords, r))
            })
            .collect::<Result<_>>()?;
        let residual = solved.iter().map(|s| s.1).fold(0.0, f64::max);
        Ok((solved.into_iter().map(|s| s.0).collect(), residual))
    }

    /// Residual draws `ε(y)` for one call, deterministic in `(seed, nonce)`.
    pub fn residuals(&self, tau: &Transform, shape: Shape, nonce: u64) -> Vec<Vec3> {
        let features = TauFeatures::of(tau, shape);
        let root = psd_sqrt(&self.model.cov(&features));
        let deterministic = root == Mat3::zeros();
        let mut rng = rng::stream(rng::derive(self.seed, 0x4f52), nonce);
        (0..voxel_count(shape))
            .map(|i| {
                let mu = self.model.mean_at(&features, i);
                if deterministic {
                    return mu;
                }
                let z = Vec3::from_fn(|_, _| StandardNormal.sample(&mut rng));
                mu + root * z
            })
            .collect()
    }
}

/// `τ⁻¹ ∘ φ + ε` on a grid of `shape`.
pub fn oracle_register(o: &OracleBackend, tau: &Transform, shape: Shape, nonce: u64) -> Result<Registration> {
    o.model.validate(shape)?;
    let (pulled, residual) = o.pulled_back_truth(tau, shape)?;
    let eps = o.residuals(tau, shape, nonce);
    let displacement = pulled
        .iter()
        .zip(&eps)
        .enumerate()
        .map(|(i, (v, e))| v + e - voxel_center(shape, i).coords)
        .collect();
    Ok(Registration {
        transform: DenseTransform::new(shape, displacement)?,
        diagnostics: Diagnostics { inversion_residual: Some(residual), ..Default::default() },
    })
}

impl RegistrationBackend for OracleBackend {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn register(&self, source: &Volume3, target: &Volume3, call: &Call<'_>) -> Result<Registration> {
        check_same_shape(source, target)?;
        oracle_register(self, call.perturbation, target.shape(), call.nonce)
    }

    fn as_oracle(&self) -> Option<&OracleBackend> {
        Some(self)
    }
}
