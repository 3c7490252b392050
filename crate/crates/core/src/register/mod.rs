//! Registration backends `f(source, target) → φ̂`, where `φ̂` maps target
//! grid points into source coordinates so that `source ∘ φ̂ ≈ target`.

mod affine;
mod demons;
mod oracle;

pub use affine::{affine_ssd_register, AffineFit, AffineSsd, AffineSsdParams};
pub use demons::{demons_register, gaussian_smooth, Demons, DemonsParams};
pub use oracle::{oracle_register, CovModel, ErrorModel, MeanModel, OracleBackend, TauFeature, TauFeatures, TauScalar};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compose, DenseTransform, Transform};
use crate::volume::Volume3;

/// Side information the uncertainty harness passes with every call.
///
/// Image-based solvers ignore it; the oracle uses the perturbation to realize
/// the equivariance identity and the nonce to pick its noise stream.
#[derive(Debug, Clone, Copy)]
pub struct Call<'a> {
    pub perturbation: &'a Transform,
    pub nonce: u64,
}

impl Call<'static> {
    pub fn unperturbed(nonce: u64) -> Self {
        static IDENTITY: std::sync::OnceLock<Transform> = std::sync::OnceLock::new();
        Call { perturbation: IDENTITY.get_or_init(Transform::identity), nonce }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub level: usize,
    pub iteration: usize,
    pub cost: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub final_cost: Option<f64>,
    /// The optimizer stopped on repeated cost increases and returned its best iterate.
    pub diverged: bool,
    /// Largest `‖τ(τ⁻¹(p)) − p‖` the oracle accepted.
    pub inversion_residual: Option<f64>,
    pub log: Vec<IterationLog>,
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub transform: DenseTransform,
    pub diagnostics: Diagnostics,
}

pub trait RegistrationBackend: Sync {
    fn name(&self) -> &'static str;

    /// Output is defined on the target grid.
    fn register(&self, source: &Volume3, target: &Volume3, call: &Call<'_>) -> Result<Registration>;

    /// Analytic error model access, for backends that have one.
    fn as_oracle(&self) -> Option<&OracleBackend> {
        None
    }
}

pub(crate) fn check_same_shape(source: &Volume3, target: &Volume3) -> Result<()> {
    if source.shape() != target.shape() {
        return Err(Error::ShapeMismatch { expected: target.shape(), found: source.shape() });
    }
    Ok(())
}

/// "Real" ground truth: estimate the mapping between two distinct images with
/// the affine solver followed by demons, to be applied to the source to
/// synthesize a target.
pub fn solver_real_ground_truth(
    source: &Volume3,
    other: &Volume3,
    affine: &AffineSsdParams,
    demons: &DemonsParams,
) -> Result<Transform> {
    check_same_shape(source, other)?;
    let fit = affine_ssd_register(source, other, affine)?;
    let a = Transform::Affine(fit.affine);
    let pre = source.warp(&a)?;
    let d = demons_register(&pre, other, demons)?;
    compose(&a, &Transform::Dense(d.transform))
}
