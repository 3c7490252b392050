//! Perturbation-based uncertainty.
//!
//! For each sampled perturbation `τ` the source is warped (`source ∘ τ`),
//! registered to the target, and the prediction is mapped back through `τ`.
//! The spread of the composed predictions `g = τ ∘ φ̂` at each voxel gives a
//! covariance `S(y)`, summarized as the root trace `u(y) = √tr S(y)`.

mod decompose;
mod verify;

pub use decompose::{closed_form_cov_affine, decompose_cov, CovDecomposition};
pub use verify::{verify_lemma, LemmaKind, LemmaReport, LemmaSetup, TAYLOR_ALLOWANCE};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compose_on, voxel_center, voxel_count, DenseTransform, Shape, Transform};
use crate::perturb::{sample_perturbation, PerturbSpec};
use crate::register::{Call, Diagnostics, RegistrationBackend};
use crate::sym::{CovAccumulator, Sym3};
use crate::volume::Volume3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateOptions {
    /// Divide by `N − 1` instead of `N`.
    pub unbiased: bool,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self { unbiased: false }
    }
}

#[derive(Debug, Clone)]
pub struct UncertaintyResult {
    /// Mean composed prediction `μ(y)`.
    pub mean: DenseTransform,
    /// Per-voxel covariance `S(y)`.
    pub cov: Vec<Sym3>,
    /// Root trace `u(y)`.
    pub u: Volume3,
    pub n: usize,
    pub spec: PerturbSpec,
    pub options: EstimateOptions,
    /// Largest oracle inversion residual over all samples, when reported.
    pub max_inversion_residual: Option<f64>,
    /// Samples whose solver flagged divergence.
    pub diverged_samples: usize,
}

/// Composed prediction for one perturbation sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub perturbation: Transform,
    pub composed: DenseTransform,
    pub diagnostics: Diagnostics,
}

/// Runs the backend on perturbation `n` and maps its output back through `τₙ`.
pub fn perturbed_sample(
    backend: &dyn RegistrationBackend,
    source: &Volume3,
    target: &Volume3,
    spec: &PerturbSpec,
    n: usize,
) -> Result<Sample> {
    let shape = target.shape();
    let wrap = |e: Error| Error::Sample { index: n, source: Box::new(e) };
    let tau = sample_perturbation(spec, shape, n).map_err(wrap)?;
    let perturbed = source.warp(&tau).map_err(wrap)?;
    let reg = backend
        .register(&perturbed, target, &Call { perturbation: &tau, nonce: n as u64 })
        .map_err(wrap)?;
    if reg.transform.shape() != shape {
        return Err(wrap(Error::ShapeMismatch { expected: shape, found: reg.transform.shape() }));
    }
    let composed = compose_on(&tau, &Transform::Dense(reg.transform), shape);
    Ok(Sample { perturbation: tau, composed, diagnostics: reg.diagnostics })
}

/// Samples processed per parallel batch. Only bounds memory; results do not depend on it.
pub const SAMPLE_BATCH: usize = 32;

/// Mean field, covariance, and root-trace map over `spec.count` perturbations.
///
/// Samples run in parallel but are accumulated in index order, so the output
/// is bit-identical for any thread count.
pub fn estimate_uncertainty(
    backend: &dyn RegistrationBackend,
    source: &Volume3,
    target: &Volume3,
    spec: &PerturbSpec,
    options: EstimateOptions,
) -> Result<UncertaintyResult> {
    spec.validate()?;
    if source.shape() != target.shape() {
        return Err(Error::ShapeMismatch { expected: target.shape(), found: source.shape() });
    }
    let shape = target.shape();
    let mut acc = vec![CovAccumulator::default(); voxel_count(shape)];
    let mut max_residual: Option<f64> = None;
    let mut diverged_samples = 0;
    for start in (0..spec.count).step_by(SAMPLE_BATCH) {
        let end = (start + SAMPLE_BATCH).min(spec.count);
        let batch: Vec<Sample> = (start..end)
            .into_par_iter()
            .map(|n| perturbed_sample(backend, source, target, spec, n))
            .collect::<Result<_>>()?;
        for sample in batch {
            acc.par_iter_mut()
                .zip(sample.composed.displacements())
                .for_each(|(a, d)| a.push(d));
            if let Some(r) = sample.diagnostics.inversion_residual {
                max_residual = Some(max_residual.map_or(r, |m: f64| m.max(r)));
            }
            diverged_samples += sample.diagnostics.diverged as usize;
        }
    }
    Ok(finish(&acc, shape, spec, options, max_residual, diverged_samples, target))
}

fn finish(
    acc: &[CovAccumulator],
    shape: Shape,
    spec: &PerturbSpec,
    options: EstimateOptions,
    max_inversion_residual: Option<f64>,
    diverged_samples: usize,
    target: &Volume3,
) -> UncertaintyResult {
    let mean = DenseTransform::new(shape, acc.iter().map(|a| a.mean()).collect()).expect("finite mean");
    let cov: Vec<Sym3> = acc.iter().map(|a| a.covariance(options.unbiased)).collect();
    let u = Volume3::new(shape, 1, cov.iter().map(|s| s.trace().max(0.0).sqrt() as f32).collect())
        .expect("finite root trace")
        .with_metadata_of(target);
    UncertaintyResult {
        mean,
        cov,
        u,
        n: spec.count,
        spec: spec.clone(),
        options,
        max_inversion_residual,
        diverged_samples,
    }
}

impl UncertaintyResult {
    /// Mean field as absolute positions at voxel `index`.
    pub fn mean_position(&self, index: usize) -> crate::geometry::Point3 {
        voxel_center(self.mean.shape(), index) + self.mean.displacements()[index]
    }

    /// Root-trace values in `f64`, recomputed from `S(y)`.
    pub fn root_trace(&self) -> Vec<f64> {
        self.cov.iter().map(|s| s.trace().max(0.0).sqrt()).collect()
    }

    /// 6-channel covariance volume (upper triangle per voxel).
    pub fn cov_volume(&self) -> Volume3 {
        sym_volume(self.mean.shape(), &self.cov)
    }
}

pub(crate) fn sym_volume(shape: Shape, values: &[Sym3]) -> Volume3 {
    Volume3::from_records(shape, 6, values.iter().flat_map(|s| s.0)).expect("finite covariance")
}
