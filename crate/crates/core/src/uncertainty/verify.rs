//! Checks the Monte-Carlo covariance against its first-order prediction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{decompose_cov, estimate_uncertainty, EstimateOptions};
use crate::error::Result;
use crate::geometry::{voxel_center, voxel_count, Point3, Shape, Transform};
use crate::perturb::{sample_perturbation, PerturbFamily, PerturbSpec};
use crate::register::{ErrorModel, OracleBackend};
use crate::sym::{CovAccumulator, Sym3};
use crate::volume::{RoiMask, Volume3};

/// Allowed median discrepancy, beyond Monte-Carlo noise, for nonlinear perturbations.
pub const TAYLOR_ALLOWANCE: f64 = 0.05;
/// Allowed median relative error for linear perturbations, where the prediction is exact.
pub const LINEAR_TOLERANCE: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LemmaKind {
    /// `J = I`.
    Translation,
    /// Constant `J = A`; the prediction is exact.
    Affine,
    /// Spatially varying `J`; the prediction is first order.
    Deform,
}

impl LemmaKind {
    pub fn of(family: PerturbFamily) -> Self {
        match family {
            PerturbFamily::Translation => Self::Translation,
            PerturbFamily::Scale | PerturbFamily::Shear => Self::Affine,
            PerturbFamily::Deform => Self::Deform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LemmaSetup {
    pub shape: Shape,
    pub truth: Transform,
    pub model: ErrorModel,
    pub perturb: PerturbSpec,
    /// Seed of the oracle residual stream.
    pub oracle_seed: u64,
    /// Voxels within this distance of the border are excluded from the summary.
    pub roi_margin: usize,
}

impl Default for LemmaSetup {
    fn default() -> Self {
        Self {
            shape: [16, 16, 16],
            truth: Transform::identity(),
            model: ErrorModel::zero(),
            perturb: PerturbSpec { count: 2000, ..PerturbSpec::default() },
            oracle_seed: 0,
            roi_margin: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub kind: LemmaKind,
    pub family: PerturbFamily,
    pub n: usize,
    pub roi_voxels: usize,
    /// Median and max over the ROI of `‖S − Ŝ‖_F / ‖Ŝ‖_F`, with `Ŝ` the predicted covariance.
    pub median_rel_error: f64,
    pub max_rel_error: f64,
    /// Median relative sampling error expected from `N` Gaussian draws (two standard errors).
    pub mc_bound: f64,
    /// Median of `‖S − S_lin‖_F / ‖S_lin‖_F` where `S_lin` replaces each composed sample
    /// by its first-order expansion on the same draws. Free of sampling noise.
    pub linearization_gap: f64,
    pub tolerance: f64,
    /// The linearization gap exceeds the Taylor allowance.
    pub regime_violation: bool,
    /// Largest intrinsic-term entry; zero for a deterministic error model.
    pub max_intrinsic: f64,
    pub pass: bool,
}

fn relative(a: &Sym3, reference: &Sym3) -> f64 {
    let scale = reference.frobenius();
    let diff = a.sub(reference).frobenius();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Two-standard-error relative Frobenius error of a Gaussian sample covariance.
fn sampling_error(s: &Sym3, n: usize) -> f64 {
    let f2 = s.frobenius().powi(2);
    if f2 == 0.0 {
        return 0.0;
    }
    2.0 * ((s.trace().powi(2) + f2) / (n as f64 * f2)).sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Covariance of the first-order samples `φ(y) + J ε` on the estimator's own draws.
fn linearized_cov(oracle: &OracleBackend, spec: &PerturbSpec, shape: Shape) -> Result<Vec<Sym3>> {
    let mut acc = vec![CovAccumulator::default(); voxel_count(shape)];
    for n in 0..spec.count {
        let tau = sample_perturbation(spec, shape, n)?;
        let (pulled, _) = oracle.pulled_back_truth(&tau, shape)?;
        let eps = oracle.residuals(&tau, shape, n as u64);
        acc.par_iter_mut().enumerate().for_each(|(i, a)| {
            let y = voxel_center(shape, i);
            let jac = tau.jacobian_at(&Point3::from(pulled[i])).matrix;
            let phi = oracle.truth.apply(&y);
            a.push(&(phi - y + jac * eps[i]));
        });
    }
    Ok(acc.iter().map(|a| a.covariance(false)).collect())
}

/// Runs the oracle estimator and compares its covariance with the decomposition.
pub fn verify_lemma(setup: &LemmaSetup) -> Result<LemmaReport> {
    let shape = setup.shape;
    let spec = &setup.perturb;
    let oracle = OracleBackend::new(setup.truth.clone(), setup.model.clone(), setup.oracle_seed);
    let blank = Volume3::zeros(shape, 1);
    let est = estimate_uncertainty(&oracle, &blank, &blank, spec, EstimateOptions::default())?;
    let dec = decompose_cov(&oracle, spec, shape)?;
    let lin = linearized_cov(&oracle, spec, shape)?;
    let roi = RoiMask::interior(shape, setup.roi_margin)?;

    let rel: Vec<f64> = roi.indices().map(|i| relative(&est.cov[i], &dec.total[i])).collect();
    let gap: Vec<f64> = roi.indices().map(|i| relative(&est.cov[i], &lin[i])).collect();
    let mc: Vec<f64> = roi.indices().map(|i| sampling_error(&dec.total[i], spec.count)).collect();
    let max_intrinsic = dec.intrinsic.iter().flat_map(|s| s.0).fold(0.0, |a: f64, b| a.max(b.abs()));

    let kind = LemmaKind::of(spec.family);
    let mc_bound = median(mc);
    let tolerance = match kind {
        LemmaKind::Translation | LemmaKind::Affine => LINEAR_TOLERANCE,
        LemmaKind::Deform => mc_bound + TAYLOR_ALLOWANCE,
    };
    let median_rel_error = median(rel.clone());
    let linearization_gap = median(gap);
    Ok(LemmaReport {
        kind,
        family: spec.family,
        n: spec.count,
        roi_voxels: roi.count(),
        median_rel_error,
        max_rel_error: rel.iter().cloned().fold(0.0, f64::max),
        mc_bound,
        linearization_gap,
        tolerance,
        regime_violation: linearization_gap > TAYLOR_ALLOWANCE,
        max_intrinsic,
        pass: median_rel_error <= tolerance,
    })
}
