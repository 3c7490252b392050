//! Random perturbation families and simulated ground-truth transformations.
//!
//! Default ranges: translations up to 1% of the image extent per axis,
//! per-axis scales in `[0.9, 1.1]`, shears in `[−0.02, 0.02]`, and cubic
//! B-spline deformations on a 10-voxel control grid with node displacements
//! in `[−12.5, 12.5]` voxels attenuated by a strength factor. Linear
//! perturbations act about the domain center so that the center is fixed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compose, domain_center, voxel_center, voxel_count, AffineTransform, BSplineTransform, Mat3, Shape, Transform, Vec3};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbFamily {
    Translation,
    Scale,
    Shear,
    Deform,
}

impl PerturbFamily {
    pub const ALL: [PerturbFamily; 4] = [Self::Translation, Self::Scale, Self::Shear, Self::Deform];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbSpec {
    pub family: PerturbFamily,
    /// Half-width of the per-axis translation, as a fraction of the axis length.
    pub translation_fraction: f64,
    pub scale_range: [f64; 2],
    /// Half-width of the symmetric shear interval.
    pub shear_range: f64,
    pub deform_spacing: usize,
    /// Half-width of the node displacement interval, in voxels, before `deform_strength`.
    pub deform_amplitude: f64,
    pub deform_strength: f64,
    pub seed: u64,
    pub count: usize,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        Self {
            family: PerturbFamily::Translation,
            translation_fraction: 0.01,
            scale_range: [0.9, 1.1],
            shear_range: 0.02,
            deform_spacing: 10,
            deform_amplitude: 12.5,
            deform_strength: 0.08,
            seed: 0,
            count: 50,
        }
    }
}

impl PerturbSpec {
    pub fn new(family: PerturbFamily, count: usize, seed: u64) -> Self {
        Self { family, count, seed, ..Self::default() }
    }

    /// Same family with every range collapsed, so each sample is the identity.
    pub fn collapsed(mut self) -> Self {
        self.translation_fraction = 0.0;
        self.scale_range = [1.0, 1.0];
        self.shear_range = 0.0;
        self.deform_amplitude = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 2 {
            return Err(Error::invalid("perturbation count N must be at least 2"));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid("scale range must satisfy 0 < lo <= hi"));
        }
        if self.translation_fraction < 0.0
            || self.shear_range < 0.0
            || self.deform_amplitude < 0.0
            || self.deform_strength < 0.0
        {
            return Err(Error::invalid("perturbation half-widths must be non-negative"));
        }
        if self.deform_spacing < 2 {
            return Err(Error::invalid("deform spacing must be at least 2"));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn symmetric(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    uniform(rng, -half, half)
}

fn shear_matrix(rng: &mut ChaCha8Rng, half: f64) -> Mat3 {
    let mut m = Mat3::identity();
    for r in 0..3 {
        for c in 0..3 {
            if r != c {
                m[(r, c)] = symmetric(rng, half);
            }
        }
    }
    m
}

fn random_bspline(rng: &mut ChaCha8Rng, spacing: usize, shape: Shape, half: f64) -> Result<BSplineTransform> {
    BSplineTransform::from_fn(spacing, shape, |_| {
        Vec3::new(symmetric(rng, half), symmetric(rng, half), symmetric(rng, half))
    })
}

/// Perturbation `n` of the family described by `spec`, on a grid of `shape`.
///
/// Deterministic in `(spec.seed, n)` regardless of call order.
pub fn sample_perturbation(spec: &PerturbSpec, shape: Shape, n: usize) -> Result<Transform> {
    if n >= spec.count {
        return Err(Error::invalid(format!("sample index {n} out of range for N = {}", spec.count)));
    }
    let mut rng = rng::stream(spec.seed, n as u64);
    let center = domain_center(shape);
    Ok(match spec.family {
        PerturbFamily::Translation => {
            let t = Vec3::from_fn(|a, _| symmetric(&mut rng, spec.translation_fraction * shape[a] as f64));
            Transform::translation(t)?
        }
        PerturbFamily::Scale => {
            let [lo, hi] = spec.scale_range;
            let s = Vec3::from_fn(|_, _| uniform(&mut rng, lo, hi));
            Transform::Affine(AffineTransform::about_center(Mat3::from_diagonal(&s), center, Vec3::zeros())?)
        }
        PerturbFamily::Shear => {
            let m = shear_matrix(&mut rng, spec.shear_range);
            Transform::Affine(AffineTransform::about_center(m, center, Vec3::zeros())?)
        }
        PerturbFamily::Deform => {
            let half = spec.deform_amplitude * spec.deform_strength;
            Transform::BSpline(random_bspline(&mut rng, spec.deform_spacing, shape, half)?)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GtKind {
    Translation,
    Affine,
    Deform2,
    SolverReal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GtSpec {
    pub kind: GtKind,
    pub translation_fraction: f64,
    pub scale_range: [f64; 2],
    pub shear_range: f64,
    pub deform_spacing: usize,
    pub deform_amplitude: f64,
    pub seed: u64,
}

impl Default for GtSpec {
    fn default() -> Self {
        Self {
            kind: GtKind::Translation,
            translation_fraction: 0.1,
            scale_range: [0.8, 1.2],
            shear_range: 0.1,
            deform_spacing: 10,
            deform_amplitude: 12.5,
            seed: 0,
        }
    }
}

/// A simulated ground truth and the layers it was built from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub transform: Transform,
    /// Constituent transforms, outermost first (`transform = layers[0] ∘ layers[1] ∘ …`).
    pub layers: Vec<Transform>,
    /// Number of draws needed to obtain an invertible deformation.
    pub attempts: usize,
}

const DEFORM2_MAX_ATTEMPTS: usize = 10;
/// A deform2 layer is kept when its inverse reaches this residual (voxels).
const DEFORM2_MAX_RESIDUAL: f64 = 0.5;

/// One B-spline layer that is fold-free on the grid and inverts to within
/// [`DEFORM2_MAX_RESIDUAL`], redrawn up to [`DEFORM2_MAX_ATTEMPTS`] times.
/// The composition of two such layers is invertible as well.
fn invertible_layer(rng: &mut ChaCha8Rng, spec: &GtSpec, shape: Shape) -> Result<(BSplineTransform, usize)> {
    let mut last_residual = f64::INFINITY;
    for attempt in 1..=DEFORM2_MAX_ATTEMPTS {
        let layer = random_bspline(rng, spec.deform_spacing, shape, spec.deform_amplitude)?;
        let folded = (0..voxel_count(shape))
            .into_par_iter()
            .any(|i| layer.jacobian(&voxel_center(shape, i)).determinant() <= 0.0);
        if folded {
            continue;
        }
        match Transform::BSpline(layer.clone()).invert(DEFORM2_MAX_RESIDUAL / 10.0, 200) {
            Ok(_) => return Ok((layer, attempt)),
            Err(Error::InversionFailed { residual, .. }) => last_residual = residual,
            Err(e) => return Err(e),
        }
    }
    Err(Error::InversionFailed { residual: last_residual, iterations: DEFORM2_MAX_ATTEMPTS })
}

/// Simulated ground truth `φ` (target → source) for the analytic kinds.
///
/// `solver-real` needs an image pair; see [`crate::register::solver_real_ground_truth`].
pub fn simulate_gt(spec: &GtSpec, shape: Shape) -> Result<GroundTruth> {
    let mut rng = rng::stream(rng::derive(spec.seed, 0x4754), 0);
    let center = domain_center(shape);
    let translation = |rng: &mut ChaCha8Rng| Vec3::from_fn(|a, _| symmetric(rng, spec.translation_fraction * shape[a] as f64));
    match spec.kind {
        GtKind::Translation => {
            let t = Transform::translation(translation(&mut rng))?;
            Ok(GroundTruth { layers: vec![t.clone()], transform: t, attempts: 1 })
        }
        GtKind::Affine => {
            let t = translation(&mut rng);
            let shear = shear_matrix(&mut rng, spec.shear_range);
            let [lo, hi] = spec.scale_range;
            let scale = Mat3::from_diagonal(&Vec3::from_fn(|_, _| uniform(&mut rng, lo, hi)));
            let a = Transform::Affine(AffineTransform::about_center(shear * scale, center, t)?);
            Ok(GroundTruth { layers: vec![a.clone()], transform: a, attempts: 1 })
        }
        GtKind::Deform2 => {
            if shape.iter().any(|&d| d < 32) {
                return Err(Error::invalid("deform2 ground truth needs a grid of at least 32³"));
            }
            let (outer, a) = invertible_layer(&mut rng, spec, shape)?;
            let (inner, b) = invertible_layer(&mut rng, spec, shape)?;
            let (outer, inner) = (Transform::BSpline(outer), Transform::BSpline(inner));
            let composed = compose(&outer, &inner)?;
            Ok(GroundTruth { transform: composed, layers: vec![outer, inner], attempts: a + b })
        }
        GtKind::SolverReal => Err(Error::invalid(
            "solver-real ground truth is estimated from an image pair, not sampled",
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{voxel_count, Point3};

    #[test]
    fn translation_within_one_percent() {
        let spec = PerturbSpec::new(PerturbFamily::Translation, 1000, 1);
        for n in 0..1000 {
            let t = sample_perturbation(&spec, [100, 100, 100], n).unwrap();
            let Transform::Translation(t) = t else { panic!() };
            assert!(t.offset.amax() <= 1.0);
        }
    }

    #[test]
    fn collapsed_ranges_give_identity() {
        let shape = [20, 20, 20];
        let p = Point3::new(3.0, 17.5, 9.0);
        for family in PerturbFamily::ALL {
            let spec = PerturbSpec::new(family, 3, 9).collapsed();
            for n in 0..3 {
                let t = sample_perturbation(&spec, shape, n).unwrap();
                assert_eq!(t.apply(&p), p, "{family:?}");
            }
        }
        let gt = GtSpec { kind: GtKind::Affine, translation_fraction: 0.0, scale_range: [1.0, 1.0], shear_range: 0.0, ..Default::default() };
        assert_eq!(simulate_gt(&gt, shape).unwrap().transform.apply(&p), p);
    }

    #[test]
    fn linear_perturbations_fix_the_center() {
        let shape = [30, 24, 18];
        let c = domain_center(shape);
        for family in [PerturbFamily::Scale, PerturbFamily::Shear] {
            let spec = PerturbSpec::new(family, 50, 2);
            for n in 0..50 {
                let t = sample_perturbation(&spec, shape, n).unwrap();
                assert!((t.apply(&c) - c).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn samples_are_order_independent() {
        let spec = PerturbSpec::new(PerturbFamily::Deform, 10, 5);
        let forward: Vec<_> = (0..10).map(|n| sample_perturbation(&spec, [16; 3], n).unwrap()).collect();
        let backward: Vec<_> = (0..10).rev().map(|n| sample_perturbation(&spec, [16; 3], n).unwrap()).collect();
        assert!(forward.iter().zip(backward.iter().rev()).all(|(a, b)| a == b));
        assert!(sample_perturbation(&spec, [16; 3], 10).is_err());
    }

    #[test]
    fn deform_nodes_respect_strength() {
        let spec = PerturbSpec::new(PerturbFamily::Deform, 20, 3);
        for n in 0..20 {
            let Transform::BSpline(b) = sample_perturbation(&spec, [32; 3], n).unwrap() else { panic!() };
            assert_eq!(b.spacing(), 10);
            assert!(b.coefficients().iter().all(|c| c.amax() <= 12.5 * 0.08));
        }
    }

    #[test]
    fn gt_translation_within_ten_percent() {
        for seed in 0..200 {
            let gt = simulate_gt(&GtSpec { seed, ..Default::default() }, [100, 100, 100]).unwrap();
            let Transform::Translation(t) = gt.transform else { panic!() };
            assert!(t.offset.amax() <= 10.0);
        }
    }

    #[test]
    fn deform2_is_two_layers_with_bounded_displacement() {
        let shape = [32, 32, 32];
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let gt = simulate_gt(&GtSpec { kind: GtKind::Deform2, seed, ..Default::default() }, shape).unwrap();
            assert_eq!(gt.layers.len(), 2);
            assert!(gt.layers.iter().all(|l| matches!(l, Transform::BSpline(_))));
            let Transform::Dense(d) = &gt.transform else { panic!() };
            assert_eq!(d.displacements().len(), voxel_count(shape));
            worst = worst.max(d.displacements().iter().map(|v| v.amax()).fold(0.0, f64::max));
        }
        // The cubic basis is a non-negative partition of unity, so each layer
        // moves a point by at most 12.5 voxels per axis.
        assert!(worst <= 2.0 * 12.5, "max displacement {worst}");
    }

    #[test]
    fn deform2_rejects_small_grids() {
        assert!(simulate_gt(&GtSpec { kind: GtKind::Deform2, ..Default::default() }, [16, 32, 32]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]
            #[test]
            fn parameters_stay_in_range(seed in any::<u64>()) {
                let shape = [40, 30, 20];
                let c = domain_center(shape);
                for family in [PerturbFamily::Scale, PerturbFamily::Shear] {
                    let spec = PerturbSpec::new(family, 1000, seed);
                    for n in 0..1000 {
                        let a = sample_perturbation(&spec, shape, n).unwrap().as_affine().unwrap();
                        let m = a.matrix();
                        for r in 0..3 {
                            for col in 0..3 {
                                let v = m[(r, col)];
                                match (family, r == col) {
                                    (PerturbFamily::Scale, true) => prop_assert!((0.9..=1.1).contains(&v)),
                                    (PerturbFamily::Scale, false) => prop_assert_eq!(v, 0.0),
                                    (_, true) => prop_assert_eq!(v, 1.0),
                                    (_, false) => prop_assert!(v.abs() <= 0.02),
                                }
                            }
                        }
                        prop_assert!((a.apply(&c) - c).norm() < 1e-9);
                    }
                }
            }
        }
    }
}
