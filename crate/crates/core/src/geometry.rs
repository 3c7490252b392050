//! Spatial transformations in continuous voxel-index space.
//!
//! All math runs in index coordinates: unit spacing, origin at voxel
//! `(0, 0, 0)`, `x` fastest-varying in flat buffers. Physical spacing and
//! origin travel with volumes as metadata only.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Shape = [usize; 3];

pub const DEFAULT_INVERSION_TOL: f64 = 1e-3;
pub const DEFAULT_INVERSION_ITERS: usize = 50;
/// Step halvings tried per Newton update.
const NEWTON_BACKTRACKS: usize = 12;

pub fn voxel_count(shape: Shape) -> usize {
    shape[0] * shape[1] * shape[2]
}

pub fn voxel_index(shape: Shape, x: usize, y: usize, z: usize) -> usize {
    x + shape[0] * (y + shape[1] * z)
}

pub fn voxel_coords(shape: Shape, index: usize) -> [usize; 3] {
    let x = index % shape[0];
    let rest = index / shape[0];
    [x, rest % shape[1], rest / shape[1]]
}

pub fn voxel_center(shape: Shape, index: usize) -> Point3 {
    let [x, y, z] = voxel_coords(shape, index);
    Point3::new(x as f64, y as f64, z as f64)
}

/// Geometric center of the voxel grid, `(shape − 1) / 2`.
pub fn domain_center(shape: Shape) -> Point3 {
    Point3::new(
        (shape[0] as f64 - 1.0) / 2.0,
        (shape[1] as f64 - 1.0) / 2.0,
        (shape[2] as f64 - 1.0) / 2.0,
    )
}

fn is_finite_point(p: &Point3) -> bool {
    p.coords.iter().all(|c| c.is_finite())
}

fn check_shape(shape: Shape) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("shape {shape:?} has an empty axis")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationTransform {
    pub offset: Vec3,
}

impl TranslationTransform {
    pub fn new(offset: Vec3) -> Result<Self> {
        if !offset.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("translation must be finite"));
        }
        Ok(Self { offset })
    }
}

/// `z ↦ A z + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    matrix: Mat3,
    offset: Vec3,
}

impl AffineTransform {
    pub fn new(matrix: Mat3, offset: Vec3) -> Result<Self> {
        if !matrix.iter().chain(offset.iter()).all(|v| v.is_finite()) {
            return Err(Error::invalid("affine entries must be finite"));
        }
        if matrix.determinant().abs() < 1e-12 {
            return Err(Error::invalid("affine matrix is singular"));
        }
        Ok(Self { matrix, offset })
    }

    pub fn identity() -> Self {
        Self { matrix: Mat3::identity(), offset: Vec3::zeros() }
    }

    /// `z ↦ A (z − c) + c + t`: the linear part acts about `center`.
    pub fn about_center(matrix: Mat3, center: Point3, translation: Vec3) -> Result<Self> {
        let offset = center.coords - matrix * center.coords + translation;
        Self::new(matrix, offset)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.matrix
    }

    pub fn offset(&self) -> &Vec3 {
        &self.offset
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.matrix * p.coords + self.offset)
    }

    /// `self ∘ inner`.
    pub fn then_after(&self, inner: &AffineTransform) -> AffineTransform {
        AffineTransform {
            matrix: self.matrix * inner.matrix,
            offset: self.matrix * inner.offset + self.offset,
        }
    }

    pub fn inverse(&self) -> AffineTransform {
        // Invertibility is checked at construction.
        let inv = self.matrix.try_inverse().expect("affine matrix is invertible");
        AffineTransform { matrix: inv, offset: -(inv * self.offset) }
    }
}

/// Cubic B-spline free-form deformation `p ↦ p + Σ β(p) c`.
///
/// Control node `j` along an axis sits at `(j − 1)·spacing`, so the node grid
/// has one ring beyond the domain on the low side and two on the high side.
/// Nodes outside the stored grid carry zero displacement, which makes the
/// transform a compactly supported perturbation of the identity on all of ℝ³.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineTransform {
    spacing: usize,
    domain_shape: Shape,
    grid_shape: Shape,
    coefficients: Vec<Vec3>,
}

fn bspline_basis(u: f64) -> [f64; 4] {
    let v = 1.0 - u;
    let u2 = u * u;
    let u3 = u2 * u;
    [
        v * v * v / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ]
}

fn bspline_basis_derivative(u: f64) -> [f64; 4] {
    let v = 1.0 - u;
    [
        -0.5 * v * v,
        (3.0 * u * u - 4.0 * u) / 2.0,
        (-3.0 * u * u + 2.0 * u + 1.0) / 2.0,
        0.5 * u * u,
    ]
}

impl BSplineTransform {
    /// Control grid extent needed to cover `domain_shape` at `spacing`.
    pub fn grid_shape_for(domain_shape: Shape, spacing: usize) -> Shape {
        domain_shape.map(|d| (d - 1) / spacing + 4)
    }

    pub fn new(spacing: usize, domain_shape: Shape, coefficients: Vec<Vec3>) -> Result<Self> {
        check_shape(domain_shape)?;
        if spacing < 2 {
            return Err(Error::invalid("B-spline spacing must be at least 2 voxels"));
        }
        let grid_shape = Self::grid_shape_for(domain_shape, spacing);
        if coefficients.len() != voxel_count(grid_shape) {
            return Err(Error::invalid(format!(
                "expected {} control displacements for grid {grid_shape:?}, got {}",
                voxel_count(grid_shape),
                coefficients.len()
            )));
        }
        if !coefficients.iter().all(|c| c.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("control displacements must be finite"));
        }
        Ok(Self { spacing, domain_shape, grid_shape, coefficients })
    }

    pub fn from_fn(spacing: usize, domain_shape: Shape, f: impl FnMut(usize) -> Vec3) -> Result<Self> {
        check_shape(domain_shape)?;
        let n = voxel_count(Self::grid_shape_for(domain_shape, spacing.max(1)));
        Self::new(spacing, domain_shape, (0..n).map(f).collect())
    }

    pub fn spacing(&self) -> usize {
        self.spacing
    }

    pub fn domain_shape(&self) -> Shape {
        self.domain_shape
    }

    pub fn grid_shape(&self) -> Shape {
        self.grid_shape
    }

    pub fn coefficients(&self) -> &[Vec3] {
        &self.coefficients
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            coefficients: self.coefficients.iter().map(|c| c * factor).collect(),
            ..self.clone()
        }
    }

    fn cell(&self, p: &Point3) -> ([i64; 3], [f64; 3]) {
        let s = self.spacing as f64;
        let mut cell = [0i64; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let t = p[a] / s;
            let f = t.floor();
            cell[a] = f as i64;
            frac[a] = t - f;
        }
        (cell, frac)
    }

    fn node(&self, cell: [i64; 3], offs: [usize; 3]) -> Option<&Vec3> {
        // Node stored at index j sits at (j - 1) * spacing; cell i uses nodes i-1..=i+2.
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let j = cell[a] + offs[a] as i64;
            if j < 0 || j >= self.grid_shape[a] as i64 {
                return None;
            }
            idx[a] = j as usize;
        }
        Some(&self.coefficients[voxel_index(self.grid_shape, idx[0], idx[1], idx[2])])
    }

    pub fn displacement(&self, p: &Point3) -> Vec3 {
        let (cell, frac) = self.cell(p);
        let bx = bspline_basis(frac[0]);
        let by = bspline_basis(frac[1]);
        let bz = bspline_basis(frac[2]);
        let mut d = Vec3::zeros();
        for (k, wz) in bz.iter().enumerate() {
            for (j, wy) in by.iter().enumerate() {
                let wyz = wy * wz;
                for (i, wx) in bx.iter().enumerate() {
                    if let Some(c) = self.node(cell, [i, j, k]) {
                        d += c * (wx * wyz);
                    }
                }
            }
        }
        d
    }

    /// Analytic Jacobian of `p ↦ p + displacement(p)`.
    pub fn jacobian(&self, p: &Point3) -> Mat3 {
        let (cell, frac) = self.cell(p);
        let b = frac.map(bspline_basis);
        let db = frac.map(bspline_basis_derivative);
        let inv_s = 1.0 / self.spacing as f64;
        let mut jac = Mat3::identity();
        for k in 0..4 {
            for j in 0..4 {
                for i in 0..4 {
                    let Some(c) = self.node(cell, [i, j, k]) else { continue };
                    let grad = Vec3::new(
                        db[0][i] * b[1][j] * b[2][k],
                        b[0][i] * db[1][j] * b[2][k],
                        b[0][i] * b[1][j] * db[2][k],
                    ) * inv_s;
                    jac += c * grad.transpose();
                }
            }
        }
        jac
    }
}

/// Dense displacement field on a voxel grid: `map(y) = y + displacement(y)`.
///
/// Off-grid evaluation interpolates the displacement trilinearly with the
/// lookup point clamped to the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTransform {
    shape: Shape,
    displacement: Vec<Vec3>,
}

impl DenseTransform {
    pub fn new(shape: Shape, displacement: Vec<Vec3>) -> Result<Self> {
        check_shape(shape)?;
        if displacement.len() != voxel_count(shape) {
            return Err(Error::invalid(format!(
                "displacement has {} vectors, shape {shape:?} needs {}",
                displacement.len(),
                voxel_count(shape)
            )));
        }
        if !displacement.iter().all(|d| d.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("displacement must be finite"));
        }
        Ok(Self { shape, displacement })
    }

    pub fn identity(shape: Shape) -> Self {
        Self { shape, displacement: vec![Vec3::zeros(); voxel_count(shape)] }
    }

    /// Samples `f` at every voxel center.
    pub fn from_map(shape: Shape, f: impl Fn(&Point3) -> Point3 + Sync) -> Self {
        let displacement = (0..voxel_count(shape))
            .into_par_iter()
            .map(|i| {
                let y = voxel_center(shape, i);
                f(&y) - y
            })
            .collect();
        Self { shape, displacement }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn displacements(&self) -> &[Vec3] {
        &self.displacement
    }

    /// Mapped position of voxel `index`, without interpolation.
    pub fn at_voxel(&self, index: usize) -> Point3 {
        voxel_center(self.shape, index) + self.displacement[index]
    }

    pub fn displacement_at(&self, p: &Point3) -> Vec3 {
        let s = self.shape;
        let mut base = [0usize; 3];
        let mut next = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let hi = (s[a] - 1) as f64;
            let c = p[a].clamp(0.0, hi);
            let f = c.floor();
            base[a] = f as usize;
            next[a] = (base[a] + 1).min(s[a] - 1);
            frac[a] = c - f;
        }
        let at = |x, y, z| self.displacement[voxel_index(s, x, y, z)];
        let lerp = |a: Vec3, b: Vec3, t: f64| a + (b - a) * t;
        let c00 = lerp(at(base[0], base[1], base[2]), at(next[0], base[1], base[2]), frac[0]);
        let c10 = lerp(at(base[0], next[1], base[2]), at(next[0], next[1], base[2]), frac[0]);
        let c01 = lerp(at(base[0], base[1], next[2]), at(next[0], base[1], next[2]), frac[0]);
        let c11 = lerp(at(base[0], next[1], next[2]), at(next[0], next[1], next[2]), frac[0]);
        lerp(lerp(c00, c10, frac[1]), lerp(c01, c11, frac[1]), frac[2])
    }

    /// Finite-difference Jacobian with unit step; one-sided at the grid edge.
    fn jacobian(&self, p: &Point3) -> Jacobian {
        let mut m = Mat3::identity();
        let mut one_sided = false;
        for a in 0..3 {
            let hi = (self.shape[a] - 1) as f64;
            let mut fwd = *p;
            let mut bwd = *p;
            let mut h = 0.0;
            if p[a] + 1.0 <= hi {
                fwd[a] += 1.0;
                h += 1.0;
            } else {
                one_sided = true;
            }
            if p[a] - 1.0 >= 0.0 {
                bwd[a] -= 1.0;
                h += 1.0;
            } else {
                one_sided = true;
            }
            if h == 0.0 {
                continue;
            }
            let col = (self.displacement_at(&fwd) - self.displacement_at(&bwd)) / h;
            for r in 0..3 {
                m[(r, a)] += col[r];
            }
        }
        Jacobian { matrix: m, one_sided }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Translation(TranslationTransform),
    Affine(AffineTransform),
    BSpline(BSplineTransform),
    Dense(DenseTransform),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jacobian {
    pub matrix: Mat3,
    /// Set when a finite-difference stencil had to fall back to a one-sided
    /// difference at the grid boundary.
    pub one_sided: bool,
}

#[derive(Debug, Clone)]
pub struct Inversion {
    pub transform: Transform,
    /// `max_y ‖t(t⁻¹(y)) − y‖` over the grid (zero for closed-form inverses up to rounding).
    pub residual: f64,
}

impl Transform {
    pub fn identity() -> Self {
        Transform::Translation(TranslationTransform { offset: Vec3::zeros() })
    }

    pub fn translation(offset: Vec3) -> Result<Self> {
        Ok(Transform::Translation(TranslationTransform::new(offset)?))
    }

    pub fn affine(matrix: Mat3, offset: Vec3) -> Result<Self> {
        Ok(Transform::Affine(AffineTransform::new(matrix, offset)?))
    }

    /// The transform as `z ↦ A z + b` when it is translation or affine.
    pub fn as_affine(&self) -> Option<AffineTransform> {
        match self {
            Transform::Translation(t) => Some(AffineTransform { matrix: Mat3::identity(), offset: t.offset }),
            Transform::Affine(a) => Some(a.clone()),
            _ => None,
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Transform::Translation(_) | Transform::Affine(_))
    }

    /// Grid the transform is tied to, if any.
    pub fn grid_shape(&self) -> Option<Shape> {
        match self {
            Transform::BSpline(b) => Some(b.domain_shape),
            Transform::Dense(d) => Some(d.shape),
            _ => None,
        }
    }

    /// `t(p)` without input validation; the hot-loop form of [`Transform::evaluate`].
    pub fn apply(&self, p: &Point3) -> Point3 {
        match self {
            Transform::Translation(t) => p + t.offset,
            Transform::Affine(a) => a.apply(p),
            Transform::BSpline(b) => p + b.displacement(p),
            Transform::Dense(d) => p + d.displacement_at(p),
        }
    }

    pub fn evaluate(&self, p: &Point3) -> Result<Point3> {
        if !is_finite_point(p) {
            return Err(Error::InvalidPoint);
        }
        Ok(self.apply(p))
    }

    pub fn jacobian_at(&self, p: &Point3) -> Jacobian {
        let matrix = match self {
            Transform::Translation(_) => Mat3::identity(),
            Transform::Affine(a) => a.matrix,
            Transform::BSpline(b) => b.jacobian(p),
            Transform::Dense(d) => return d.jacobian(p),
        };
        Jacobian { matrix, one_sided: false }
    }

    /// Samples the transform at every voxel center of `shape`.
    pub fn render(&self, shape: Shape) -> DenseTransform {
        match self {
            Transform::Dense(d) if d.shape == shape => d.clone(),
            _ => DenseTransform::from_map(shape, |p| self.apply(p)),
        }
    }

    /// Displacement field `d` with `t(p) = p + d(p)`, for the iterative variants.
    fn nonlinear_displacement(&self, p: &Point3) -> Vec3 {
        match self {
            Transform::BSpline(b) => b.displacement(p),
            Transform::Dense(d) => d.displacement_at(p),
            other => other.apply(p) - p,
        }
    }

    /// `t⁻¹(p)` for a single point, with the achieved residual `‖t(t⁻¹(p)) − p‖`.
    ///
    /// Linear variants are inverted in closed form; the others use the
    /// fixed-point iteration `w ← −d(p + w)` until the update drops below `tol`,
    /// falling back to damped Newton steps where that iteration stalls.
    pub fn invert_point(&self, p: &Point3, tol: f64, max_iter: usize) -> Result<(Point3, f64)> {
        if !is_finite_point(p) {
            return Err(Error::InvalidPoint);
        }
        if let Some(a) = self.as_affine() {
            let q = a.inverse().apply(p);
            return Ok((q, (a.apply(&q) - p).norm()));
        }
        let (w, residual, _) = self.iterative_inverse(p, tol, max_iter);
        if !(residual <= 10.0 * tol) {
            return Err(Error::InversionFailed { residual, iterations: max_iter });
        }
        Ok((p + w, residual))
    }

    /// Fixed-point iteration, then damped Newton from the best iterate when the
    /// field is not a contraction there. Returns `(w, residual, iterations)` with
    /// `t⁻¹(p) ≈ p + w`.
    fn iterative_inverse(&self, p: &Point3, tol: f64, max_iter: usize) -> (Vec3, f64, usize) {
        let residual_of = |w: &Vec3| (w + self.nonlinear_displacement(&(p + w))).norm();
        let mut w = -self.nonlinear_displacement(p);
        let mut iters = 1;
        while iters < max_iter {
            let next = -self.nonlinear_displacement(&(p + w));
            let step = (next - w).amax();
            w = next;
            iters += 1;
            if step < tol {
                break;
            }
        }
        let mut residual = residual_of(&w);
        if residual <= tol {
            return (w, residual, iters);
        }
        let mut newton_iters = 0;
        while newton_iters < max_iter && residual > tol {
            newton_iters += 1;
            let x = p + w;
            let r = self.apply(&x) - p;
            let Some(inv) = self.jacobian_at(&x).matrix.try_inverse() else { break };
            let dx = inv * r;
            let mut scale = 1.0;
            let mut improved = false;
            for _ in 0..NEWTON_BACKTRACKS {
                let candidate = w - dx * scale;
                let rc = residual_of(&candidate);
                if rc < residual {
                    w = candidate;
                    residual = rc;
                    improved = true;
                    break;
                }
                scale *= 0.5;
            }
            if !improved {
                break;
            }
        }
        (w, residual, iters + newton_iters)
    }

    /// Inverse transform. Translation and affine invert in closed form; B-spline
    /// and dense fields invert as a [`DenseTransform`] on their grid.
    pub fn invert(&self, tol: f64, max_iter: usize) -> Result<Inversion> {
        if tol <= 0.0 || max_iter == 0 {
            return Err(Error::invalid("inversion needs tol > 0 and max_iter > 0"));
        }
        match self {
            Transform::Translation(t) => Ok(Inversion {
                transform: Transform::Translation(TranslationTransform { offset: -t.offset }),
                residual: 0.0,
            }),
            Transform::Affine(a) => {
                let inv = a.inverse();
                let residual = [Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0), a.offset]
                    .iter()
                    .map(|v| (a.apply(&inv.apply(&Point3::from(*v))) - Point3::from(*v)).norm())
                    .fold(0.0, f64::max);
                Ok(Inversion { transform: Transform::Affine(inv), residual })
            }
            Transform::BSpline(_) | Transform::Dense(_) => {
                let shape = self.grid_shape().expect("grid-backed variant");
                let solved: Vec<(Vec3, f64)> = (0..voxel_count(shape))
                    .into_par_iter()
                    .map(|i| {
                        let (w, r, _) = self.iterative_inverse(&voxel_center(shape, i), tol, max_iter);
                        (w, r)
                    })
                    .collect();
                let residual = solved.iter().map(|s| s.1).fold(0.0, f64::max);
                if !(residual <= 10.0 * tol) {
                    return Err(Error::InversionFailed { residual, iterations: max_iter });
                }
                let displacement = solved.into_iter().map(|s| s.0).collect();
                Ok(Inversion {
                    transform: Transform::Dense(DenseTransform { shape, displacement }),
                    residual,
                })
            }
        }
    }
}

/// `outer ∘ inner`.
///
/// Two linear transforms compose in closed form. Anything else is rendered as
/// a dense field on the grid carried by `inner` (or `outer`), evaluating
/// `outer` analytically at `inner(y)`.
pub fn compose(outer: &Transform, inner: &Transform) -> Result<Transform> {
    if let (Some(o), Some(i)) = (outer.as_affine(), inner.as_affine()) {
        if let (Transform::Translation(a), Transform::Translation(b)) = (outer, inner) {
            return Ok(Transform::Translation(TranslationTransform { offset: a.offset + b.offset }));
        }
        return Ok(Transform::Affine(o.then_after(&i)));
    }
    let shape = match (outer.grid_shape(), inner.grid_shape()) {
        (Some(a), Some(b)) if a != b => return Err(Error::ShapeMismatch { expected: b, found: a }),
        (_, Some(s)) | (Some(s), None) => s,
        (None, None) => unreachable!("non-linear transforms carry a grid"),
    };
    Ok(Transform::Dense(compose_on(outer, inner, shape)))
}

/// `outer ∘ inner` sampled on the voxel centers of `shape`.
pub fn compose_on(outer: &Transform, inner: &Transform, shape: Shape) -> DenseTransform {
    if let Transform::Dense(d) = inner {
        if d.shape == shape {
            let displacement = (0..voxel_count(shape))
                .into_par_iter()
                .map(|i| outer.apply(&d.at_voxel(i)) - voxel_center(shape, i))
                .collect();
            return DenseTransform { shape, displacement };
        }
    }
    DenseTransform::from_map(shape, |p| outer.apply(&inner.apply(p)))
}
