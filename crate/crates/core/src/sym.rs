//! Symmetric 3×3 matrices stored as their upper triangle, and a streaming
//! mean/covariance accumulator for 3-vectors.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

/// Upper triangle `[xx, xy, xz, yy, yz, zz]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Sym3(pub [f64; 6]);

impl Sym3 {
    pub const ZERO: Sym3 = Sym3([0.0; 6]);

    /// Symmetrizes `m` by averaging it with its transpose.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let s = |i: usize, j: usize| 0.5 * (m[(i, j)] + m[(j, i)]);
        Sym3([s(0, 0), s(0, 1), s(0, 2), s(1, 1), s(1, 2), s(2, 2)])
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let [xx, xy, xz, yy, yz, zz] = self.0;
        Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz)
    }

    pub fn outer(v: &Vector3<f64>) -> Self {
        Sym3([
            v.x * v.x,
            v.x * v.y,
            v.x * v.z,
            v.y * v.y,
            v.y * v.z,
            v.z * v.z,
        ])
    }

    pub fn trace(&self) -> f64 {
        self.0[0] + self.0[3] + self.0[5]
    }

    /// Frobenius norm of the full symmetric matrix.
    pub fn frobenius(&self) -> f64 {
        let [xx, xy, xz, yy, yz, zz] = self.0;
        (xx * xx + yy * yy + zz * zz + 2.0 * (xy * xy + xz * xz + yz * yz)).sqrt()
    }

    pub fn add(&self, other: &Sym3) -> Sym3 {
        Sym3(std::array::from_fn(|i| self.0[i] + other.0[i]))
    }

    pub fn sub(&self, other: &Sym3) -> Sym3 {
        Sym3(std::array::from_fn(|i| self.0[i] - other.0[i]))
    }

    pub fn scale(&self, k: f64) -> Sym3 {
        Sym3(self.0.map(|v| v * k))
    }

    /// Smallest eigenvalue.
    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.to_matrix()).eigenvalues.min()
    }

    /// `‖self − reference‖_F / ‖reference‖_F`.
    pub fn relative_error(&self, reference: &Sym3) -> f64 {
        self.sub(reference).frobenius() / reference.frobenius()
    }
}

/// Welford-style accumulator for the mean and covariance of 3-vectors.
///
/// Results depend only on the order in which samples are pushed.
#[derive(Debug, Clone, Copy, Default)]
pub struct CovAccumulator {
    count: u64,
    mean: Vector3<f64>,
    comoment: Sym3,
}

impl CovAccumulator {
    pub fn push(&mut self, x: &Vector3<f64>) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        let delta2 = x - self.mean;
        let c = &mut self.comoment.0;
        c[0] += delta.x * delta2.x;
        c[1] += delta.x * delta2.y;
        c[2] += delta.x * delta2.z;
        c[3] += delta.y * delta2.y;
        c[4] += delta.y * delta2.z;
        c[5] += delta.z * delta2.z;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> Vector3<f64> {
        self.mean
    }

    /// Covariance with divisor `n` (`unbiased = false`) or `n − 1`.
    pub fn covariance(&self, unbiased: bool) -> Sym3 {
        let div = if unbiased { self.count.saturating_sub(1) } else { self.count };
        if div == 0 {
            return Sym3::ZERO;
        }
        self.comoment.scale(1.0 / div as f64)
    }
}
