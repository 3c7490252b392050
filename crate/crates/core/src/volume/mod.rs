//! Scalar and vector volumes on a voxel grid.

mod io;
mod nifti;
mod phantom;

pub use io::{read_volume, write_volume, MAGIC, VERSION};
pub use nifti::read_nifti;
pub use phantom::{make_phantom, PhantomKind};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{voxel_center, voxel_count, voxel_index, DenseTransform, Point3, Shape, Transform, Vec3};

/// Channel-interleaved `f32` volume, `x` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    shape: Shape,
    channels: usize,
    data: Vec<f32>,
    /// Physical voxel size in mm. Metadata only.
    pub spacing: [f64; 3],
    /// Physical position of voxel (0,0,0) in mm. Metadata only.
    pub origin: [f64; 3],
}

impl Volume3 {
    pub fn new(shape: Shape, channels: usize, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) || channels == 0 {
            return Err(Error::invalid(format!("empty volume: shape {shape:?}, {channels} channels")));
        }
        if data.len() != voxel_count(shape) * channels {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {shape:?} × {channels} channels",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at offset {i}")));
        }
        Ok(Self { shape, channels, data, spacing: [1.0; 3], origin: [0.0; 3] })
    }

    pub fn zeros(shape: Shape, channels: usize) -> Self {
        Self {
            shape,
            channels,
            data: vec![0.0; voxel_count(shape) * channels],
            spacing: [1.0; 3],
            origin: [0.0; 3],
        }
    }

    /// Single-channel volume with `f` evaluated at every voxel center.
    pub fn from_fn(shape: Shape, f: impl Fn(&Point3) -> f64 + Sync) -> Self {
        let data = (0..voxel_count(shape))
            .into_par_iter()
            .map(|i| f(&voxel_center(shape, i)) as f32)
            .collect();
        Self { shape, channels: 1, data, spacing: [1.0; 3], origin: [0.0; 3] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        voxel_count(self.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize, c: usize) -> f32 {
        self.data[voxel_index(self.shape, x, y, z) * self.channels + c]
    }

    pub fn voxel(&self, index: usize, c: usize) -> f32 {
        self.data[index * self.channels + c]
    }

    pub fn with_metadata_of(mut self, other: &Volume3) -> Self {
        self.spacing = other.spacing;
        self.origin = other.origin;
        self
    }

    /// Trilinear sample of channel `c` with clamp-to-edge.
    pub fn sample(&self, p: &Point3, c: usize) -> f64 {
        let s = self.shape;
        let mut base = [0usize; 3];
        let mut next = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let hi = (s[a] - 1) as f64;
            let v = p[a].clamp(0.0, hi);
            let f = v.floor();
            base[a] = f as usize;
            next[a] = (base[a] + 1).min(s[a] - 1);
            frac[a] = v - f;
        }
        let at = |x, y, z| self.get(x, y, z, c) as f64;
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(at(base[0], base[1], base[2]), at(next[0], base[1], base[2]), frac[0]);
        let c10 = lerp(at(base[0], next[1], base[2]), at(next[0], next[1], base[2]), frac[0]);
        let c01 = lerp(at(base[0], base[1], next[2]), at(next[0], base[1], next[2]), frac[0]);
        let c11 = lerp(at(base[0], next[1], next[2]), at(next[0], next[1], next[2]), frac[0]);
        lerp(lerp(c00, c10, frac[1]), lerp(c01, c11, frac[1]), frac[2])
    }

    /// Trilinear sample of every channel.
    pub fn sample_trilinear(&self, p: &Point3) -> Vec<f64> {
        (0..self.channels).map(|c| self.sample(p, c)).collect()
    }

    /// Pull-back warp: `out(y) = self(t(y))` on the grid of `t` (dense) or of `self`.
    pub fn warp(&self, t: &Transform) -> Result<Volume3> {
        let shape = match t {
            Transform::Dense(d) => d.shape(),
            _ => self.shape,
        };
        if let Transform::Dense(d) = t {
            if d.shape() != self.shape {
                return Err(Error::ShapeMismatch { expected: self.shape, found: d.shape() });
            }
        }
        let ch = self.channels;
        let mut data = vec![0.0f32; voxel_count(shape) * ch];
        data.par_chunks_mut(ch).enumerate().for_each(|(i, out)| {
            let q = match t {
                Transform::Dense(d) => d.at_voxel(i),
                _ => t.apply(&voxel_center(shape, i)),
            };
            for (c, o) in out.iter_mut().enumerate() {
                *o = self.sample(&q, c) as f32;
            }
        });
        Ok(Volume3 { shape, channels: ch, data, spacing: self.spacing, origin: self.origin })
    }

    /// Central-difference gradient of channel 0 (one-sided at the edges).
    pub fn gradient(&self) -> Vec<Vec3> {
        let s = self.shape;
        (0..voxel_count(s))
            .into_par_iter()
            .map(|i| {
                let [x, y, z] = crate::geometry::voxel_coords(s, i);
                let pos = [x, y, z];
                let mut g = Vec3::zeros();
                for a in 0..3 {
                    if s[a] < 2 {
                        continue;
                    }
                    let lo = pos[a].saturating_sub(1);
                    let hi = (pos[a] + 1).min(s[a] - 1);
                    let mut pl = pos;
                    let mut ph = pos;
                    pl[a] = lo;
                    ph[a] = hi;
                    let d = self.get(ph[0], ph[1], ph[2], 0) as f64 - self.get(pl[0], pl[1], pl[2], 0) as f64;
                    g[a] = d / (hi - lo) as f64;
                }
                g
            })
            .collect()
    }

    /// Halves every axis (of length ≥ 2) by averaging 2×2×2 blocks. Voxel
    /// `c` of the result is centered at fine coordinate `2c + 0.5`.
    pub fn downsample(&self) -> Volume3 {
        let s = self.shape;
        let out = s.map(|d| (d / 2).max(1));
        let ch = self.channels;
        let mut data = vec![0.0f32; voxel_count(out) * ch];
        data.par_chunks_mut(ch).enumerate().for_each(|(i, o)| {
            let [x, y, z] = crate::geometry::voxel_coords(out, i);
            let mut n = 0.0;
            let mut acc = vec![0.0f64; ch];
            for dz in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (fx, fy, fz) = ((2 * x + dx).min(s[0] - 1), (2 * y + dy).min(s[1] - 1), (2 * z + dz).min(s[2] - 1));
                        for (c, a) in acc.iter_mut().enumerate() {
                            *a += self.get(fx, fy, fz, c) as f64;
                        }
                        n += 1.0;
                    }
                }
            }
            for (o, a) in o.iter_mut().zip(acc) {
                *o = (a / n) as f32;
            }
        });
        Volume3 {
            shape: out,
            channels: ch,
            data,
            spacing: self.spacing.map(|v| v * 2.0),
            origin: self.origin,
        }
    }

    /// `(min, max)` over all values.
    pub fn range(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// 3-channel volume holding the displacement of a dense transform.
    pub fn from_dense(d: &DenseTransform) -> Volume3 {
        let data = d.displacements().iter().flat_map(|v| [v.x as f32, v.y as f32, v.z as f32]).collect();
        Volume3 { shape: d.shape(), channels: 3, data, spacing: [1.0; 3], origin: [0.0; 3] }
    }

    pub fn to_dense(&self) -> Result<DenseTransform> {
        if self.channels != 3 {
            return Err(Error::invalid(format!("displacement volume needs 3 channels, has {}", self.channels)));
        }
        let disp = self
            .data
            .chunks_exact(3)
            .map(|c| Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64))
            .collect();
        DenseTransform::new(self.shape, disp)
    }

    /// Multi-channel volume from per-voxel records of `channels` values.
    pub fn from_records(shape: Shape, channels: usize, records: impl Iterator<Item = f64>) -> Result<Volume3> {
        Volume3::new(shape, channels, records.map(|v| v as f32).collect())
    }
}

/// Region of interest for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMask {
    shape: Shape,
    members: Vec<bool>,
}

impl RoiMask {
    pub fn new(shape: Shape, members: Vec<bool>) -> Result<Self> {
        if members.len() != voxel_count(shape) {
            return Err(Error::invalid("mask length does not match shape"));
        }
        if !members.iter().any(|&m| m) {
            return Err(Error::invalid("mask has no member voxels"));
        }
        Ok(Self { shape, members })
    }

    pub fn full(shape: Shape) -> Self {
        Self { shape, members: vec![true; voxel_count(shape)] }
    }

    /// Voxels at least `margin` voxels from every face.
    pub fn interior(shape: Shape, margin: usize) -> Result<Self> {
        let members = (0..voxel_count(shape))
            .map(|i| {
                let c = crate::geometry::voxel_coords(shape, i);
                (0..3).all(|a| c[a] >= margin && c[a] + margin < shape[a])
            })
            .collect();
        Self::new(shape, members)
    }

    /// Mask from a 1-channel volume: nonzero voxels are members.
    pub fn from_volume(v: &Volume3) -> Result<Self> {
        if v.channels() != 1 {
            return Err(Error::invalid("mask volume must have one channel"));
        }
        Self::new(v.shape(), v.data().iter().map(|&x| x != 0.0).collect())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn contains(&self, index: usize) -> bool {
        self.members[index]
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i)
    }

    pub fn count(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{compose, BSplineTransform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(shape: Shape, seed: u64) -> Volume3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..voxel_count(shape)).map(|_| rng.random::<f32>()).collect();
        Volume3::new(shape, 1, data).unwrap()
    }

    #[test]
    fn sample_at_voxel_center_is_exact() {
        let v = random_volume([5, 6, 7], 0);
        assert_eq!(v.sample(&Point3::new(2.0, 3.0, 4.0), 0), v.get(2, 3, 4, 0) as f64);
    }

    #[test]
    fn sample_midpoint() {
        let mut data = vec![0.0f32; 8];
        data[1] = 1.0;
        let v = Volume3::new([2, 2, 2], 1, data).unwrap();
        assert_eq!(v.sample(&Point3::new(0.5, 0.0, 0.0), 0), 0.5);
    }

    #[test]
    fn sample_matches_nested_lerp_oracle() {
        let v = random_volume([9, 8, 7], 4);
        let lerp = |a: f64, b: f64, t: f64| (1.0 - t) * a + t * b;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let p = [rng.random_range(0.0..8.0), rng.random_range(0.0..7.0), rng.random_range(0.0..6.0)];
            let i = p.map(|c: f64| c.floor() as usize);
            let f = [p[0] - i[0] as f64, p[1] - i[1] as f64, p[2] - i[2] as f64];
            let at = |dx, dy, dz| v.get(i[0] + dx, i[1] + dy, i[2] + dz, 0) as f64;
            let along_x = |dy, dz| lerp(at(0, dy, dz), at(1, dy, dz), f[0]);
            let along_y = |dz| lerp(along_x(0, dz), along_x(1, dz), f[1]);
            let expected = lerp(along_y(0), along_y(1), f[2]);
            assert!((v.sample(&Point3::new(p[0], p[1], p[2]), 0) - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn interpolation_reproduces_affine_functions() {
        let f = |p: &Point3| 0.5 + 0.1 * p.x - 0.05 * p.y + 0.02 * p.z;
        let v = Volume3::from_fn([10, 10, 10], f);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let p = Point3::new(rng.random_range(0.0..9.0), rng.random_range(0.0..9.0), rng.random_range(0.0..9.0));
            assert!((v.sample(&p, 0) - f(&p)).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_warp_is_bit_identical() {
        let v = random_volume([6, 7, 8], 1);
        assert_eq!(v.warp(&Transform::identity()).unwrap(), v);
        let d = Transform::Dense(DenseTransform::identity(v.shape()));
        assert_eq!(v.warp(&d).unwrap(), v);
    }

    #[test]
    fn integer_shift_warp_is_exact() {
        let v = random_volume([12, 6, 6], 2);
        let w = v.warp(&Transform::translation(Vec3::new(3.0, 0.0, 0.0)).unwrap()).unwrap();
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..9 {
                    assert_eq!(w.get(x, y, z, 0), v.get(x + 3, y, z, 0));
                }
            }
        }
    }

    #[test]
    fn integer_shifts_compose_on_doubly_interior_region() {
        let v = random_volume([16, 16, 16], 3);
        let a = Vec3::new(2.0, -1.0, 1.0);
        let b = Vec3::new(-3.0, 2.0, 1.0);
        let twice = v
            .warp(&Transform::translation(a).unwrap())
            .unwrap()
            .warp(&Transform::translation(b).unwrap())
            .unwrap();
        let once = v.warp(&Transform::translation(a + b).unwrap()).unwrap();
        for z in 3..13 {
            for y in 3..13 {
                for x in 3..13 {
                    assert_eq!(twice.get(x, y, z, 0), once.get(x, y, z, 0));
                }
            }
        }
    }

    #[test]
    fn double_warp_tracks_composed_warp_on_smooth_image() {
        let shape = [24, 24, 24];
        let v = make_phantom(shape, PhantomKind::CheckerSmooth, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut mk = || {
            Transform::BSpline(
                BSplineTransform::from_fn(8, shape, |_| {
                    Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                })
                .unwrap(),
            )
        };
        let (t2, t1) = (mk(), mk());
        // warp(warp(v, t2), t1)(y) = v(t2(t1(y)))
        let twice = v.warp(&t2).unwrap().warp(&t1).unwrap();
        let once = v.warp(&compose(&t2, &t1).unwrap()).unwrap();
        let interior = RoiMask::interior(shape, 3).unwrap();
        let diff = interior
            .indices()
            .map(|i| (twice.voxel(i, 0) - once.voxel(i, 0)).abs())
            .fold(0.0f32, f32::max);
        // Calibrated on this phantom: one extra trilinear pass on a field
        // whose curvature is ~ (2π/24·3)² costs at most ~0.03.
        assert!(diff < 0.06, "max difference {diff}");
    }

    #[test]
    fn constructor_rejects_bad_data() {
        assert!(Volume3::new([2, 2, 2], 1, vec![0.0; 7]).is_err());
        assert!(Volume3::new([1, 1, 1], 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn downsample_averages_blocks() {
        let v = Volume3::from_fn([4, 4, 4], |p| p.x);
        let d = v.downsample();
        assert_eq!(d.shape(), [2, 2, 2]);
        assert_eq!(d.get(0, 0, 0, 0), 0.5);
        assert_eq!(d.get(1, 1, 1, 0), 2.5);
    }

    #[test]
    fn dense_volume_round_trip() {
        let t = Transform::translation(Vec3::new(0.5, -0.25, 2.0)).unwrap().render([3, 4, 5]);
        let back = Volume3::from_dense(&t).to_dense().unwrap();
        assert_eq!(back, t);
    }
}
