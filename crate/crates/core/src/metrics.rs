//! Error maps, correlation, and risk–coverage evaluation.
//!
//! Correlations and nAURC are `None` when undefined (constant input or a
//! degenerate baseline) and serialize as the string `"undefined"`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geometry::{voxel_center, voxel_count, DenseTransform, Shape, Transform};
use crate::register::{oracle_register, OracleBackend, TauFeatures};
use crate::volume::{RoiMask, Volume3};

/// Endpoint error `‖φ̂(y) − φ(y)‖` inside a mask; zero outside.
#[derive(Debug, Clone)]
pub struct ErrorMap {
    pub values: Vec<f64>,
    pub mask: RoiMask,
}

impl ErrorMap {
    pub fn shape(&self) -> Shape {
        self.mask.shape()
    }

    pub fn to_volume(&self) -> Volume3 {
        Volume3::from_records(self.shape(), 1, self.values.iter().copied()).expect("finite error map")
    }
}

pub fn error_map(pred: &DenseTransform, truth: &Transform, mask: &RoiMask) -> Result<ErrorMap> {
    let shape = pred.shape();
    if mask.shape() != shape {
        return Err(Error::ShapeMismatch { expected: shape, found: mask.shape() });
    }
    if let Some(grid) = truth.grid_shape() {
        if grid != shape {
            return Err(Error::ShapeMismatch { expected: shape, found: grid });
        }
    }
    let values = (0..voxel_count(shape))
        .into_par_iter()
        .map(|i| {
            if !mask.contains(i) {
                return 0.0;
            }
            (pred.at_voxel(i) - truth.apply(&voxel_center(shape, i))).norm()
        })
        .collect();
    Ok(ErrorMap { values, mask: mask.clone() })
}

fn masked(values: &[f64], mask: &RoiMask) -> Result<Vec<f64>> {
    if values.len() != voxel_count(mask.shape()) {
        return Err(Error::invalid(format!(
            "field has {} voxels, mask has {}",
            values.len(),
            voxel_count(mask.shape())
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in scalar field"));
    }
    Ok(mask.indices().map(|i| values[i]).collect())
}

fn pearson_raw(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, with ties given their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn check_pair(a: &[f64], b: &[f64], mask: &RoiMask) -> Result<(Vec<f64>, Vec<f64>)> {
    let (a, b) = (masked(a, mask)?, masked(b, mask)?);
    if a.len() < 2 {
        return Err(Error::invalid("correlation needs at least two masked voxels"));
    }
    Ok((a, b))
}

pub fn pearson(a: &[f64], b: &[f64], mask: &RoiMask) -> Result<Option<f64>> {
    let (a, b) = check_pair(a, b, mask)?;
    Ok(pearson_raw(&a, &b))
}

pub fn spearman(a: &[f64], b: &[f64], mask: &RoiMask) -> Result<Option<f64>> {
    let (a, b) = check_pair(a, b, mask)?;
    Ok(pearson_raw(&average_ranks(&a), &average_ranks(&b)))
}

/// Running mean `m ← m + (x − m)/k`, which stays exactly constant on constant input.
#[derive(Default)]
struct RunningMean {
    mean: f64,
    count: usize,
}

impl RunningMean {
    fn push(&mut self, x: f64) -> f64 {
        self.count += 1;
        self.mean += (x - self.mean) / self.count as f64;
        self.mean
    }
}

/// Prefix means of `errors` taken in `order`, and their mean.
fn prefix_risks(errors: &[f64], order: &[usize]) -> (Vec<f64>, f64) {
    let mut prefix = RunningMean::default();
    let mut area = RunningMean::default();
    let risks: Vec<f64> = order
        .iter()
        .map(|&i| {
            let r = prefix.push(errors[i]);
            area.push(r);
            r
        })
        .collect();
    (risks, area.mean)
}

/// Voxel order by ascending key, ties broken by position (the caller's voxel order).
fn ascending(keys: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&i, &j| keys[i].total_cmp(&keys[j]).then(i.cmp(&j)));
    order
}

fn serialize_defined<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_str("undefined"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskCoverageCurve {
    /// `k / M` for `k = 1..=M`.
    pub coverage: Vec<f64>,
    /// Mean error of the `k` lowest-uncertainty voxels.
    pub risk: Vec<f64>,
    /// Uncertainty values in retained order.
    pub sorted_uncertainty: Vec<f64>,
    pub aurc: f64,
    pub oracle_aurc: f64,
    pub random_aurc: f64,
    pub naurc: Option<f64>,
}

/// Relative width below which the random and oracle baselines count as equal.
const DEGENERATE_BASELINE: f64 = 1e-12;

pub fn risk_coverage(error: &[f64], uncertainty: &[f64], mask: &RoiMask) -> Result<RiskCoverageCurve> {
    let e = masked(error, mask)?;
    let u = masked(uncertainty, mask)?;
    let m = e.len();
    let by_u = ascending(&u);
    let (risk, aurc) = prefix_risks(&e, &by_u);
    let (_, oracle_aurc) = prefix_risks(&e, &ascending(&e));
    let mut total = RunningMean::default();
    e.iter().for_each(|&x| {
        total.push(x);
    });
    let random_aurc = total.mean;
    let span = random_aurc - oracle_aurc;
    let naurc = (span > DEGENERATE_BASELINE * random_aurc.abs().max(f64::MIN_POSITIVE))
        .then(|| (aurc - oracle_aurc) / span);
    Ok(RiskCoverageCurve {
        coverage: (1..=m).map(|k| k as f64 / m as f64).collect(),
        risk,
        sorted_uncertainty: by_u.iter().map(|&i| u[i]).collect(),
        aurc,
        oracle_aurc,
        random_aurc,
        naurc,
    })
}

impl RiskCoverageCurve {
    pub fn len(&self) -> usize {
        self.risk.len()
    }

    pub fn is_empty(&self) -> bool {
        self.risk.is_empty()
    }

    /// Mean uncertainty of each of `bins` equal-count bins along the retained order,
    /// repeated for every point in the bin.
    pub fn bin_mean_uncertainty(&self, bins: usize) -> Vec<f64> {
        let m = self.len();
        let bins = bins.clamp(1, m.max(1));
        let bin_of = |k: usize| k * bins / m;
        let mut sums = vec![(0.0, 0usize); bins];
        for (k, &u) in self.sorted_uncertainty.iter().enumerate() {
            let b = &mut sums[bin_of(k)];
            b.0 += u;
            b.1 += 1;
        }
        (0..m).map(|k| {
            let (s, n) = sums[bin_of(k)];
            s / n as f64
        })
        .collect()
    }

    pub fn write_csv(&self, mut w: impl Write, bins: usize) -> Result<()> {
        writeln!(w, "coverage,risk,bin_mean_uncertainty")?;
        for ((c, r), b) in self.coverage.iter().zip(&self.risk).zip(self.bin_mean_uncertainty(bins)) {
            writeln!(w, "{c},{r},{b}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSummary {
    #[serde(serialize_with = "serialize_defined")]
    pub pearson: Option<f64>,
    #[serde(serialize_with = "serialize_defined")]
    pub spearman: Option<f64>,
    pub aurc: f64,
    pub oracle_aurc: f64,
    pub random_aurc: f64,
    #[serde(serialize_with = "serialize_defined")]
    pub naurc: Option<f64>,
    pub mask_size: usize,
    pub mean_error: f64,
    pub bins: usize,
}

/// All ranking and correlation metrics of `uncertainty` against `error`.
pub fn evaluate(error: &ErrorMap, uncertainty: &[f64], bins: usize) -> Result<(MetricsSummary, RiskCoverageCurve)> {
    let mask = &error.mask;
    let curve = risk_coverage(&error.values, uncertainty, mask)?;
    let summary = MetricsSummary {
        pearson: pearson(uncertainty, &error.values, mask)?,
        spearman: spearman(uncertainty, &error.values, mask)?,
        aurc: curve.aurc,
        oracle_aurc: curve.oracle_aurc,
        random_aurc: curve.random_aurc,
        naurc: curve.naurc,
        mask_size: mask.count(),
        mean_error: curve.random_aurc,
        bins,
    };
    Ok((summary, curve))
}

/// Two-sided z for the confidence band of the empirical mean squared error.
pub const MSE_Z: f64 = 2.74;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    pub draws: usize,
    /// Grid means of `‖μ‖² + tr Σ` and of the empirical `(1/M) Σ ‖ε‖²`.
    pub expected: f64,
    pub empirical: f64,
    pub rel_error: f64,
    /// Grid mean of `MSE_Z · √(Var‖ε‖² / M)` with `Var‖ε‖² = 2 tr Σ² + 4 μᵀΣμ`.
    pub bound: f64,
    /// Fraction of voxels whose own mean lies within its band.
    pub voxel_fraction_within: f64,
    pub pass: bool,
}

/// Empirical MSE of the unperturbed oracle against `‖μ‖² + tr Σ`.
pub fn mse_decomposition_check(oracle: &OracleBackend, draws: usize, shape: Shape) -> Result<MseReport> {
    if draws == 0 {
        return Err(Error::invalid("MSE check needs at least one draw"));
    }
    oracle.model.validate(shape)?;
    let id = Transform::identity();
    let truth: Vec<_> = (0..voxel_count(shape)).map(|i| oracle.truth.apply(&voxel_center(shape, i))).collect();
    let mut sums = vec![0.0f64; truth.len()];
    for m in 0..draws {
        let reg = oracle_register(oracle, &id, shape, m as u64)?;
        sums.par_iter_mut().enumerate().for_each(|(i, s)| {
            *s += (reg.transform.at_voxel(i) - truth[i]).norm_squared();
        });
    }
    let features = TauFeatures::of(&id, shape);
    let sigma = oracle.model.cov(&features);
    let n = truth.len() as f64;
    let (mut expected, mut empirical, mut bound, mut within) = (0.0, 0.0, 0.0, 0usize);
    for (i, s) in sums.iter().enumerate() {
        let mu = oracle.model.mean_at(&features, i);
        let e = mu.norm_squared() + sigma.trace();
        let var = 2.0 * (sigma * sigma).trace() + 4.0 * mu.dot(&(sigma * mu));
        let b = MSE_Z * (var / draws as f64).sqrt();
        let got = s / draws as f64;
        within += ((got - e).abs() <= b.max(1e-12 * e.max(1.0))) as usize;
        expected += e;
        empirical += got;
        bound += b;
    }
    let (expected, empirical, bound) = (expected / n, empirical / n, bound / n);
    let rel_error = if expected > 0.0 { (empirical - expected).abs() / expected } else { empirical.abs() };
    Ok(MseReport {
        draws,
        expected,
        empirical,
        rel_error,
        bound,
        voxel_fraction_within: within as f64 / n,
        pass: (empirical - expected).abs() <= bound.max(1e-12 * expected.max(1.0)),
    })
}
