//! Browser demo. Each export takes plain numbers or arrays and returns a JSON
//! string, so the page needs no bindings beyond the generated glue.

use regcert::geometry::voxel_index;
use regcert::metrics::{error_map, evaluate, risk_coverage};
use regcert::perturb::{simulate_gt, GtKind, GtSpec, PerturbFamily, PerturbSpec};
use regcert::register::{AffineSsd, AffineSsdParams, Call, CovModel, ErrorModel, RegistrationBackend};
use regcert::uncertainty::{estimate_uncertainty, verify_lemma, EstimateOptions, LemmaSetup};
use regcert::volume::{make_phantom, PhantomKind, RoiMask};
use regcert::{Error, Shape, Transform};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_SIZE: usize = 40;
const MAX_SAMPLES: usize = 200;
const CURVE_POINTS: usize = 100;

#[derive(Debug, Serialize)]
pub struct Curve {
    pub coverage: Vec<f64>,
    pub risk: Vec<f64>,
    pub aurc: f64,
    pub oracle_aurc: f64,
    pub random_aurc: f64,
    pub naurc: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct EstimateDemo {
    pub size: usize,
    /// Central axial slice of each volume, row-major `[y][x]`.
    pub source: Vec<f32>,
    pub uncertainty: Vec<f32>,
    pub error: Vec<f32>,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub curve: Curve,
}

#[derive(Debug, Serialize)]
pub struct ScaleCheck {
    /// Closed-form `E[s²] σ² + Var(s) μ²` on the x axis.
    pub expected_xx: f64,
    pub median_rel_error: f64,
    pub mc_bound: f64,
    pub pass: bool,
}

fn family(name: &str) -> Result<PerturbFamily, Error> {
    match name {
        "translation" => Ok(PerturbFamily::Translation),
        "scale" => Ok(PerturbFamily::Scale),
        "shear" => Ok(PerturbFamily::Shear),
        "deform" => Ok(PerturbFamily::Deform),
        other => Err(Error::Config(format!("unknown perturbation family {other:?}"))),
    }
}

fn slice(values: &[f64], shape: Shape) -> Vec<f32> {
    let z = shape[2] / 2;
    (0..shape[1])
        .flat_map(|y| (0..shape[0]).map(move |x| (x, y)))
        .map(|(x, y)| values[voxel_index(shape, x, y, z)] as f32)
        .collect()
}

/// Subsamples the curve to at most `points` entries, keeping the full-coverage end.
fn thin(coverage: &[f64], risk: &[f64], points: usize) -> (Vec<f64>, Vec<f64>) {
    let n = coverage.len();
    let step = n.div_ceil(points).max(1);
    let keep: Vec<usize> = (0..n).filter(|&i| (i + 1) % step == 0 || i + 1 == n).collect();
    (keep.iter().map(|&i| coverage[i]).collect(), keep.iter().map(|&i| risk[i]).collect())
}

/// Translation ground truth on a blob phantom, affine registration, and the
/// perturbation-based uncertainty map.
pub fn estimate_demo(size: usize, family_name: &str, count: usize, seed: u64) -> Result<EstimateDemo, Error> {
    if !(8..=MAX_SIZE).contains(&size) {
        return Err(Error::Config(format!("size must be in 8..={MAX_SIZE}")));
    }
    if count > MAX_SAMPLES {
        return Err(Error::Config(format!("at most {MAX_SAMPLES} samples")));
    }
    let shape = [size; 3];
    let source = make_phantom(shape, PhantomKind::Blobs, seed)?;
    let gt = simulate_gt(&GtSpec { kind: GtKind::Translation, seed: seed ^ 0x9e37, ..GtSpec::default() }, shape)?;
    let target = source.warp(&gt.transform)?;
    let backend = AffineSsd { params: AffineSsdParams::default() };
    let pred = backend.register(&source, &target, &Call::unperturbed(u64::MAX))?;
    let spec = PerturbSpec { family: family(family_name)?, count, seed, ..PerturbSpec::default() };
    let result = estimate_uncertainty(&backend, &source, &target, &spec, EstimateOptions::default())?;

    let mask = RoiMask::full(shape);
    let errors = error_map(&pred.transform, &gt.transform, &mask)?;
    let u = result.root_trace();
    let (summary, c) = evaluate(&errors, &u, 20)?;
    let (coverage, risk) = thin(&c.coverage, &c.risk, CURVE_POINTS);
    let source_values: Vec<f64> = source.data().iter().map(|&v| v as f64).collect();
    Ok(EstimateDemo {
        size,
        source: slice(&source_values, shape),
        uncertainty: slice(&u, shape),
        error: slice(&errors.values, shape),
        pearson: summary.pearson,
        spearman: summary.spearman,
        curve: Curve { coverage, risk, aurc: c.aurc, oracle_aurc: c.oracle_aurc, random_aurc: c.random_aurc, naurc: c.naurc },
    })
}

/// Risk–coverage curve of arbitrary error and uncertainty arrays.
pub fn curve_of(error: &[f64], uncertainty: &[f64]) -> Result<Curve, Error> {
    if error.len() != uncertainty.len() || error.is_empty() {
        return Err(Error::Config("error and uncertainty must be non-empty and equally long".into()));
    }
    let mask = RoiMask::new([error.len(), 1, 1], vec![true; error.len()])?;
    let c = risk_coverage(error, uncertainty, &mask)?;
    let (coverage, risk) = thin(&c.coverage, &c.risk, CURVE_POINTS);
    Ok(Curve { coverage, risk, aurc: c.aurc, oracle_aurc: c.oracle_aurc, random_aurc: c.random_aurc, naurc: c.naurc })
}

/// Oracle check of the scale-perturbation covariance on a small grid.
pub fn scale_check(lo: f64, hi: f64, sigma: f64, mean_x: f64, count: usize, seed: u64) -> Result<ScaleCheck, Error> {
    if count > 20 * MAX_SAMPLES {
        return Err(Error::Config(format!("at most {} samples", 20 * MAX_SAMPLES)));
    }
    let setup = LemmaSetup {
        shape: [10, 10, 10],
        truth: Transform::identity(),
        model: ErrorModel::gaussian([mean_x, 0.0, 0.0], CovModel::Isotropic { variance: sigma * sigma }),
        perturb: PerturbSpec { family: PerturbFamily::Scale, scale_range: [lo, hi], count, seed, ..PerturbSpec::default() },
        oracle_seed: seed.wrapping_add(1),
        roi_margin: 2,
    };
    let r = verify_lemma(&setup)?;
    let e_s2 = if hi > lo { (hi.powi(3) - lo.powi(3)) / (3.0 * (hi - lo)) } else { lo * lo };
    let var_s = (hi - lo).powi(2) / 12.0;
    Ok(ScaleCheck {
        expected_xx: e_s2 * sigma * sigma + var_s * mean_x * mean_x,
        median_rel_error: r.median_rel_error,
        mc_bound: r.mc_bound,
        pass: r.pass,
    })
}

fn to_js<T: Serialize>(r: Result<T, Error>) -> Result<String, JsError> {
    let value = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = estimateDemo)]
pub fn estimate_demo_js(size: usize, family: &str, count: usize, seed: u32) -> Result<String, JsError> {
    to_js(estimate_demo(size, family, count, seed as u64))
}

#[wasm_bindgen(js_name = riskCoverage)]
pub fn risk_coverage_js(error: &[f64], uncertainty: &[f64]) -> Result<String, JsError> {
    to_js(curve_of(error, uncertainty))
}

#[wasm_bindgen(js_name = scaleCheck)]
pub fn scale_check_js(lo: f64, hi: f64, sigma: f64, mean_x: f64, count: usize, seed: u32) -> Result<String, JsError> {
    to_js(scale_check(lo, hi, sigma, mean_x, count, seed as u64))
}
