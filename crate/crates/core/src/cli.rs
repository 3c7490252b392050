//! Commands behind the `regcert` binary. Each reads and writes a flat output
//! directory with fixed file names.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{BackendConfig, ExperimentConfig};
use crate::error::{Error, Result};
use crate::geometry::Transform;
use crate::metrics::{error_map, evaluate, mse_decomposition_check, MetricsSummary, MseReport};
use crate::perturb::{simulate_gt, GroundTruth, GtKind};
use crate::register::{
    solver_real_ground_truth, AffineSsdParams, Call, DemonsParams, Diagnostics, OracleBackend,
};
use crate::uncertainty::{
    decompose_cov, estimate_uncertainty, verify_lemma, EstimateOptions, LemmaKind, LemmaReport, SAMPLE_BATCH,
};
use crate::volume::{make_phantom, read_nifti, read_volume, write_volume, RoiMask, Volume3};

pub const SOURCE: &str = "source.rcv";
pub const TARGET: &str = "target.rcv";
pub const GT_FIELD: &str = "gt.rcv";
pub const GT_JSON: &str = "gt.json";
pub const PRED: &str = "pred.rcv";
pub const U: &str = "u.rcv";
pub const COV: &str = "cov.rcv";
pub const MEAN: &str = "mean.rcv";
pub const ESTIMATE_JSON: &str = "estimate.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const CURVE_CSV: &str = "risk_coverage.csv";
pub const ERRORS: &str = "errors.rcv";
pub const LEMMA_JSON: &str = "lemma_report.json";
pub const CONFIG_ECHO: &str = "config.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn load_image(path: &Path) -> Result<Volume3> {
    let name = path.to_string_lossy();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        read_nifti(path)
    } else {
        read_volume(path)
    }
}

fn prepare(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    write_json(&out.join(CONFIG_ECHO), cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GtRecord {
    pub kind: GtKind,
    pub ground_truth: GroundTruth,
}

/// Writes `source.rcv`, `target.rcv = source ∘ φ`, `gt.rcv` and `gt.json`.
///
/// `import` replaces the phantom (and `inputs.source`) with a NIfTI or RCV1 volume.
pub fn cmd_simulate_pair(cfg: &ExperimentConfig, out: &Path, import: Option<&Path>) -> Result<GtRecord> {
    prepare(out, cfg)?;
    let source_path: Option<PathBuf> = import.map(Path::to_path_buf).or_else(|| cfg.inputs.source.clone());
    let source = match &source_path {
        Some(p) => load_image(p)?,
        None => make_phantom(cfg.phantom.shape, cfg.phantom.kind, cfg.source_seed())?,
    };
    if source.channels() != 1 {
        return Err(Error::Config("source volume must have one channel".into()));
    }
    let shape = source.shape();
    let ground_truth = match cfg.gt.kind {
        GtKind::SolverReal => {
            let other = match &cfg.inputs.other {
                Some(p) => load_image(p)?,
                None => make_phantom(shape, cfg.phantom.kind, cfg.other_seed())?,
            };
            let t = solver_real_ground_truth(&source, &other, &AffineSsdParams::default(), &DemonsParams::default())?;
            GroundTruth { layers: vec![t.clone()], transform: t, attempts: 1 }
        }
        _ => simulate_gt(&cfg.gt, shape)?,
    };
    let target = source.warp(&ground_truth.transform)?;
    write_volume(&source, out.join(SOURCE))?;
    write_volume(&target, out.join(TARGET))?;
    write_volume(&Volume3::from_dense(&ground_truth.transform.render(shape)), out.join(GT_FIELD))?;
    let record = GtRecord { kind: cfg.gt.kind, ground_truth };
    write_json(&out.join(GT_JSON), &record)?;
    Ok(record)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateSidecar {
    pub backend: String,
    pub n: usize,
    pub divisor: String,
    pub seed: u64,
    pub perturb: crate::perturb::PerturbSpec,
    pub deform_strength: f64,
    pub max_inversion_residual: Option<f64>,
    pub diverged_samples: usize,
    pub prediction: Diagnostics,
    /// Largest number of composed samples held in memory at once.
    pub peak_samples: usize,
    pub wall_time_s: f64,
    pub decomposition_written: bool,
}

/// Runs the unperturbed registration (`pred.rcv`) and the uncertainty estimate.
pub fn cmd_estimate(cfg: &ExperimentConfig, out: &Path) -> Result<EstimateSidecar> {
    prepare(out, cfg)?;
    let started = Instant::now();
    let source = read_volume(out.join(SOURCE))?;
    let target = read_volume(out.join(TARGET))?;
    let gt: GtRecord = read_json(&out.join(GT_JSON))?;
    let backend = cfg.backend.build(&gt.ground_truth.transform, cfg.seed);
    // sample nonces are 0..N, so the unperturbed call takes one outside that range
    let pred = backend
        .register(&source, &target, &Call::unperturbed(u64::MAX))
        .map_err(|e| if e.exit_code() == 1 { e } else { Error::Sample { index: usize::MAX, source: Box::new(e) } })?;
    write_volume(&Volume3::from_dense(&pred.transform), out.join(PRED))?;

    let result = estimate_uncertainty(backend.as_ref(), &source, &target, &cfg.perturb, EstimateOptions { unbiased: cfg.unbiased })?;
    write_volume(&result.u, out.join(U))?;
    write_volume(&result.cov_volume(), out.join(COV))?;
    write_volume(&Volume3::from_dense(&result.mean), out.join(MEAN))?;

    let decomposition_written = matches!(cfg.backend, BackendConfig::Oracle { .. });
    if decomposition_written {
        let dec = decompose_cov(backend.as_ref(), &cfg.perturb, target.shape())?;
        for (name, v) in dec.volumes() {
            write_volume(&v, out.join(format!("{name}.rcv")))?;
        }
    }
    let sidecar = EstimateSidecar {
        backend: backend.name().to_string(),
        n: result.n,
        divisor: if cfg.unbiased { "N-1" } else { "N" }.to_string(),
        seed: cfg.seed,
        perturb: cfg.perturb.clone(),
        deform_strength: cfg.perturb.deform_strength,
        max_inversion_residual: result.max_inversion_residual,
        diverged_samples: result.diverged_samples,
        prediction: Diagnostics { log: Vec::new(), ..pred.diagnostics },
        peak_samples: SAMPLE_BATCH.min(result.n),
        wall_time_s: started.elapsed().as_secs_f64(),
        decomposition_written,
    };
    write_json(&out.join(ESTIMATE_JSON), &sidecar)?;
    Ok(sidecar)
}

fn load_mask(cfg: &ExperimentConfig, shape: crate::geometry::Shape) -> Result<RoiMask> {
    match &cfg.metrics.mask {
        Some(p) => {
            let m = RoiMask::from_volume(&read_volume(p)?)?;
            if m.shape() != shape {
                return Err(Error::ShapeMismatch { expected: shape, found: m.shape() });
            }
            Ok(m)
        }
        None => Ok(RoiMask::full(shape)),
    }
}

/// Scores `u.rcv` against the endpoint error of `pred.rcv`.
///
/// Metrics use the error values as stored in `errors.rcv` (32-bit), so the
/// written artifacts reproduce the summary exactly.
pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<MetricsSummary> {
    prepare(out, cfg)?;
    let pred = read_volume(out.join(PRED))?.to_dense()?;
    let gt: GtRecord = read_json(&out.join(GT_JSON))?;
    let u = read_volume(out.join(U))?;
    if u.channels() != 1 || u.shape() != pred.shape() {
        return Err(Error::ShapeMismatch { expected: pred.shape(), found: u.shape() });
    }
    let mask = load_mask(cfg, pred.shape())?;
    let mut errors = error_map(&pred, &gt.ground_truth.transform, &mask)?;
    errors.values.iter_mut().for_each(|v| *v = *v as f32 as f64);
    let uncertainty: Vec<f64> = u.data().iter().map(|&x| x as f64).collect();
    let (summary, curve) = evaluate(&errors, &uncertainty, cfg.metrics.bins)?;
    write_volume(&errors.to_volume(), out.join(ERRORS))?;
    curve.write_csv(BufWriter::new(File::create(out.join(CURVE_CSV))?), cfg.metrics.bins)?;
    write_json(&out.join(METRICS_JSON), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LemmaEntry {
    pub report: LemmaReport,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LemmaCheckReport {
    pub lemma: Vec<LemmaEntry>,
    pub mse: Vec<MseReport>,
    pub pass: bool,
}

/// Oracle checks of the covariance decomposition and the MSE split.
pub fn cmd_lemma_check(cfg: &ExperimentConfig, out: &Path) -> Result<LemmaCheckReport> {
    prepare(out, cfg)?;
    let mut lemma = Vec::new();
    for setup in &cfg.lemma.setups {
        let report = verify_lemma(setup)?;
        let note = match report.kind {
            LemmaKind::Translation | LemmaKind::Affine => Some("exact (no linearization)".to_string()),
            LemmaKind::Deform if report.regime_violation => Some(format!(
                "regime violation: linearization gap {:.3} exceeds the first-order allowance",
                report.linearization_gap
            )),
            LemmaKind::Deform => None,
        };
        lemma.push(LemmaEntry { report, note });
    }
    let mse = cfg
        .lemma
        .mse
        .models
        .iter()
        .enumerate()
        .map(|(k, model)| {
            let o = OracleBackend::new(Transform::identity(), model.clone(), cfg.mse_seed(k));
            mse_decomposition_check(&o, cfg.lemma.mse.draws, cfg.lemma.mse.shape)
        })
        .collect::<Result<Vec<_>>>()?;
    let pass = lemma.iter().all(|e| e.report.pass) && mse.iter().all(|m| m.pass);
    let report = LemmaCheckReport { lemma, mse, pass };
    write_json(&out.join(LEMMA_JSON), &report)?;
    Ok(report)
}
