//! Experiment configuration shared by every command.
//!
//! One JSON file with a section per concern. Missing sections and fields take
//! their defaults, and the resolved configuration is echoed next to every
//! output so runs are self-describing. The global `seed` determines every
//! sub-seed (phantoms, ground truth, perturbations, oracle noise).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Shape;
use crate::perturb::{GtSpec, PerturbFamily, PerturbSpec};
use crate::register::{
    AffineSsd, AffineSsdParams, CovModel, Demons, DemonsParams, ErrorModel, MeanModel, OracleBackend,
    RegistrationBackend, TauFeature, TauScalar,
};
use crate::rng;
use crate::geometry::Transform;
use crate::uncertainty::LemmaSetup;
use crate::volume::PhantomKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub shape: Shape,
    pub kind: PhantomKind,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { shape: [48, 48, 48], kind: PhantomKind::Blobs }
    }
}

/// Backend choice. The oracle's truth is the simulated ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackendConfig {
    Oracle {
        #[serde(default = "ErrorModel::zero")]
        model: ErrorModel,
    },
    AffineSsd {
        #[serde(default)]
        params: AffineSsdParams,
    },
    Demons {
        #[serde(default)]
        params: DemonsParams,
    },
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self::AffineSsd { params: AffineSsdParams::default() }
    }
}

impl BackendConfig {
    /// Builds the backend; `truth` is only used by the oracle.
    pub fn build(&self, truth: &Transform, seed: u64) -> Box<dyn RegistrationBackend> {
        match self {
            Self::Oracle { model } => Box::new(OracleBackend::new(truth.clone(), model.clone(), rng::derive(seed, SEED_ORACLE))),
            Self::AffineSsd { params } => Box::new(AffineSsd { params: params.clone() }),
            Self::Demons { params } => Box::new(Demons { params: params.clone() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Optional RCV1 mask; nonzero voxels are included. Full domain otherwise.
    pub mask: Option<PathBuf>,
    /// Equal-count bins for the `bin_mean_uncertainty` CSV column.
    pub bins: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { mask: None, bins: 20 }
    }
}

/// Pre-existing volumes replacing the phantom pair.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputsConfig {
    /// RCV1 or NIfTI-1 source volume.
    pub source: Option<PathBuf>,
    /// Second volume for `solver-real` ground truth; a second phantom otherwise.
    pub other: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MseCheckConfig {
    pub shape: Shape,
    pub draws: usize,
    pub models: Vec<ErrorModel>,
}

impl Default for MseCheckConfig {
    fn default() -> Self {
        Self {
            shape: [16, 16, 16],
            draws: 2000,
            models: vec![
                ErrorModel::gaussian([0.0; 3], CovModel::Isotropic { variance: 1.0 }),
                ErrorModel::gaussian([2.0, 0.0, 0.0], CovModel::Zero),
                ErrorModel::gaussian([1.0; 3], CovModel::Isotropic { variance: 0.25 }),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LemmaConfig {
    pub setups: Vec<LemmaSetup>,
    pub mse: MseCheckConfig,
}

impl Default for LemmaConfig {
    fn default() -> Self {
        let perturb = |family| PerturbSpec { family, count: 2000, ..PerturbSpec::default() };
        Self {
            setups: vec![
                LemmaSetup {
                    model: ErrorModel::gaussian([0.5, 0.0, 0.0], CovModel::Isotropic { variance: 0.25 }),
                    perturb: perturb(PerturbFamily::Translation),
                    ..LemmaSetup::default()
                },
                LemmaSetup {
                    model: ErrorModel::gaussian([1.0, 0.0, 0.0], CovModel::Isotropic { variance: 0.04 }),
                    perturb: PerturbSpec { scale_range: [0.9, 1.1], ..perturb(PerturbFamily::Scale) },
                    ..LemmaSetup::default()
                },
                LemmaSetup {
                    model: ErrorModel {
                        mean: MeanModel::TauScaled {
                            value: [1.0, 0.5, 0.0],
                            scalar: TauScalar { feature: TauFeature::MeanScale, offset: 0.0, gain: 1.0 },
                        },
                        cov: CovModel::Zero,
                    },
                    perturb: perturb(PerturbFamily::Shear),
                    ..LemmaSetup::default()
                },
            ],
            mse: MseCheckConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub inputs: InputsConfig,
    pub gt: GtSpec,
    pub perturb: PerturbSpec,
    pub backend: BackendConfig,
    /// Divide the covariance by `N − 1` instead of `N`.
    pub unbiased: bool,
    pub metrics: MetricsConfig,
    pub lemma: LemmaConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            phantom: PhantomConfig::default(),
            inputs: InputsConfig::default(),
            gt: GtSpec::default(),
            perturb: PerturbSpec::default(),
            backend: BackendConfig::default(),
            unbiased: false,
            metrics: MetricsConfig::default(),
            lemma: LemmaConfig::default(),
        }
    }
}

const SEED_SOURCE: u64 = 1;
const SEED_OTHER: u64 = 2;
const SEED_GT: u64 = 3;
const SEED_PERTURB: u64 = 4;
const SEED_ORACLE: u64 = 5;
const SEED_LEMMA: u64 = 6;

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Fills every sub-seed from the global seed and checks the sections.
    pub fn resolve(mut self) -> Result<Self> {
        self.gt.seed = rng::derive(self.seed, SEED_GT);
        self.perturb.seed = rng::derive(self.seed, SEED_PERTURB);
        for (k, setup) in self.lemma.setups.iter_mut().enumerate() {
            setup.perturb.seed = rng::derive(rng::derive(self.seed, SEED_LEMMA), 2 * k as u64);
            setup.oracle_seed = rng::derive(rng::derive(self.seed, SEED_LEMMA), 2 * k as u64 + 1);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn source_seed(&self) -> u64 {
        rng::derive(self.seed, SEED_SOURCE)
    }

    pub fn other_seed(&self) -> u64 {
        rng::derive(self.seed, SEED_OTHER)
    }

    pub fn mse_seed(&self, k: usize) -> u64 {
        rng::derive(rng::derive(self.seed, SEED_LEMMA), 1000 + k as u64)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.perturb.validate().map_err(cfg)?;
        if self.phantom.shape.iter().any(|&d| d == 0) {
            return Err(Error::Config("phantom shape must be positive".into()));
        }
        if self.metrics.bins == 0 {
            return Err(Error::Config("metrics.bins must be at least 1".into()));
        }
        for path in [&self.inputs.source, &self.inputs.other, &self.metrics.mask].into_iter().flatten() {
            if !path.exists() {
                return Err(Error::Config(format!("referenced path {} does not exist", path.display())));
            }
        }
        if let BackendConfig::Oracle { model } = &self.backend {
            model.validate(self.phantom.shape).map_err(cfg)?;
        }
        for s in &self.lemma.setups {
            s.perturb.validate().map_err(cfg)?;
            s.model.validate(s.shape).map_err(cfg)?;
        }
        Ok(())
    }
}
