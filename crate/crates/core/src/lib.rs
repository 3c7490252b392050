//! Test-time registration uncertainty.
//!
//! The source image is perturbed by random transformations, re-registered to
//! the target, and each prediction is composed back into the target frame.
//! The per-voxel spread of the composed predictions is the uncertainty map.
//!
//! Besides the estimator itself the crate carries the machinery needed to
//! check it: an oracle registration backend with a known Gaussian error model,
//! closed-form covariance references, and the error/ranking metrics used to
//! score an uncertainty map against ground truth.

pub mod cli;
pub mod config;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod perturb;
pub mod register;
pub mod rng;
pub mod sym;
pub mod uncertainty;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{
    AffineTransform, BSplineTransform, DenseTransform, Mat3, Point3, Shape, Transform,
    TranslationTransform, Vec3,
};
pub use volume::Volume3;
