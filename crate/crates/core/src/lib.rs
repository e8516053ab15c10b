//! PAC-Bayesian generalization bounds for data-dependent random hypothesis
//! sets.
//!
//! The numeric modules ([`problem`], [`dynamics`], [`complexity`],
//! [`bounds`]) are generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix them to `f64`. [`oracle`] and [`harness`] work in `f64`.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod bounds;
pub mod complexity;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod json;
pub mod oracle;
pub mod problem;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type DataPoint = problem::DataPoint<f64>;
pub type DataDistribution = problem::DataDistribution<f64>;
pub type Dataset = problem::Dataset<f64>;
pub type LossModel = problem::LossModel<f64>;
pub type GapSummary = problem::GapSummary<f64>;
pub type SgldConfig = dynamics::SgldConfig<f64>;
pub type Trajectory = dynamics::Trajectory<f64>;
pub type LossMatrix = complexity::LossMatrix<f64>;
pub type DistanceMatrix = complexity::DistanceMatrix<f64>;
pub type CoveringCurve = complexity::CoveringCurve<f64>;
pub type DimensionFit = complexity::DimensionFit<f64>;
pub type RademacherEstimate = complexity::RademacherEstimate<f64>;
pub type BoundReport = bounds::BoundReport<f64>;
pub type Lambda = bounds::Lambda<f64>;
