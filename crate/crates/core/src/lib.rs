//! Numerical laboratory for large-step SGD: models with hand-written
//! gradients, SGD and its label-noise reformulation, an Euler–Maruyama
//! surrogate, Jacobian-rank and feature-sparsity diagnostics, and an auditor
//! for the bouncing regime of the scalar quadratic model.
//!
//! Everything is generic over [`Real`] (`f32` or `f64`); the aliases below
//! fix the scalar to `f64`, which is what the experiments use.

pub mod calibrate;
pub mod datagen;
pub mod dynamics1d;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod scalar;
pub mod schedules;
pub mod sde;
pub mod trajectory;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Matrix = linalg::Matrix<f64>;
pub type ModelState = models::ModelState<f64>;
pub type Dataset = datagen::Dataset<f64>;
pub type GroundTruth = datagen::GroundTruth<f64>;
pub type Schedule = schedules::Schedule<f64>;
pub type RunConfig = optim::RunConfig<f64>;
pub type TrajectoryLog = trajectory::TrajectoryLog<f64>;
pub type MetricRecord = metrics::MetricRecord<f64>;
pub type MetricSpec = metrics::MetricSpec<f64>;
pub type Thresholds = metrics::Thresholds<f64>;
pub type SdeConfig = sde::SdeConfig<f64>;
pub type QuadParams = dynamics1d::QuadParams<f64>;
pub type StabilityReport = dynamics1d::StabilityReport<f64>;

pub use linalg::RngStream;
pub use models::Arch;
pub use optim::Optimizer;
