//! State-space tracking of inclinometer displacements.
//!
//! Readings are mapped onto a uniform time grid, smoothed with a Kalman/RTS
//! pass whose process covariance is learned by EM, screened for outliers with
//! a Mahalanobis gate and extrapolated with a white-noise-acceleration model.

pub mod anomaly;
pub mod artifacts;
pub mod dataset;
pub mod error;
pub mod filter;
pub mod forecast;
pub mod grid;
mod linalg;
pub mod model;
pub mod pipeline;
pub mod validation;

pub use anomaly::{GateConfig, GateDecision, GateMode};
pub use dataset::{BoreholeSeries, InstrumentCatalog, InstrumentKind, InstrumentSpec, Reading};
pub use error::{Error, ErrorKind, Result};
pub use filter::{EmConfig, SmootherResult};
pub use forecast::{ForecastBundle, KinematicNoiseFit};
pub use grid::{GriddedObservations, Observation};
pub use model::{Axis, ModelMatrices, StateGaussian, StateLayout};
pub use pipeline::{PipelineConfig, SmoothOutcome};
pub use validation::{KlMarginal, ValidationConfig, ValidationReport};
