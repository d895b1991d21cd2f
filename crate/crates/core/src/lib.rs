//! Ego-biased rehearsal trajectory forecasting.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for callers that do not care.

pub mod conditioning;
pub mod data;
pub mod ego;
pub mod error;
pub mod evaluation;
pub mod final_predictor;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type ParameterStore32 = numerics::ParameterStore<f32>;
pub type ParameterStore64 = numerics::ParameterStore<f64>;
pub type RehearsalSet32 = ego::RehearsalSet<f32>;
pub type RehearsalSet64 = ego::RehearsalSet<f64>;
pub type ConditioningBundle32 = conditioning::ConditioningBundle<f32>;
pub type ConditioningBundle64 = conditioning::ConditioningBundle<f64>;
pub type FinalPrediction32 = final_predictor::FinalPrediction<f32>;
pub type FinalPrediction64 = final_predictor::FinalPrediction<f64>;
