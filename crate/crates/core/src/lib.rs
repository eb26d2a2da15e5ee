//! Diffusion-ODE sampling with dynamic compensation of the model-output
//! buffer and cascade polynomial regression of the compensation ratios.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below fix the common double-precision instantiation.

pub mod config;
pub mod cpr;
pub mod dc;
mod error;
pub mod eval;
pub mod model;
mod scalar;
pub mod schedule;
pub mod solver;

pub use error::{Error, RemoteError, Result};
pub use scalar::{mean_sq_diff, Scalar};

pub type NoiseSchedule64 = schedule::NoiseSchedule<f64>;
pub type TimeGrid64 = schedule::TimeGrid<f64>;
pub type GaussianMixture64 = model::GaussianMixture<f64>;
pub type ModelOutput64 = model::ModelOutput<f64>;
pub type SamplerConfig64 = solver::SamplerConfig<f64>;
pub type Trajectory64 = solver::Trajectory<f64>;
pub type CompensationSchedule64 = dc::CompensationSchedule<f64>;
pub type SearchConfig64 = dc::SearchConfig<f64>;
pub type CprCoefficients64 = cpr::CprCoefficients<f64>;

pub type NoiseSchedule32 = schedule::NoiseSchedule<f32>;
pub type TimeGrid32 = schedule::TimeGrid<f32>;
pub type GaussianMixture32 = model::GaussianMixture<f32>;
pub type SamplerConfig32 = solver::SamplerConfig<f32>;
pub type CompensationSchedule32 = dc::CompensationSchedule<f32>;
