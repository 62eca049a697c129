//! Graph-network simulators for particle-spring systems: a reverse-mode
//! tape with nested gradients, ODE integrators, graph networks, learned
//! Hamiltonians, data generation, training and evaluation.
//!
//! Numerics are generic over [`scalar::Scalar`] (`f64` and `f32`); the
//! pipeline itself runs in `f64`.

pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod graphnet;
pub mod integrators;
pub mod models;
pub mod physics;
pub mod scalar;
pub mod tensor;
pub mod training;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type SystemConfig64 = physics::SystemConfig<f64>;
pub type State64 = physics::State<f64>;
pub type Trajectory64 = physics::Trajectory<f64>;
pub type ModelParams64 = models::ModelParams<f64>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape32 = autodiff::Tape<f32>;
pub type SystemConfig32 = physics::SystemConfig<f32>;
pub type State32 = physics::State<f32>;
pub type Trajectory32 = physics::Trajectory<f32>;
pub type ModelParams32 = models::ModelParams<f32>;
