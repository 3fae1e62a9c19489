//! Data-free knowledge distillation engine: a conditional generator
//! synthesizes lower- and multi-resolution images from class embeddings,
//! scored by activation-map and embedding-diversity losses, and a student
//! network is distilled from a frozen teacher on those images under an
//! explicit pixel-budget ledger.
//!
//! The math core is generic over the scalar type: training runs at f32,
//! gradient checking at f64. Budget accounting uses exact rationals.

pub mod diffcore;
pub mod error;
pub mod losses;
pub mod models;
pub mod patchgrid;
pub mod pool;
pub mod trainer;
pub mod rng;
pub mod scalar;
pub mod wire;

pub use diffcore::Tensor;
pub use error::{Error, Result};
pub use rng::SplitMix64;
pub use scalar::{cast, Scalar};

/// Working precision for training.
pub type TrainScalar = f32;
/// Precision for finite-difference gradient checks.
pub type CheckScalar = f64;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Value32 = diffcore::Value<f32>;
pub type Value64 = diffcore::Value<f64>;
