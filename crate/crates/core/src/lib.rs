//! Hierarchical graph information bottleneck for multi-behavior
//! recommendation.
//!
//! The numerical core is generic over the scalar type ([`Scalar`] is
//! implemented for `f32` and `f64`); the aliases below fix it for the
//! common cases. Training, checkpoints and the command-line tool use `f64`.

pub mod checkpoint;
pub mod data;
pub mod diff;
pub mod error;
pub mod eval;
pub mod graph;
pub mod gre;
pub mod model;
pub mod objectives;
pub mod report;
pub mod scalar;
pub mod trainer;

pub use error::{HgibError, Result};
pub use graph::{BehaviorSchema, InteractionGraph, WeightedAdjacency};
pub use scalar::Scalar;

pub type Matrix = diff::DenseMatrix<f64>;
pub type Matrix32 = diff::DenseMatrix<f32>;
pub type Params = model::HgibParams<f64>;
pub type Params32 = model::HgibParams<f32>;
pub type Outputs = model::ForwardOutputs<f64>;
pub type Outputs32 = model::ForwardOutputs<f32>;
