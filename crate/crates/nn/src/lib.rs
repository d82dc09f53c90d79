//! Minimal reverse-mode automatic differentiation for small convolutional
//! networks: an eager tape ([`Graph`]), the handful of layers a siamese
//! patch encoder needs, softmax / sigmoid cross-entropy, Adam with decoupled
//! weight decay, finite-difference gradient checks and a flat checkpoint
//! format.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`).

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod layers;
pub mod optim;
mod params;
mod scalar;
mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use graph::{sigmoid, softmax_rows, Gradients, Graph, NodeId, Padding};
pub use optim::{Adam, AdamConfig};
pub use params::{he_uniform, Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
