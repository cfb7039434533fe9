//! Multisize dataset condensation.
//!
//! One synthetic dataset is learned so that every per-class prefix
//! `S[1] ⊂ S[2] ⊂ … ⊂ S[N]` trains a classifier well. Condensation matches
//! network gradients of synthetic and real batches; an extra subset loss is
//! steered toward the most learnable prefix, chosen from feature-distance
//! trends, with the previously chosen prefix frozen when the choice grows.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the type
//! aliases below fix the precision for callers that do not care.

pub mod autodiff;
pub mod condense;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
mod kernels;
pub mod mls;
pub mod models;
pub mod optim;
pub mod persistence;
pub mod scalar;
pub mod seeding;
pub mod tensor;

pub use autodiff::{Gradients, Graph, OpKind, Var};
pub use error::{Error, Result};
pub use kernels::ConvGeom;
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Network32 = models::Network<f32>;
pub type Network64 = models::Network<f64>;
pub type RealDataset32 = datasets::RealDataset<f32>;
pub type RealDataset64 = datasets::RealDataset<f64>;
pub type SyntheticDataset32 = datasets::SyntheticDataset<f32>;
pub type SyntheticDataset64 = datasets::SyntheticDataset<f64>;
