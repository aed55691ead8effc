//! Toy-scale video-language model with trajectory-to-word attention.
//!
//! Everything is generic over the scalar type ([`Scalar`], implemented for
//! `f32` and `f64`); the aliases below fix the precision.

pub mod alignment;
pub mod attention;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod param;
pub mod rng;
pub mod scalar;
pub mod sequence;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, KeySets, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
