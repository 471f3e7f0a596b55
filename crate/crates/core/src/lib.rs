//! Counseling-session graphs, graph-transformer strategy classification,
//! soft-prompt conditioned response generation and its evaluation.
//!
//! Numerics and statistics are generic over [`numerics::Scalar`]; the models
//! run in `f64`, and the aliases below name the concrete types they use.

pub mod corpus;
pub mod evaluation;
pub mod generator;
pub mod hgt;
pub mod lexicon;
pub mod numerics;
pub mod recommend;
pub mod session_graph;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph64 = numerics::Graph<f64>;
pub type Gradients64 = numerics::Gradients<f64>;
pub type ParamStore64 = numerics::ParamStore<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
