//! Parameter-efficient multimodal adaptation of a frozen decoder
//! transformer: modality-routed SwiGLU adapters, per-head tanh gating of
//! vision value rows, and stage-wise training on a synthetic QA task.

pub mod config;
pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod graph;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod scalar;
pub mod sequence;
pub mod runconfig;
pub mod tensor;
pub mod training;

pub use config::ModelConfig;
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = graph::Graph<f64>;
pub type PillModel = model::PillModel<f64>;
pub type Batch = sequence::Batch<f64>;
pub type ParamStore = params::ParamStore<f64>;
