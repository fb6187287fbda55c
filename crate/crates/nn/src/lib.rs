//! Minimal reverse-mode automatic differentiation over dense `[C, H, W]`
//! tensors, plus the layers needed by the style translator: reflection-padded
//! convolution, instance and adaptive instance normalization, residual
//! blocks, nearest-neighbour upsampling and fully connected layers.

mod conv;
mod graph;
mod real;
mod tensor;

pub mod gradcheck;
pub mod layers;

pub use graph::{Gradients, Graph, Var};
pub use layers::{
    adaptive_instance_norm, Activation, AdaptiveAffine, Binding, Conv2d, ConvBlock, Linear, Mlp, Norm, Param,
    ParamId, ParamStore, ResBlock, NORM_EPS,
};
pub use real::Real;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
