//! Basis decomposition and pruning of convolutional networks.
//!
//! Every convolution `W` of a network is factorized as `U·Σ·Vᵀ` and replaced
//! by a frozen basis convolution `U` followed by a [`BasisScalingConv`]
//! carrying one trainable factor per basis vector. Scoring those factors
//! lets whole basis vectors, and then output channels, be removed.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). The default
//! type parameter is `f32`; `*64` aliases name the double-precision forms.
//!
//! [`BasisScalingConv`]: graph::BasisScalingConv

pub mod data;
pub mod decomposition;
pub mod engine;
pub mod error;
pub mod factorization;
pub mod graph;
pub mod importance;
pub mod linalg;
pub mod pipeline;
pub mod pruner;
pub mod scalar;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
pub use scalar::{DType, Scalar};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type Matrix64 = linalg::Matrix<f64>;
pub type NetGraph32 = graph::NetGraph<f32>;
pub type NetGraph64 = graph::NetGraph<f64>;
pub type Factorization32 = factorization::WeightFactorization<f32>;
pub type Factorization64 = factorization::WeightFactorization<f64>;
