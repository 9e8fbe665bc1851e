//! Differentiable array core for the pooled base caller: tensors, a
//! define-by-run tape, primitive ops, neural network layers, the dynamic
//! pooling layer, CTC-family decoders, and checkpoint I/O.
//!
//! Everything numeric is generic over [`Scalar`] (f32 or f64); the type
//! aliases below fix f32, the type used by the trained models. f64 exists for
//! the finite-difference gradient oracles.

pub mod checkpoint;
pub mod decoders;
pub mod dynpool;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod param;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::{sc, Scalar};
pub use tape::{apply_pending, Ctx, Gradients, Mode, NodeId, Tape};
pub use tensor::Tensor;

/// f32 tensor, the working type for trained models.
pub type Tensor32 = Tensor<f32>;
pub type Tape32 = Tape<f32>;
pub type ParamStore32 = ParamStore<f32>;
