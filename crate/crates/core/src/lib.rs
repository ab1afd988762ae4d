//! All-or-Here attention: a decoder-only transformer whose heads decide, per
//! token, between full causal attention and sliding-window attention.
//!
//! The crate is self-contained: a small tape-based autodiff engine, the
//! routed attention block, a trainable language model, synthetic tasks that
//! separate local from long-range dependencies, and the usage statistics used
//! to study where full attention actually gets switched on.

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod scalar;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
