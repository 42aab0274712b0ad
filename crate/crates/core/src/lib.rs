//! Core library for dialogue response selection: a tape-based reverse-mode
//! autodiff engine, sequential encoders with attention-based matching, and
//! the data, training and evaluation machinery around them.

pub mod checkpoint;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod scorer;
pub mod skipgram;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, ErrorCategory, Result};
pub use tape::{Gradients, Primitive, Tape, TensorRef};
pub use tensor::{Real, Tensor};
