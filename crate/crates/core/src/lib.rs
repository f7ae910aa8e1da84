//! Minimum-stable-rank architecture search.
//!
//! A cell-based supernet whose edges sum four convolutional candidate
//! operators is trained with every convolution held at a fixed spectral
//! norm. After training, each operator is scored by the stable rank of its
//! last convolution and the discrete architecture keeps, per node, the two
//! incoming edges with the smallest scores.

pub mod data;
pub mod derive;
pub mod error;
pub mod nn;
pub mod rank_table;
pub mod spectral;
pub mod supernet;
pub mod tensor;

pub use error::{Error, ErrorCategory, Result};
pub use tensor::Tensor;
