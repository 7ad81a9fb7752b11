//! Two-phase coarse/refined training for BERT-style encoders.
//!
//! Phase one trains a relaxed encoder (anchored fast attention plus factorized
//! feed-forward layers); its weights are then multiplied back into a standard
//! encoder that continues training in phase two.

pub mod attention;
pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod feedforward;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
