//! Lossy image codec whose entropy model is a transformer.
//!
//! The codec couples a convolutional autoencoder with a transformer
//! entropy model: a hyperprior branch summarizes the latent grid into
//! side information and a masked context branch predicts each latent
//! symbol from its already-decoded neighbours. Both branches use
//! top-k self-attention and a diamond-clipped relative position
//! encoding. Predicted Gaussian parameters drive a byte-oriented
//! range coder, so encode produces a real bitstream and decode
//! reconstructs it exactly, either serially (one entropy-model pass
//! per symbol) or in two checkerboard passes.

pub mod attention;
pub mod coder;
pub mod config;
pub mod entropy;
pub mod error;
pub mod imageio;
pub mod model;
pub mod pipeline;
pub mod position;
pub mod studies;
pub mod tensor;
pub mod trainer;

pub use config::{ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::CodecModel;
pub use tensor::{Scalar, Tensor};
