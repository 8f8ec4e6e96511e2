//! Masked vector quantization for images.
//!
//! Two-stage pipeline: a masked VQ autoencoder (stage 1) scores feature-grid
//! positions, keeps only the highest-scoring fraction, quantizes those
//! against a learned codebook, and recovers the full grid with a
//! direction-constrained attention stack before decoding; a pair of stacked
//! causal transformers (stage 2) then models the resulting (code, position)
//! sequences jointly and supports top-k / top-p sampling back into images.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod mqvae;
pub mod nn;
pub mod optim;
pub mod quantizer;
pub mod rng;
pub mod sampler;
pub mod stackformer;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
