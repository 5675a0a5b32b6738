//! Multi-scale graph embeddings learned by an attention-weighted,
//! adversarially regularized autoencoder.
//!
//! The pipeline: [`graph`] builds the k-step transition matrices, [`attention`]
//! fuses each node's scale vectors and runs the autoencoder, [`adversarial`]
//! shapes the latent codes toward a Gaussian prior, [`trainer`] drives the
//! three-phase optimization and [`evaluation`] scores embeddings by node
//! classification.

pub mod adversarial;
pub mod attention;
pub mod checkpoint;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
