//! Stochastic audio-to-frame sequence generation with a recurrent
//! variational autoencoder whose frame and audio posteriors are aligned by a
//! per-step KL term.
//!
//! - [`gaussian`]: diagonal-Gaussian KL, sampling and log-density.
//! - [`model`]: encoders, posterior chains, skip-connected decoder,
//!   training objective and generation.
//! - [`train`]: optimizers, the training loop, gradient checking and
//!   checkpoints.
//! - [`synth`]: the synthetic paired face/audio corpus.
//! - [`eval`]: PSNR, SSIM, diversity and the evaluation protocol.

pub mod error;
pub mod eval;
pub mod gaussian;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod synth;
pub mod tensor_io;
pub mod train;

pub use error::{Error, Result};
