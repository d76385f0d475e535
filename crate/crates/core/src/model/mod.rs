//! The cross-modal recurrent variational sequence model.

mod config;
mod elbo;
mod forward;
mod generate;
mod params;
mod streams;

pub use config::ModelConfig;
pub use elbo::{accumulate_grad, elbo_loss, elbo_loss_and_grad, posterior_kl, reconstruct, LossReport, NoiseSource};
pub use forward::{
    decode_frame, encode_audio, encode_frame, initial_decoder_state, run_posterior_chain, ChainState, DecoderState,
    FeatureMap, PosteriorSequence, SkipStack,
};
pub use generate::{audio_posteriors, generate, generate_with_noise, GenerationResult};
pub use params::{AudioEncoder, Decoder, FrameEncoder, ModelParams, PosteriorChain, UpLevel, PARAM_GROUPS};
pub use streams::{AudioStream, FrameStream};
