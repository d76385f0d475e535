//! Test-time generation: latents come from the audio posterior, the first
//! frame supplies skip features and the decoder's initial state.

use super::config::ModelConfig;
use super::elbo::NoiseSource;
use super::forward::{
    audio_encoder_forward, chain_forward, cnhw_to_frames, decoder_forward, frame_encoder_forward, frames_to_cnhw,
    initial_state_pre, skip_contributions, ChainState, PosteriorSequence,
};
use super::params::ModelParams;
use super::streams::{AudioStream, FrameStream};
use crate::error::{Error, Result};
use crate::gaussian::{kl_divergence, DiagonalGaussian};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationResult {
    pub samples: Vec<FrameStream>,
    /// `K` blocks of `T x D` latent draws.
    pub latents: Vec<Vec<f64>>,
    /// `KL[q_audio(t) || N(0, I)]`, the information the audio posterior
    /// carries at each step.
    pub per_step_kl: Vec<f64>,
}

/// Draws `k` frame streams for one first frame and audio stream.
pub fn generate<S: Scalar>(
    first_frame: &[f32], audio: &AudioStream, params: &ModelParams<S>, config: &ModelConfig, k: usize,
    noise: &mut NoiseSource,
) -> Result<GenerationResult> {
    if k == 0 {
        return Err(Error::invalid("number of samples must be at least 1"));
    }
    let n = audio.len() * config.latent_dim;
    let draws: Vec<Vec<S>> = (0..k).map(|_| noise.standard_normal(n)).collect();
    generate_with_noise(first_frame, audio, params, config, &draws)
}

/// As [`generate`] with explicit `T x D` noise blocks, one per sample.
pub fn generate_with_noise<S: Scalar>(
    first_frame: &[f32], audio: &AudioStream, params: &ModelParams<S>, config: &ModelConfig, noise: &[Vec<S>],
) -> Result<GenerationResult> {
    if first_frame.len() != config.frame_len() || first_frame.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("first frame must match the model shape with values in [0, 1]"));
    }
    if audio.dim() != config.audio_dim {
        return Err(Error::invalid(format!("audio has {} features, model expects {}", audio.dim(), config.audio_dim)));
    }
    if noise.is_empty() {
        return Err(Error::invalid("number of samples must be at least 1"));
    }
    if !params.all_finite() {
        return Err(Error::NumericalFailure { subnetwork: "parameters", detail: "non-finite weights".into() });
    }
    let t = audio.len();
    let d = config.latent_dim;
    let x = frames_to_cnhw::<S>(first_frame, 1, config.height, config.width, config.channels);
    let enc = frame_encoder_forward(&params.frame_encoder, config, x, 1)?;
    let skips = enc.skips(config, 0);
    let contrib = skip_contributions(&params.decoder, config, &skips);
    let init = initial_state_pre(&params.decoder, &enc.emb);

    let enc_a = audio_encoder_forward(&params.audio_encoder, audio.data(), t)?;
    let chain = chain_forward(&params.audio_chain, &enc_a.emb, t, &ChainState::zeros(config.recurrent_hidden_dim), "audio_chain")?;
    let posteriors: PosteriorSequence<S> = chain.posteriors(d)?;
    let prior = DiagonalGaussian::<S>::standard(d)?;
    let per_step_kl = posteriors
        .gaussians
        .iter()
        .map(|g| kl_divergence(g, &prior).map(|v| v.as_f64()))
        .collect::<Result<Vec<_>>>()?;

    let half = S::from_f64(0.5);
    let frame_len = config.frame_len();
    let mut samples = Vec::with_capacity(noise.len());
    let mut latents = Vec::with_capacity(noise.len());
    for eps in noise {
        if eps.len() != t * d {
            return Err(Error::invalid(format!("noise block has {} entries, expected {}", eps.len(), t * d)));
        }
        let z: Vec<S> = (0..t * d).map(|i| chain.mean[i] + (half * chain.log_var[i]).exp() * eps[i]).collect();
        let dec = decoder_forward(&params.decoder, config, &contrib, &init, &z, t)?;
        let mut frames = cnhw_to_frames(&dec.out, config.channels, t, config.height, config.width);
        frames[..frame_len].copy_from_slice(first_frame);
        frames.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        samples.push(FrameStream::new(t, config.height, config.width, config.channels, frames)?);
        latents.push(z.iter().map(|v| v.as_f64()).collect());
    }
    Ok(GenerationResult { samples, latents, per_step_kl })
}

/// Audio-chain posteriors for a stream (no sampling).
pub fn audio_posteriors<S: Scalar>(audio: &AudioStream, params: &ModelParams<S>, config: &ModelConfig) -> Result<PosteriorSequence<S>> {
    let enc_a = audio_encoder_forward(&params.audio_encoder, audio.data(), audio.len())?;
    let chain = chain_forward(&params.audio_chain, &enc_a.emb, audio.len(), &ChainState::zeros(config.recurrent_hidden_dim), "audio_chain")?;
    chain.posteriors(config.latent_dim)
}
