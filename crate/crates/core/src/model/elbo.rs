//! The training objective: per-step reconstruction plus the frame/audio
//! posterior KL, written as a quantity to minimize.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::forward::{backward_sequence, forward_sequence, SequenceTrace};
use super::params::ModelParams;
use super::streams::{AudioStream, FrameStream};
use crate::error::{Error, Result};
use crate::scalar::{compensated_sum, Scalar};

/// Seeded standard-normal stream used for reparameterized sampling.
#[derive(Clone, Debug)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent stream `stream` under `seed`; used to give every
    /// sequence or training step its own noise without chaining.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    pub fn standard_normal<S: Scalar>(&mut self, n: usize) -> Vec<S> {
        (0..n)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut self.rng);
                S::from_f64(e)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// `sum_t lambda * recon_t + beta * kl_t`.
    pub total: f64,
    /// Unweighted `1/2 * ||f_t - f_hat_t||^2` per step.
    pub recon_per_t: Vec<f64>,
    /// Unweighted `KL[q_frame(t) || q_audio(t)]` per step.
    pub kl_per_t: Vec<f64>,
}

impl LossReport {
    pub fn recon_sum(&self) -> f64 {
        self.recon_per_t.iter().sum()
    }

    pub fn kl_sum(&self) -> f64 {
        self.kl_per_t.iter().sum()
    }

    fn from_trace<S: Scalar>(trace: &SequenceTrace<S>, config: &ModelConfig) -> Self {
        let lambda = S::from_f64(config.lambda);
        let beta = S::from_f64(config.beta);
        let total = compensated_sum(trace.recon_per_t.iter().zip(&trace.kl_per_t).flat_map(|(&r, &k)| [lambda * r, beta * k]));
        Self {
            total: total.as_f64(),
            recon_per_t: trace.recon_per_t.iter().map(|v| v.as_f64()).collect(),
            kl_per_t: trace.kl_per_t.iter().map(|v| v.as_f64()).collect(),
        }
    }
}

pub(crate) fn check_pair(frames: &FrameStream, audio: &AudioStream, config: &ModelConfig) -> Result<()> {
    if frames.len() != audio.len() {
        return Err(Error::invalid(format!("frame stream has {} steps but audio has {}", frames.len(), audio.len())));
    }
    if [frames.height(), frames.width(), frames.channels()] != [config.height, config.width, config.channels] {
        return Err(Error::invalid(format!(
            "frames are {}x{}x{}, model expects {}x{}x{}",
            frames.height(), frames.width(), frames.channels(), config.height, config.width, config.channels
        )));
    }
    if audio.dim() != config.audio_dim {
        return Err(Error::invalid(format!("audio has {} features, model expects {}", audio.dim(), config.audio_dim)));
    }
    Ok(())
}

fn trace<S: Scalar>(
    frames: &FrameStream, audio: &AudioStream, params: &ModelParams<S>, config: &ModelConfig, noise: &mut NoiseSource,
) -> Result<SequenceTrace<S>> {
    check_pair(frames, audio, config)?;
    if frames.len() < 2 {
        return Err(Error::invalid("training sequences need at least 2 steps"));
    }
    let t = frames.len();
    let eps = noise.standard_normal::<S>(t * config.latent_dim);
    forward_sequence(params, config, frames.data(), audio.data(), t, &eps)
}

/// Evaluates the objective. Latents are drawn from the frame posterior with
/// noise taken from `noise`.
pub fn elbo_loss<S: Scalar>(
    frames: &FrameStream, audio: &AudioStream, params: &ModelParams<S>, config: &ModelConfig, noise: &mut NoiseSource,
) -> Result<LossReport> {
    let tr = trace(frames, audio, params, config, noise)?;
    Ok(LossReport::from_trace(&tr, config))
}

/// Objective value together with its gradient.
pub fn elbo_loss_and_grad<S: Scalar>(
    frames: &FrameStream, audio: &AudioStream, params: &ModelParams<S>, config: &ModelConfig, noise: &mut NoiseSource,
) -> Result<(LossReport, ModelParams<S>)> {
    let mut grad = params.zeros_like();
    let report = accumulate_grad(frames, audio, params, config, noise, &mut grad, S::ONE)?;
    Ok((report, grad))
}

/// Adds `scale * gradient` into `grad`; returns the unscaled report.
pub fn accumulate_grad<S: Scalar>(
    frames: &FrameStream, audio: &AudioStream, params: &ModelParams<S>, config: &ModelConfig, noise: &mut NoiseSource,
    grad: &mut ModelParams<S>, scale: S,
) -> Result<LossReport> {
    let tr = trace(frames, audio, params, config, noise)?;
    backward_sequence(params, config, &tr, grad, scale);
    Ok(LossReport::from_trace(&tr, config))
}

/// Reconstruction of `frames` through the frame posterior, `T x H x W x C`.
pub fn reconstruct<S: Scalar>(
    frames: &FrameStream, audio: &AudioStream, params: &ModelParams<S>, config: &ModelConfig, noise: &mut NoiseSource,
) -> Result<FrameStream> {
    let tr = trace(frames, audio, params, config, noise)?;
    let data = tr.reconstruction(config).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    FrameStream::new(frames.len(), config.height, config.width, config.channels, data)
}

/// Per-step `KL[q_frame || q_audio]` without sampling-dependent terms.
pub fn posterior_kl<S: Scalar>(
    frames: &FrameStream, audio: &AudioStream, params: &ModelParams<S>, config: &ModelConfig,
) -> Result<Vec<f64>> {
    let tr = trace(frames, audio, params, config, &mut NoiseSource::new(0))?;
    Ok(tr.kl_per_t.iter().map(|v| v.as_f64()).collect())
}
