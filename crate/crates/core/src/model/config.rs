use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shapes and objective weights of the sequence model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub frame_hidden_dim: usize,
    pub audio_hidden_dim: usize,
    pub recurrent_hidden_dim: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub audio_dim: usize,
    /// Weight of the reconstruction term.
    pub lambda: f64,
    /// Weight of the frame/audio posterior KL term.
    pub beta: f64,
    /// Channel width of each strided encoder level, shallow to deep.
    pub encoder_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_frames(32, 32, 1, 8)
    }
}

impl ModelConfig {
    /// Desk-scale defaults for the given frame and audio shapes: four encoder
    /// levels for frames larger than 32 pixels, three otherwise.
    pub fn for_frames(height: usize, width: usize, channels: usize, audio_dim: usize) -> Self {
        let encoder_channels = if height.min(width) > 32 { vec![8, 16, 32, 64] } else { vec![8, 16, 32] };
        Self {
            latent_dim: 16,
            frame_hidden_dim: 128,
            audio_hidden_dim: 64,
            recurrent_hidden_dim: 128,
            height,
            width,
            channels,
            audio_dim,
            lambda: 1.0,
            beta: 1e-6,
            encoder_channels,
        }
    }

    pub fn levels(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Spatial size `(h, w)` after `level` halvings.
    pub fn spatial_at(&self, level: usize) -> (usize, usize) {
        (self.height >> level, self.width >> level)
    }

    /// Length of the flattened deepest feature map.
    pub fn bottleneck_len(&self) -> usize {
        let (h, w) = self.spatial_at(self.levels());
        self.encoder_channels[self.levels() - 1] * h * w
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("model config: {m}")));
        if self.latent_dim == 0 {
            return bad("latent_dim must be >= 1");
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be > 0");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be >= 0");
        }
        if [self.frame_hidden_dim, self.audio_hidden_dim, self.recurrent_hidden_dim, self.channels, self.audio_dim]
            .contains(&0)
        {
            return bad("hidden sizes, channels and audio_dim must be positive");
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return bad("encoder_channels must be non-empty and positive");
        }
        let div = 1usize << self.levels();
        if self.height % div != 0 || self.width % div != 0 || self.height < div || self.width < div {
            return bad(&format!("frame {}x{} not divisible by 2^{}", self.height, self.width, self.levels()));
        }
        Ok(())
    }
}
