use crate::error::{Error, Result};

/// A `T x H x W x C` frame sequence with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStream {
    len: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl FrameStream {
    pub fn new(len: usize, height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if len == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("frame stream dimensions must be positive"));
        }
        if data.len() != len * height * width * channels {
            return Err(Error::invalid(format!(
                "frame stream data has {} values, expected {len}x{height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("frame values must lie in [0, 1]"));
        }
        Ok(Self { len, height, width, channels, data })
    }

    pub fn from_frames(height: usize, width: usize, channels: usize, frames: &[Vec<f32>]) -> Result<Self> {
        let data = frames.concat();
        Self::new(frames.len(), height, width, channels, data)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.frame_len()..][..self.frame_len()]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.len, self.height, self.width, self.channels]
    }
}

/// Frame-aligned audio feature vectors, `T x A`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioStream {
    len: usize,
    dim: usize,
    data: Vec<f32>,
}

impl AudioStream {
    pub fn new(len: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if len == 0 || dim == 0 {
            return Err(Error::invalid("audio stream dimensions must be positive"));
        }
        if data.len() != len * dim {
            return Err(Error::invalid(format!("audio data has {} values, expected {len}x{dim}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("audio features must be finite"));
        }
        Ok(Self { len, dim, data })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..][..self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Copy with the features at step `t` replaced.
    pub fn with_step(&self, t: usize, values: &[f32]) -> Result<Self> {
        if t >= self.len || values.len() != self.dim {
            return Err(Error::invalid("with_step: index or width mismatch"));
        }
        let mut data = self.data.clone();
        data[t * self.dim..][..self.dim].copy_from_slice(values);
        Self::new(self.len, self.dim, data)
    }
}
