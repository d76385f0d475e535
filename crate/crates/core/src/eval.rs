//! Frame-fidelity metrics and the evaluation protocol.
//!
//! Metrics skip the first frame of every generated stream, which is the
//! conditioning frame copied through rather than a prediction. Images with
//! several channels are scored per channel and averaged.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{generate, FrameStream, ModelConfig, ModelParams, NoiseSource};
use crate::scalar::Scalar;
use crate::synth::Dataset;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const DEFAULT_EVAL_SEQUENCES: usize = 256;
pub const DEFAULT_DIVERSITY_SAMPLES: usize = 5;

/// Peak signal-to-noise ratio of two equally sized buffers, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(x: &[f32], y: &[f32], max_value: f64) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::invalid(format!("psnr: shapes differ ({} vs {} values)", x.len(), y.len())));
    }
    if !(max_value > 0.0) {
        return Err(Error::invalid("psnr: max_value must be positive"));
    }
    let mse = x.iter().zip(y).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_value * max_value / mse).log10()).min(PSNR_CAP_DB))
}

fn check_streams(x: &FrameStream, y: &FrameStream) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::invalid(format!("stream shapes differ: {:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

/// Mean per-frame PSNR over frames `from..T`.
pub fn psnr_stream(x: &FrameStream, y: &FrameStream, max_value: f64, from: usize) -> Result<f64> {
    check_streams(x, y)?;
    if from >= x.len() {
        return Err(Error::invalid("no frames left to score"));
    }
    let vals = (from..x.len()).map(|t| psnr(x.frame(t), y.frame(t), max_value)).collect::<Result<Vec<_>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, w) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *w = (-0.5 * d * d / (SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|w| *w /= s);
    taps
}

/// Separable Gaussian filter keeping only fully covered positions.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, max_value: f64) -> f64 {
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * max_value).powi(2);
    let c2 = (SSIM_K2 * max_value).powi(2);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(x, h, w, &taps);
    let my = filter_valid(y, h, w, &taps);
    let mxx = filter_valid(&prod(x, x), h, w, &taps);
    let myy = filter_valid(&prod(y, y), h, w, &taps);
    let mxy = filter_valid(&prod(x, y), h, w, &taps);
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let vxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    total / n as f64
}

/// Mean structural similarity of two `height x width x channels` images
/// (11x11 Gaussian window, sigma 1.5, K1 0.01, K2 0.03, valid region).
pub fn ssim_with_range(x: &[f32], y: &[f32], height: usize, width: usize, channels: usize, max_value: f64) -> Result<f64> {
    let n = height * width * channels;
    if x.len() != n || y.len() != n {
        return Err(Error::invalid(format!("ssim: expected {n} values, got {} and {}", x.len(), y.len())));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::invalid(format!("ssim: {height}x{width} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    if channels == 0 || !(max_value > 0.0) {
        return Err(Error::invalid("ssim: need at least one channel and a positive max_value"));
    }
    let plane = |img: &[f32], c: usize| (0..height * width).map(|p| img[p * channels + c] as f64).collect::<Vec<_>>();
    let total: f64 = (0..channels).map(|c| ssim_plane(&plane(x, c), &plane(y, c), height, width, max_value)).sum();
    Ok((total / channels as f64).clamp(-1.0, 1.0))
}

/// [`ssim_with_range`] for images normalized to `[0, 1]`.
pub fn ssim(x: &[f32], y: &[f32], height: usize, width: usize, channels: usize) -> Result<f64> {
    ssim_with_range(x, y, height, width, channels, 1.0)
}

/// Mean per-frame SSIM over frames `from..T`.
pub fn ssim_stream(x: &FrameStream, y: &FrameStream, from: usize) -> Result<f64> {
    check_streams(x, y)?;
    if from >= x.len() {
        return Err(Error::invalid("no frames left to score"));
    }
    let vals = (from..x.len())
        .map(|t| ssim(x.frame(t), y.frame(t), x.height(), x.width(), x.channels()))
        .collect::<Result<Vec<_>>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Mean over unordered sample pairs of the per-frame RMS pixel difference,
/// averaged over time.
pub fn diversity_score(samples: &[FrameStream]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid("diversity needs at least two samples"));
    }
    for s in &samples[1..] {
        check_streams(&samples[0], s)?;
    }
    let t = samples[0].len();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let mut per_pair = 0.0;
            for step in 0..t {
                let (a, b) = (samples[i].frame(step), samples[j].frame(step));
                let ms = a.iter().zip(b).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>() / a.len() as f64;
                per_pair += ms.sqrt();
            }
            total += per_pair / t as f64;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEval {
    pub index: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub diversity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub diversity: f64,
    pub num_sequences: usize,
    pub samples_per_sequence: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub per_sequence: Vec<SequenceEval>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// `None` scores `min(256, available)` sequences.
    pub num_sequences: Option<usize>,
    pub samples_per_sequence: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { num_sequences: None, samples_per_sequence: DEFAULT_DIVERSITY_SAMPLES, seed: 0 }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Sequences to score: all of them when `count` covers the split,
/// otherwise a seeded subset in ascending index order.
pub fn select_sequences(available: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= available {
        return (0..available).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, available, count).into_vec();
    idx.sort_unstable();
    idx
}

fn check_compatible(config: &ModelConfig, data: &Dataset) -> Result<()> {
    let s = data.get(0)?;
    let [_, h, w, c] = s.frames.shape();
    if (h, w, c) != (config.height, config.width, config.channels) || s.audio.dim() != config.audio_dim {
        return Err(Error::invalid(format!(
            "corpus frames {h}x{w}x{c} with {} audio features do not match the model ({}x{}x{} with {})",
            s.audio.dim(),
            config.height,
            config.width,
            config.channels,
            config.audio_dim
        )));
    }
    Ok(())
}

/// Generates `samples_per_sequence` streams per selected sequence from its
/// first frame and audio. The first sample is scored against the ground
/// truth and all samples feed the diversity score.
pub fn evaluate_model<S: Scalar>(params: &ModelParams<S>, config: &ModelConfig, data: &Dataset, options: &EvalOptions) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    if options.samples_per_sequence < 2 {
        return Err(Error::invalid("samples_per_sequence must be at least 2"));
    }
    check_compatible(config, data)?;
    let count = options.num_sequences.unwrap_or(DEFAULT_EVAL_SEQUENCES).min(data.len());
    if count == 0 {
        return Err(Error::invalid("num_sequences must be at least 1"));
    }
    let mut per_sequence = Vec::with_capacity(count);
    for index in select_sequences(data.len(), count, options.seed) {
        let seq = data.get(index)?;
        let mut noise = NoiseSource::with_stream(options.seed, index as u64);
        let out = generate(seq.frames.frame(0), &seq.audio, params, config, options.samples_per_sequence, &mut noise)?;
        per_sequence.push(SequenceEval {
            index,
            ssim: ssim_stream(&out.samples[0], &seq.frames, 1)?,
            psnr: psnr_stream(&out.samples[0], &seq.frames, 1.0, 1)?,
            diversity: diversity_score(&out.samples)?,
        });
    }
    Ok(report_from(per_sequence, options, config))
}

fn report_from(per_sequence: Vec<SequenceEval>, options: &EvalOptions, config: &ModelConfig) -> EvalReport {
    let (ssim_mean, ssim_std) = mean_std(&per_sequence.iter().map(|s| s.ssim).collect::<Vec<_>>());
    let (psnr_mean, psnr_std) = mean_std(&per_sequence.iter().map(|s| s.psnr).collect::<Vec<_>>());
    let diversity = per_sequence.iter().map(|s| s.diversity).sum::<f64>() / per_sequence.len() as f64;
    EvalReport {
        ssim_mean,
        ssim_std,
        psnr_mean,
        psnr_std,
        diversity,
        num_sequences: per_sequence.len(),
        samples_per_sequence: options.samples_per_sequence,
        seed: options.seed,
        model: config.clone(),
        per_sequence,
    }
}

/// Scores precomputed streams against ground truth with the same protocol
/// as [`evaluate_model`]; each entry is `(index, samples, truth)`.
pub fn evaluate_streams(
    entries: &[(usize, Vec<FrameStream>, &FrameStream)], config: &ModelConfig, options: &EvalOptions,
) -> Result<EvalReport> {
    if entries.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let mut per_sequence = Vec::with_capacity(entries.len());
    for (index, samples, truth) in entries {
        let first = samples.first().ok_or_else(|| Error::invalid("no samples for a sequence"))?;
        per_sequence.push(SequenceEval {
            index: *index,
            ssim: ssim_stream(first, truth, 1)?,
            psnr: psnr_stream(first, truth, 1.0, 1)?,
            diversity: if samples.len() >= 2 { diversity_score(samples)? } else { 0.0 },
        });
    }
    Ok(report_from(per_sequence, options, config))
}
