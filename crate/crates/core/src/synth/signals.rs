use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::AudioStream;

/// Largest step-to-step change of a driver signal.
pub const MAX_DRIVER_STEP: f64 = 0.25;
pub const DRIVER_MIN: f64 = 0.05;
pub const DRIVER_MAX: f64 = 0.95;
/// Per-step probability that a blink starts.
pub const BLINK_ONSET_PROB: f64 = 0.15;
/// Number of consecutive closed-eye steps per blink.
pub const BLINK_STEPS: usize = 2;
/// Largest per-sequence head offset, in pixels along each axis.
pub const MAX_HEAD_OFFSET: f64 = 1.5;
pub const AUDIO_NOISE_STD: f64 = 0.01;

/// Mouth-aperture driver, one value per step.
#[derive(Clone, Debug, PartialEq)]
pub struct DriverSignal {
    pub values: Vec<f64>,
}

/// Driver-independent per-sequence nuisance: blink events and head offset.
#[derive(Clone, Debug, PartialEq)]
pub struct NuisanceTrace {
    pub blink: Vec<bool>,
    pub offset: (f64, f64),
}

/// Standard normal draw by the Box-Muller transform, using `libm` so the
/// corpus is bit-identical on every platform.
pub(crate) fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
}

/// Sum of three random-phase sinusoids with periods in `[8, 32]`, mapped
/// affinely into `[0.05, 0.95]` with a gain that bounds every step change by
/// [`MAX_DRIVER_STEP`].
pub fn synth_driver(seed: u64, len: usize) -> Result<DriverSignal> {
    if len < 2 {
        return Err(Error::invalid("driver length must be at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut comps = [(0.0f64, 0.0f64, 0.0f64); 3];
    for c in &mut comps {
        let period = rng.random_range(8.0..=32.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amp = rng.random_range(0.5..=1.0);
        *c = (period, phase, amp);
    }
    let total: f64 = comps.iter().map(|c| c.2).sum();
    // |sin(x + 2pi/P) - sin(x)| <= 2 sin(pi/P)
    let slope: f64 = comps.iter().map(|&(p, _, a)| a / total * 2.0 * libm::sin(std::f64::consts::PI / p)).sum();
    let half_range = 0.5 * (DRIVER_MAX - DRIVER_MIN);
    let gain = half_range.min(0.999 * MAX_DRIVER_STEP / slope);
    let values = (0..len)
        .map(|t| {
            let s: f64 = comps
                .iter()
                .map(|&(p, ph, a)| a / total * libm::sin(std::f64::consts::TAU * t as f64 / p + ph))
                .sum();
            (0.5 + gain * s).clamp(DRIVER_MIN, DRIVER_MAX)
        })
        .collect();
    Ok(DriverSignal { values })
}

/// Blink onsets are Bernoulli per step; a blink keeps the eyes closed for
/// [`BLINK_STEPS`] steps.
pub fn synth_nuisance(seed: u64, len: usize) -> NuisanceTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dx = rng.random_range(-MAX_HEAD_OFFSET..=MAX_HEAD_OFFSET);
    let dy = rng.random_range(-MAX_HEAD_OFFSET..=MAX_HEAD_OFFSET);
    let mut blink = Vec::with_capacity(len);
    let mut remaining = 0usize;
    for _ in 0..len {
        let onset = rng.random::<f64>() < BLINK_ONSET_PROB;
        if remaining == 0 && onset {
            remaining = BLINK_STEPS;
        }
        blink.push(remaining > 0);
        remaining = remaining.saturating_sub(1);
    }
    NuisanceTrace { blink, offset: (dx, dy) }
}

/// Fixed random linear map from the driver window `(d[t-1], d[t], d[t+1])`
/// to `dim` audio features.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioLift {
    pub dim: usize,
    /// `dim x 3`, row-major.
    pub matrix: Vec<f64>,
}

impl AudioLift {
    pub fn from_seed(seed: u64, dim: usize) -> Result<Self> {
        if dim < 4 {
            return Err(Error::invalid("audio feature dimension must be at least 4"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let matrix = (0..dim * 3).map(|_| normal(&mut rng)).collect();
        Ok(Self { dim, matrix })
    }
}

/// `a_t = L (d[t-1], d[t], d[t+1]) + noise`, indices clamped at the edges.
pub fn synth_audio_features(driver: &DriverSignal, lift: &AudioLift, noise_seed: u64, noise_std: f64) -> Result<AudioStream> {
    let d = &driver.values;
    let n = d.len();
    if n == 0 {
        return Err(Error::invalid("empty driver"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut data = Vec::with_capacity(n * lift.dim);
    for t in 0..n {
        let window = [d[t.saturating_sub(1)], d[t], d[(t + 1).min(n - 1)]];
        for row in lift.matrix.chunks_exact(3) {
            let clean = row[0] * window[0] + row[1] * window[1] + row[2] * window[2];
            let noise = if noise_std > 0.0 { noise_std * normal(&mut rng) } else { 0.0 };
            data.push((clean + noise) as f32);
        }
    }
    AudioStream::new(n, lift.dim, data)
}
