use std::ops::Range;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{elbo_loss, elbo_loss_and_grad, AudioStream, FrameStream, ModelConfig, ModelParams, NoiseSource};

/// Default denominator floor of the relative error. Central differences at
/// `epsilon = 1e-5` on a loss of order 10 carry about `1e-10` of roundoff,
/// so gradients below this floor are judged by absolute error instead.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Objective {
    fn params(&self) -> Vec<f64>;
    fn loss(&self, params: &[f64]) -> Result<f64>;
    fn gradient(&self, params: &[f64]) -> Result<Vec<f64>>;
    /// Named index ranges; coordinates are sampled from every range.
    fn groups(&self) -> Vec<(String, Range<usize>)> {
        vec![("all".to_string(), 0..self.params().len())]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckOptions {
    pub epsilon: f64,
    pub num_coordinates: usize,
    /// Seeds coordinate selection.
    pub seed: u64,
    /// Denominator floor of the relative error; 0 gives the plain ratio.
    pub relative_floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { epsilon: 1e-5, num_coordinates: 200, seed: 0, relative_floor: RELATIVE_ERROR_FLOOR }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateCheck {
    pub index: usize,
    pub group: String,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    pub coordinates: Vec<CoordinateCheck>,
}

impl GradcheckReport {
    /// Largest relative error within each group, in group order.
    pub fn per_group(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for c in &self.coordinates {
            match out.iter_mut().find(|(g, _)| *g == c.group) {
                Some((_, m)) => *m = m.max(c.relative_error),
                None => out.push((c.group.clone(), c.relative_error)),
            }
        }
        out
    }
}

/// `|a - n| / max(|a|, |n|, floor)`, and 0 when both are exactly 0.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

/// Splits `total` coordinates evenly over the groups (at least one each)
/// and samples without replacement inside each group.
fn choose_coordinates(groups: &[(String, Range<usize>)], total: usize, seed: u64) -> Vec<(usize, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = total.div_ceil(groups.len().max(1)).max(1);
    let mut out = Vec::new();
    for (name, range) in groups {
        let k = per.min(range.len());
        let mut picks = sample(&mut rng, range.len(), k).into_vec();
        picks.sort_unstable();
        out.extend(picks.into_iter().map(|i| (range.start + i, name.clone())));
    }
    out
}

/// Compares the analytic gradient with central differences
/// `(L(w + e) - L(w - e)) / 2e` on sampled coordinates.
pub fn gradcheck(objective: &dyn Objective, options: &GradcheckOptions) -> Result<GradcheckReport> {
    if !(options.epsilon > 0.0) || options.num_coordinates == 0 || !(options.relative_floor >= 0.0) {
        return Err(Error::invalid("gradcheck needs a positive epsilon and at least one coordinate"));
    }
    let base = objective.params();
    let l0 = objective.loss(&base)?;
    let l1 = objective.loss(&base)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::ContractViolation(format!("loss is not deterministic in the parameters ({l0} vs {l1})")));
    }
    let grad = objective.gradient(&base)?;
    if grad.len() != base.len() {
        return Err(Error::ContractViolation("gradient length differs from parameter count".into()));
    }
    let mut coordinates = Vec::new();
    let mut max_relative_error = 0.0f64;
    let mut w = base.clone();
    for (index, group) in choose_coordinates(&objective.groups(), options.num_coordinates, options.seed) {
        w[index] = base[index] + options.epsilon;
        let plus = objective.loss(&w)?;
        w[index] = base[index] - options.epsilon;
        let minus = objective.loss(&w)?;
        w[index] = base[index];
        let numeric = (plus - minus) / (2.0 * options.epsilon);
        let analytic = grad[index];
        let relative_error = relative_error(analytic, numeric, options.relative_floor);
        max_relative_error = max_relative_error.max(relative_error);
        coordinates.push(CoordinateCheck { index, group, analytic, numeric, relative_error });
    }
    Ok(GradcheckReport { max_relative_error, coordinates })
}

/// `0.5 * w' A w + b' w` with symmetric `A`.
#[derive(Clone, Debug)]
pub struct QuadraticObjective {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub at: Vec<f64>,
}

impl QuadraticObjective {
    pub fn random(n: usize, seed: u64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let a = (0..n).map(|i| (0..n).map(|j| 0.5 * (m[i][j] + m[j][i])).collect()).collect();
        let b = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let at = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self { a, b, at }
    }
}

impl Objective for QuadraticObjective {
    fn params(&self) -> Vec<f64> {
        self.at.clone()
    }

    fn loss(&self, w: &[f64]) -> Result<f64> {
        let quad: f64 = self.a.iter().zip(w).map(|(row, wi)| wi * row.iter().zip(w).map(|(a, wj)| a * wj).sum::<f64>()).sum();
        Ok(0.5 * quad + self.b.iter().zip(w).map(|(b, wi)| b * wi).sum::<f64>())
    }

    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        Ok(self.a.iter().zip(&self.b).map(|(row, b)| row.iter().zip(w).map(|(a, wj)| a * wj).sum::<f64>() + b).collect())
    }
}

/// The training objective on one sequence in 64-bit, with the latent noise
/// fixed so the loss is a deterministic function of the parameters.
pub struct ModelObjective<'a> {
    pub config: ModelConfig,
    pub params: ModelParams<f64>,
    pub frames: &'a FrameStream,
    pub audio: &'a AudioStream,
    pub noise_seed: u64,
}

impl ModelObjective<'_> {
    fn with(&self, w: &[f64]) -> Result<ModelParams<f64>> {
        let mut p = self.params.clone();
        p.assign_flat(w)?;
        Ok(p)
    }
}

impl Objective for ModelObjective<'_> {
    fn params(&self) -> Vec<f64> {
        self.params.flatten()
    }

    fn loss(&self, w: &[f64]) -> Result<f64> {
        let p = self.with(w)?;
        Ok(elbo_loss(self.frames, self.audio, &p, &self.config, &mut NoiseSource::new(self.noise_seed))?.total)
    }

    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        let p = self.with(w)?;
        let (_, g) = elbo_loss_and_grad(self.frames, self.audio, &p, &self.config, &mut NoiseSource::new(self.noise_seed))?;
        Ok(g.flatten())
    }

    fn groups(&self) -> Vec<(String, Range<usize>)> {
        self.params.group_ranges().into_iter().map(|(g, r)| (g.to_string(), r)).collect()
    }
}

/// Gradient check of the full model on one sequence. Parameters are
/// initialized from `options.seed`, which also fixes the latent noise and
/// the sampled coordinates.
pub fn finite_difference_gradcheck(
    config: &ModelConfig, frames: &FrameStream, audio: &AudioStream, options: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let objective = ModelObjective {
        config: config.clone(),
        params: ModelParams::<f64>::init(config, options.seed)?,
        frames,
        audio,
        noise_seed: options.seed,
    };
    gradcheck(&objective, options)
}

/// The smallest full model used for gradient checks: `D = 2`, `8 x 8`
/// single-channel frames, `T = 3`, hidden widths 8 and `beta = 1` so the
/// KL term contributes gradients of the same order as reconstruction.
/// Frames and audio are uniform random draws from `seed`.
pub fn tiny_fixture(seed: u64) -> Result<(ModelConfig, FrameStream, AudioStream)> {
    use rand::Rng;
    let mut config = ModelConfig::for_frames(8, 8, 1, 4);
    config.latent_dim = 2;
    config.frame_hidden_dim = 8;
    config.audio_hidden_dim = 8;
    config.recurrent_hidden_dim = 8;
    config.beta = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = 3;
    let frames = FrameStream::new(t, 8, 8, 1, (0..t * 64).map(|_| rng.random::<f32>()).collect())?;
    let audio = AudioStream::new(t, 4, (0..t * 4).map(|_| rng.random_range(-1.0f32..1.0)).collect())?;
    Ok((config, frames, audio))
}
