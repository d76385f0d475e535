//! Gradient training, checkpoints and finite-difference gradient checks.

mod checkpoint;
mod config;
mod gradcheck;
mod optim;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_path, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{OptimizerKind, Precision, TrainConfig};
pub use gradcheck::{
    finite_difference_gradcheck, gradcheck, relative_error, CoordinateCheck, GradcheckOptions, GradcheckReport, ModelObjective, Objective,
    QuadraticObjective, RELATIVE_ERROR_FLOOR, tiny_fixture,
};
pub use optim::{global_norm, Optimizer, UpdateStats};

use crate::error::{Error, Result};
use crate::model::{accumulate_grad, elbo_loss, ModelConfig, ModelParams, NoiseSource};
use crate::scalar::Scalar;
use crate::synth::Dataset;

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const VALIDATION_LOG_FILE: &str = "validation_log.jsonl";

/// Batch-mean loss terms of one update; `step` counts completed updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Mean per-sequence sums over the validation subset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub kl: f64,
    pub recon: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub validation: Vec<ValidationRecord>,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn totals(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.total).collect()
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Scored every `eval_every` steps and once before the first update.
    pub validation: Option<&'a Dataset>,
    /// Receives the checkpoint and the line-delimited logs.
    pub out_dir: Option<&'a Path>,
    /// Continue from this state instead of a fresh initialization.
    pub resume: Option<Checkpoint>,
    pub on_step: Option<&'a mut dyn FnMut(&StepRecord)>,
    pub on_validation: Option<&'a mut dyn FnMut(&ValidationRecord)>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

/// Trains from a fresh initialization seeded by `rng_seed`.
pub fn train(model_config: &ModelConfig, train_config: &TrainConfig, dataset: &Dataset) -> Result<(ModelParams<f32>, TrainReport)> {
    let out = train_with(model_config, train_config, dataset, TrainOptions::default())?;
    Ok((out.checkpoint.params, out.report))
}

pub fn train_with<'a>(
    model_config: &'a ModelConfig, train_config: &'a TrainConfig, dataset: &'a Dataset, options: TrainOptions<'a>,
) -> Result<TrainOutcome> {
    model_config.validate()?;
    train_config.validate()?;
    check_dataset(model_config, dataset, "training")?;
    if let Some(v) = options.validation {
        check_dataset(model_config, v, "validation")?;
    }
    if let Some(r) = &options.resume {
        if r.config != *model_config {
            return Err(Error::invalid("checkpoint model configuration differs from the requested one"));
        }
        if let Some(o) = &r.optimizer {
            if o.kind != train_config.optimizer {
                return Err(Error::invalid("checkpoint optimizer differs from the requested one"));
            }
        }
    }
    match train_config.precision {
        Precision::F32 => Loop::<f32>::new(model_config, train_config, dataset, options)?.run(),
        Precision::F64 => Loop::<f64>::new(model_config, train_config, dataset, options)?.run(),
    }
}

fn check_dataset(config: &ModelConfig, data: &Dataset, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid(format!("{what} dataset is empty")));
    }
    let first = data.get(0)?;
    let len = first.frames.len();
    for s in data.iter() {
        let [t, h, w, c] = s.frames.shape();
        if t != len || s.audio.len() != t || (h, w, c) != (config.height, config.width, config.channels) || s.audio.dim() != config.audio_dim {
            return Err(Error::invalid(format!("{what} sequences must share T and match the model's frame and audio shapes")));
        }
    }
    Ok(())
}

/// Batch selection and latent noise use a seed separate from
/// initialization, one independent stream per step, so a resumed run draws
/// exactly what an unbroken run would.
fn step_streams(seed: u64, step: usize) -> (ChaCha8Rng, NoiseSource) {
    let data_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    rng.set_stream(2 * step as u64);
    (rng, NoiseSource::with_stream(data_seed, 2 * step as u64 + 1))
}

struct Loop<'a, S: Scalar> {
    config: &'a ModelConfig,
    tc: &'a TrainConfig,
    data: &'a Dataset,
    opts: TrainOptions<'a>,
    params: ModelParams<S>,
    optimizer: Optimizer<S>,
    step: usize,
    last_checkpoint: Option<PathBuf>,
}

fn open_log(dir: &Path, name: &str, append: bool) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(&path).map_err(|e| Error::io(&path, e))?;
    Ok(BufWriter::new(f))
}

fn write_line(w: &mut BufWriter<File>, dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    let line = serde_json::to_string(value).expect("records serialize");
    writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(dir.join(name), e))
}

impl<'a, S: Scalar> Loop<'a, S> {
    fn new(config: &'a ModelConfig, tc: &'a TrainConfig, data: &'a Dataset, mut opts: TrainOptions<'a>) -> Result<Self> {
        let (params, optimizer, step) = match opts.resume.take() {
            Some(ck) => {
                let params: ModelParams<S> = ck.params.cast();
                let optimizer = ck.optimizer.map(|o| o.cast()).unwrap_or_else(|| Optimizer::new(tc.optimizer, &params));
                (params, optimizer, ck.step)
            }
            None => {
                let params = ModelParams::<S>::init(config, tc.rng_seed)?;
                let optimizer = Optimizer::new(tc.optimizer, &params);
                (params, optimizer, 0)
            }
        };
        Ok(Self { config, tc, data, opts, params, optimizer, step, last_checkpoint: None })
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint { config: self.config.clone(), params: self.params.cast(), step: self.step, optimizer: Some(self.optimizer.cast()) }
    }

    fn save(&mut self, dir: &Path) -> Result<PathBuf> {
        let path = checkpoint_path(dir);
        save_checkpoint(&self.checkpoint(), &path)?;
        self.last_checkpoint = Some(path.clone());
        Ok(path)
    }

    fn non_finite(&self) -> Error {
        Error::NonFiniteLoss { step: self.step + 1, last_checkpoint: self.last_checkpoint.clone() }
    }

    fn validate(&self, data: &Dataset) -> Result<ValidationRecord> {
        let n = match self.tc.validation_sequences {
            0 => data.len(),
            k => k.min(data.len()),
        };
        let (mut kl, mut recon) = (0.0, 0.0);
        for i in 0..n {
            let s = data.get(i)?;
            let r = elbo_loss(&s.frames, &s.audio, &self.params, self.config, &mut NoiseSource::with_stream(self.tc.rng_seed, i as u64))?;
            kl += r.kl_sum();
            recon += r.recon_sum();
        }
        Ok(ValidationRecord { step: self.step, kl: kl / n as f64, recon: recon / n as f64 })
    }

    fn update(&mut self) -> Result<StepRecord> {
        let (mut rng, mut noise) = step_streams(self.tc.rng_seed, self.step);
        let b = self.tc.batch_size;
        let scale = S::from_f64(1.0 / b as f64);
        let mut grad = self.params.zeros_like();
        let (mut total, mut recon, mut kl) = (0.0, 0.0, 0.0);
        for _ in 0..b {
            let s = self.data.get(rng.random_range(0..self.data.len()))?;
            let r = match accumulate_grad(&s.frames, &s.audio, &self.params, self.config, &mut noise, &mut grad, scale) {
                Ok(r) => r,
                Err(Error::NumericalFailure { .. }) => return Err(self.non_finite()),
                Err(e) => return Err(e),
            };
            total += r.total / b as f64;
            recon += r.recon_sum() / b as f64;
            kl += r.kl_sum() / b as f64;
        }
        if !total.is_finite() || !grad.all_finite() {
            return Err(self.non_finite());
        }
        self.optimizer.step(&mut self.params, &mut grad, self.tc);
        if !self.params.all_finite() {
            return Err(self.non_finite());
        }
        self.step += 1;
        Ok(StepRecord { step: self.step, total, recon, kl })
    }

    fn run(mut self) -> Result<TrainOutcome> {
        let started = Instant::now();
        let resumed = self.step > 0;
        let dir = self.opts.out_dir;
        let mut train_log = dir.map(|d| open_log(d, TRAIN_LOG_FILE, resumed)).transpose()?;
        let mut val_log = match (dir, self.opts.validation) {
            (Some(d), Some(_)) => Some(open_log(d, VALIDATION_LOG_FILE, resumed)?),
            _ => None,
        };
        let mut report = TrainReport::default();
        let validation = if self.tc.eval_every > 0 { self.opts.validation } else { None };
        let mut record_validation = |this: &mut Self, report: &mut TrainReport| -> Result<()> {
            if let Some(v) = validation {
                let rec = this.validate(v)?;
                if let (Some(w), Some(d)) = (val_log.as_mut(), dir) {
                    write_line(w, d, VALIDATION_LOG_FILE, &rec)?;
                }
                if let Some(cb) = this.opts.on_validation.as_mut() {
                    cb(&rec);
                }
                report.validation.push(rec);
            }
            Ok(())
        };
        if !resumed {
            record_validation(&mut self, &mut report)?;
        }
        while self.step < self.tc.max_steps {
            let rec = self.update()?;
            if let (Some(w), Some(d)) = (train_log.as_mut(), dir) {
                write_line(w, d, TRAIN_LOG_FILE, &rec)?;
            }
            if let Some(cb) = self.opts.on_step.as_mut() {
                cb(&rec);
            }
            report.steps.push(rec);
            if self.tc.eval_every > 0 && self.step % self.tc.eval_every == 0 {
                record_validation(&mut self, &mut report)?;
            }
            if let Some(d) = dir {
                if self.tc.checkpoint_every > 0 && self.step % self.tc.checkpoint_every == 0 {
                    self.save(d)?;
                }
            }
        }
        if let Some(d) = dir {
            report.checkpoint = Some(self.save(d)?);
        }
        report.wall_clock_secs = started.elapsed().as_secs_f64();
        Ok(TrainOutcome { checkpoint: self.checkpoint(), report })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{lift_seed, synth_sequence, AudioLift, CorpusSpec, SequenceSeeds};

    fn setup(n: usize) -> (ModelConfig, Dataset) {
        let spec = CorpusSpec { seed: 1, num_train: n, num_test: 1, sequence_length: 4, height: 16, width: 16, audio_dim: 4 };
        let lift = AudioLift::from_seed(lift_seed(1), 4).unwrap();
        let seqs = (0..n).map(|i| synth_sequence(&spec, SequenceSeeds::derive(1, i as u64), &lift).unwrap()).collect();
        let mut c = ModelConfig::for_frames(16, 16, 1, 4);
        c.latent_dim = 3;
        c.frame_hidden_dim = 8;
        c.audio_hidden_dim = 8;
        c.recurrent_hidden_dim = 8;
        (c, Dataset::new(seqs))
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let (c, d) = setup(2);
        let tc = TrainConfig { learning_rate: 0.0, max_steps: 1, eval_every: 0, ..Default::default() };
        let (p, report) = train(&c, &tc, &d).unwrap();
        assert_eq!(p, ModelParams::<f32>::init(&c, tc.rng_seed).unwrap());
        assert_eq!(report.steps.len(), 1);
    }

    #[test]
    fn runs_are_seed_deterministic() {
        let (c, d) = setup(3);
        let tc = TrainConfig { max_steps: 5, eval_every: 2, ..Default::default() };
        let a = train_with(&c, &tc, &d, TrainOptions { validation: Some(&d), ..Default::default() }).unwrap();
        let b = train_with(&c, &tc, &d, TrainOptions { validation: Some(&d), ..Default::default() }).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.report.steps, b.report.steps);
        assert_eq!(a.report.validation.iter().map(|v| v.step).collect::<Vec<_>>(), vec![0, 2, 4]);
    }

    #[test]
    fn rejects_empty_and_mismatched_data() {
        let (c, d) = setup(1);
        let tc = TrainConfig { max_steps: 1, ..Default::default() };
        assert!(train(&c, &tc, &Dataset::default()).is_err());
        let mut other = c.clone();
        other.audio_dim = 5;
        assert!(train(&other, &tc, &d).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let (c, d) = setup(1);
        let tc = TrainConfig { learning_rate: 1e30, gradient_clip_norm: 0.0, max_steps: 50, eval_every: 0, ..Default::default() };
        match train(&c, &tc, &d) {
            Err(Error::NonFiniteLoss { step, last_checkpoint: None }) => assert!(step >= 1),
            other => panic!("expected a non-finite loss, got {:?}", other.map(|r| r.1.steps.len())),
        }
    }
}
