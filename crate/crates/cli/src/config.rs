//! Run configuration: a TOML file merged with command-line flags, fully
//! resolved before any work starts and echoed into each output directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xmodal::eval::EvalOptions;
use xmodal::model::ModelConfig;
use xmodal::synth::CorpusSpec;
use xmodal::train::{GradcheckOptions, TrainConfig};
use xmodal::Error;

use crate::Failure;

pub const ECHO_FILE: &str = "run_config.toml";

/// Model settings that do not follow from the corpus. Frame and audio
/// shapes may be given, but must then agree with the corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub latent_dim: Option<usize>,
    pub frame_hidden_dim: Option<usize>,
    pub audio_hidden_dim: Option<usize>,
    pub recurrent_hidden_dim: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub channels: Option<usize>,
    pub audio_dim: Option<usize>,
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    pub encoder_channels: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    /// Written by the echo; ignored on input.
    pub command: Option<String>,
    pub seed: Option<u64>,
    pub corpus: CorpusSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub gradcheck: GradcheckOptions,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::from(Error::Io { path: path.to_path_buf(), source: e }))?;
        toml::from_str(&text).map_err(|e| crate::usage(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ResolvedConfig {
    pub command: String,
    pub seed: u64,
    pub corpus: CorpusSpec,
    #[serde(skip)]
    pub model_section: ModelSection,
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub gradcheck: GradcheckOptions,
}

impl ResolvedConfig {
    /// The seed comes from the flag, else the file, else the environment,
    /// else 0, and is copied into every section.
    pub fn new(file: FileConfig, flag_seed: Option<u64>, env_seed: Option<u64>) -> Self {
        let seed = flag_seed.or(file.seed).or(env_seed).unwrap_or(0);
        let mut cfg = Self {
            command: String::new(),
            seed,
            corpus: file.corpus,
            model_section: file.model,
            model: None,
            train: file.train,
            eval: file.eval,
            gradcheck: file.gradcheck,
        };
        cfg.corpus.seed = seed;
        cfg.train.rng_seed = seed;
        cfg.eval.seed = seed;
        cfg.gradcheck.seed = seed;
        cfg
    }

    pub fn resolve_model(&mut self, height: usize, width: usize, channels: usize, audio_dim: usize) -> Result<(), Failure> {
        let s = &self.model_section;
        for (name, given, actual) in
            [("height", s.height, height), ("width", s.width, width), ("channels", s.channels, channels), ("audio_dim", s.audio_dim, audio_dim)]
        {
            if given.is_some_and(|g| g != actual) {
                return Err(crate::usage(format!("model.{name} = {} does not match the corpus ({actual})", given.unwrap())));
            }
        }
        let mut m = ModelConfig::for_frames(height, width, channels, audio_dim);
        if let Some(v) = s.latent_dim {
            m.latent_dim = v;
        }
        if let Some(v) = s.frame_hidden_dim {
            m.frame_hidden_dim = v;
        }
        if let Some(v) = s.audio_hidden_dim {
            m.audio_hidden_dim = v;
        }
        if let Some(v) = s.recurrent_hidden_dim {
            m.recurrent_hidden_dim = v;
        }
        if let Some(v) = s.lambda {
            m.lambda = v;
        }
        if let Some(v) = s.beta {
            m.beta = v;
        }
        if let Some(v) = &s.encoder_channels {
            m.encoder_channels = v.clone();
        }
        self.model = Some(m);
        Ok(())
    }
}

/// Writes the resolved configuration as `run_config.toml` in `dir`.
pub fn echo_config(dir: &Path, cfg: &mut ResolvedConfig, command: &str) -> Result<(), Failure> {
    cfg.command = command.to_string();
    let text = toml::to_string(cfg).map_err(|e| crate::usage(format!("cannot encode configuration: {e}")))?;
    fs::create_dir_all(dir).map_err(|e| Failure::from(Error::Io { path: dir.to_path_buf(), source: e }))?;
    let path = dir.join(ECHO_FILE);
    fs::write(&path, text).map_err(|e| Failure::from(Error::Io { path, source: e }))
}
