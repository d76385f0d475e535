//! Synthetic talking-face corpus with known generative factors.
//!
//! A scalar driver opens the mouth and is also lifted linearly into the
//! audio features; blinks and a per-sequence head offset are drawn from a
//! separate seed and never reach the audio.

mod corpus;
mod render;
mod signals;

pub use corpus::{
    generate_corpus, lift_seed, load_corpus, synth_sequence, Corpus, CorpusManifest, CorpusSpec, Dataset, Sequence, SequenceSeeds,
    SplitManifest, CORPUS_FORMAT_VERSION, DATA_FILE_MAGIC, MANIFEST_FILE,
};
pub use render::{mouth_area, render_frame, RegionMasks, SceneState, BACKGROUND_LEVEL, FEATURE_LEVEL, HEAD_LEVEL, SUPERSAMPLE};
pub use signals::{
    synth_audio_features, synth_driver, synth_nuisance, AudioLift, DriverSignal, NuisanceTrace, AUDIO_NOISE_STD, BLINK_ONSET_PROB,
    BLINK_STEPS, DRIVER_MAX, DRIVER_MIN, MAX_DRIVER_STEP, MAX_HEAD_OFFSET,
};
