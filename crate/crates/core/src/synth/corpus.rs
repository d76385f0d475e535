use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AudioStream, FrameStream};
use crate::tensor_io::{read_tensor, read_u32, write_tensor, write_u32};

use super::render::{render_frame, SceneState};
use super::signals::{synth_audio_features, synth_driver, synth_nuisance, AudioLift, AUDIO_NOISE_STD};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CORPUS_FORMAT_VERSION: u32 = 1;
pub const DATA_FILE_MAGIC: [u8; 4] = *b"XMCD";

/// Independent seeds of one sequence. Driver and nuisance are drawn from
/// separate streams so either can be varied with the other held fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceSeeds {
    pub driver: u64,
    pub nuisance: u64,
    pub audio_noise: u64,
}

impl SequenceSeeds {
    pub fn derive(corpus_seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(corpus_seed);
        rng.set_stream(index);
        Self { driver: rng.next_u64(), nuisance: rng.next_u64(), audio_noise: rng.next_u64() }
    }
}

/// Seed of the corpus-wide audio lift matrix.
pub fn lift_seed(corpus_seed: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(corpus_seed);
    rng.set_stream(u64::MAX);
    rng.next_u64()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub seed: u64,
    pub num_train: usize,
    pub num_test: usize,
    pub sequence_length: usize,
    pub height: usize,
    pub width: usize,
    pub audio_dim: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { seed: 0, num_train: 500, num_test: 64, sequence_length: 16, height: 32, width: 32, audio_dim: 8 }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sequence_length < 2 {
            return Err(Error::invalid("sequence_length must be at least 2"));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::invalid("frames must be at least 16x16"));
        }
        if self.audio_dim < 4 {
            return Err(Error::invalid("audio_dim must be at least 4"));
        }
        if self.num_train == 0 || self.num_test == 0 {
            return Err(Error::invalid("both splits need at least one sequence"));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::invalid("corpus seed must fit in 63 bits"));
        }
        Ok(())
    }
}

/// One synthetic sequence with its ground-truth latent factors.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: FrameStream,
    pub audio: AudioStream,
    pub driver: Vec<f32>,
    pub blink: Vec<bool>,
}

/// Synthesizes one sequence from explicit seeds.
pub fn synth_sequence(spec: &CorpusSpec, seeds: SequenceSeeds, lift: &AudioLift) -> Result<Sequence> {
    spec.validate()?;
    let t = spec.sequence_length;
    let driver = synth_driver(seeds.driver, t)?;
    let nuisance = synth_nuisance(seeds.nuisance, t);
    let mut data = Vec::with_capacity(t * spec.height * spec.width);
    for step in 0..t {
        let state = SceneState { driver: driver.values[step], blink: nuisance.blink[step], offset: nuisance.offset };
        data.extend(render_frame(&state, spec.height, spec.width)?);
    }
    let frames = FrameStream::new(t, spec.height, spec.width, 1, data)?;
    let audio = synth_audio_features(&driver, lift, seeds.audio_noise, AUDIO_NOISE_STD)?;
    Ok(Sequence {
        frames,
        audio,
        driver: driver.values.iter().map(|&v| v as f32).collect(),
        blink: nuisance.blink,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub file: String,
    pub num_sequences: usize,
    /// Byte offset of each sequence record in `file`.
    pub offsets: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub seed: u64,
    pub sequence_length: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub audio_dim: usize,
    pub splits: BTreeMap<String, SplitManifest>,
}

fn encode_sequence(buf: &mut Vec<u8>, s: &Sequence) {
    let [t, h, w, c] = s.frames.shape();
    write_tensor(buf, &[t, h, w, c], s.frames.data()).expect("vec write");
    write_tensor(buf, &[t, s.audio.dim()], s.audio.data()).expect("vec write");
    write_tensor(buf, &[t], &s.driver).expect("vec write");
    let blink: Vec<f32> = s.blink.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    write_tensor(buf, &[t], &blink).expect("vec write");
}

/// Writes `manifest.toml` plus one data file per split into `out_dir`.
/// Test sequences use indices after the training ones, so the two splits
/// never share seeds.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let lift = AudioLift::from_seed(lift_seed(spec.seed), spec.audio_dim)?;
    let mut splits = BTreeMap::new();
    let ranges = [("train", 0, spec.num_train), ("test", spec.num_train, spec.num_train + spec.num_test)];
    for (name, start, end) in ranges {
        let file = format!("{name}.xmcd");
        let mut buf = Vec::new();
        buf.extend_from_slice(&DATA_FILE_MAGIC);
        write_u32(&mut buf, CORPUS_FORMAT_VERSION).expect("vec write");
        write_u32(&mut buf, (end - start) as u32).expect("vec write");
        let mut offsets = Vec::with_capacity(end - start);
        for index in start..end {
            let seq = synth_sequence(spec, SequenceSeeds::derive(spec.seed, index as u64), &lift)?;
            offsets.push(buf.len() as u64);
            encode_sequence(&mut buf, &seq);
        }
        let path = out_dir.join(&file);
        fs::File::create(&path).and_then(|mut f| f.write_all(&buf)).map_err(|e| Error::io(&path, e))?;
        splits.insert(name.to_string(), SplitManifest { file, num_sequences: end - start, offsets });
    }
    let manifest = CorpusManifest {
        format_version: CORPUS_FORMAT_VERSION,
        seed: spec.seed,
        sequence_length: spec.sequence_length,
        height: spec.height,
        width: spec.width,
        channels: 1,
        audio_dim: spec.audio_dim,
        splits,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::invalid(format!("manifest encoding: {e}")))?;
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// In-memory split with random access by index.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn new(sequences: Vec<Sequence>) -> Self {
        Self { sequences }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<&Sequence> {
        self.sequences.get(index).ok_or(Error::OutOfRange { index, len: self.sequences.len() })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sequence> {
        self.sequences.iter()
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub dir: PathBuf,
    pub train: Dataset,
    pub test: Dataset,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Result<&Dataset> {
        match name {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            _ => Err(Error::invalid(format!("unknown split {name:?}"))),
        }
    }
}

fn decode_sequence(path: &Path, bytes: &[u8], offset: u64, m: &CorpusManifest) -> Result<Sequence> {
    let (t, h, w, c, a) = (m.sequence_length, m.height, m.width, m.channels, m.audio_dim);
    if offset as usize >= bytes.len() {
        return Err(Error::corrupt(path, format!("record offset {offset} past end of file")));
    }
    let mut cur = Cursor::new(&bytes[offset as usize..]);
    let mut next = |what: &str, shape: &[usize]| {
        let tensor = read_tensor(&mut cur).map_err(|e| Error::corrupt(path, format!("{what}: {e}")))?;
        if tensor.shape != shape {
            return Err(Error::corrupt(path, format!("{what} has shape {:?}, expected {shape:?}", tensor.shape)));
        }
        Ok(tensor.data)
    };
    let frames = next("frames", &[t, h, w, c])?;
    let audio = next("audio", &[t, a])?;
    let driver = next("driver", &[t])?;
    let blink = next("blink", &[t])?;
    let bad = |e: Error| Error::corrupt(path, e.to_string());
    Ok(Sequence {
        frames: FrameStream::new(t, h, w, c, frames).map_err(bad)?,
        audio: AudioStream::new(t, a, audio).map_err(bad)?,
        driver,
        blink: blink.iter().map(|&b| b > 0.5).collect(),
    })
}

fn load_split(dir: &Path, split: &SplitManifest, m: &CorpusManifest) -> Result<Dataset> {
    let path = dir.join(&split.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() < 12 || bytes[..4] != DATA_FILE_MAGIC {
        return Err(Error::corrupt(&path, "missing corpus data header"));
    }
    let mut cur = Cursor::new(&bytes[4..12]);
    let version = read_u32(&mut cur).expect("header length checked");
    if version != CORPUS_FORMAT_VERSION {
        return Err(Error::Version { path, found: version, expected: CORPUS_FORMAT_VERSION });
    }
    let count = read_u32(&mut cur).expect("header length checked") as usize;
    if count != split.offsets.len() || count != split.num_sequences {
        return Err(Error::corrupt(&path, format!("{count} records but manifest lists {}", split.offsets.len())));
    }
    if split.offsets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::corrupt(&path, "record offsets are not strictly increasing"));
    }
    let sequences = split.offsets.iter().map(|&o| decode_sequence(&path, &bytes, o, m)).collect::<Result<_>>()?;
    Ok(Dataset::new(sequences))
}

/// Loads a corpus from its manifest file or from the directory holding it.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let raw: toml::Value = toml::from_str(&text).map_err(|e| Error::corrupt(&manifest_path, e.to_string()))?;
    let found = raw.get("format_version").and_then(toml::Value::as_integer);
    if found != Some(CORPUS_FORMAT_VERSION as i64) {
        return Err(Error::Version {
            path: manifest_path,
            found: found.and_then(|v| u32::try_from(v).ok()).unwrap_or(0),
            expected: CORPUS_FORMAT_VERSION,
        });
    }
    let manifest: CorpusManifest = raw.try_into().map_err(|e: toml::de::Error| Error::corrupt(&manifest_path, e.to_string()))?;
    if manifest.channels != 1 {
        return Err(Error::corrupt(&manifest_path, "only single-channel corpora are supported"));
    }
    let split = |name: &str| {
        manifest.splits.get(name).ok_or_else(|| Error::corrupt(&manifest_path, format!("missing split {name:?}")))
    };
    let train = load_split(&dir, split("train")?, &manifest)?;
    let test = load_split(&dir, split("test")?, &manifest)?;
    Ok(Corpus { manifest, dir, train, test })
}
