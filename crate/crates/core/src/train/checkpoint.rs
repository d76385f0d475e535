//! Checkpoint container: magic, version, a TOML header carrying the model
//! configuration, then named tensors. Optimizer moments, when present, are
//! stored as further tensors under `optimizer.first.` / `optimizer.second.`.

use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::OptimizerKind;
use super::optim::Optimizer;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor_io::{read_tensor, read_u32, write_tensor, write_u32, RawTensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"XMCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_HEADER: usize = 1 << 20;
const MAX_NAME: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    /// Training steps completed when the checkpoint was written.
    pub step: usize,
    pub optimizer: Option<Optimizer<f32>>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ModelParams<f32>) -> Self {
        Self { config, params, step: 0, optimizer: None }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    step: usize,
    optimizer: Option<OptimizerHeader>,
    model: ModelConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    kind: OptimizerKind,
    updates: u64,
}

fn count_tensors(params: &ModelParams<f32>) -> usize {
    let mut n = 0;
    params.for_each(|_, _| n += 1);
    n
}

fn write_named(buf: &mut Vec<u8>, prefix: &str, params: &ModelParams<f32>) {
    params.for_each(|name, t| {
        let name = format!("{prefix}{name}");
        write_u32(buf, name.len() as u32).expect("vec write");
        buf.extend_from_slice(name.as_bytes());
        write_tensor(buf, &t.shape, &t.data).expect("vec write");
    });
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.config.validate()?;
    ckpt.params.check_shapes(&ckpt.config)?;
    let header = Header {
        step: ckpt.step,
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerHeader { kind: o.kind, updates: o.updates }),
        model: ckpt.config.clone(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::invalid(format!("checkpoint header: {e}")))?;
    let mut stores = vec![("", &ckpt.params)];
    if let Some(opt) = &ckpt.optimizer {
        stores.push(("optimizer.first.", &opt.first));
        if let Some(second) = &opt.second {
            stores.push(("optimizer.second.", second));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    write_u32(&mut buf, CHECKPOINT_VERSION).expect("vec write");
    write_u32(&mut buf, text.len() as u32).expect("vec write");
    buf.extend_from_slice(text.as_bytes());
    write_u32(&mut buf, stores.iter().map(|(_, p)| count_tensors(p)).sum::<usize>() as u32).expect("vec write");
    for (prefix, params) in stores {
        write_named(&mut buf, prefix, params);
    }
    Ok(buf)
}

/// Writes through a temporary file and a rename, so a crash never leaves a
/// half-written checkpoint under `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn fill(path: &Path, target: &mut ModelParams<f32>, prefix: &str, tensors: &mut std::collections::BTreeMap<String, RawTensor>) -> Result<()> {
    let mut err = None;
    target.for_each_mut(|name, t| {
        if err.is_some() {
            return;
        }
        let key = format!("{prefix}{name}");
        match tensors.remove(&key) {
            Some(raw) if raw.shape == t.shape => t.data = raw.data,
            Some(raw) => err = Some(format!("tensor {key} has shape {:?}, expected {:?}", raw.shape, t.shape)),
            None => err = Some(format!("missing tensor {key}")),
        }
    });
    match err {
        Some(e) => Err(Error::corrupt(path, e)),
        None => Ok(()),
    }
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |d: String| Error::corrupt(path, d);
    if bytes.len() < 12 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)".into()));
    }
    let mut cur = Cursor::new(&bytes[4..]);
    let version = read_u32(&mut cur).map_err(|e| corrupt(e.to_string()))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { path: path.to_path_buf(), found: version, expected: CHECKPOINT_VERSION });
    }
    let header_len = read_u32(&mut cur).map_err(|e| corrupt(e.to_string()))? as usize;
    if header_len > MAX_HEADER {
        return Err(corrupt("header too large".into()));
    }
    let mut text = vec![0u8; header_len];
    cur.read_exact(&mut text).map_err(|e| corrupt(format!("header: {e}")))?;
    let text = String::from_utf8(text).map_err(|e| corrupt(format!("header: {e}")))?;
    let header: Header = toml::from_str(&text).map_err(|e| corrupt(format!("header: {e}")))?;
    header.model.validate().map_err(|e| corrupt(e.to_string()))?;

    let count = read_u32(&mut cur).map_err(|e| corrupt(e.to_string()))? as usize;
    let mut tensors = std::collections::BTreeMap::new();
    for _ in 0..count {
        let n = read_u32(&mut cur).map_err(|e| corrupt(format!("tensor name: {e}")))? as usize;
        if n > MAX_NAME {
            return Err(corrupt("tensor name too long".into()));
        }
        let mut name = vec![0u8; n];
        cur.read_exact(&mut name).map_err(|e| corrupt(format!("tensor name: {e}")))?;
        let name = String::from_utf8(name).map_err(|e| corrupt(e.to_string()))?;
        let raw = read_tensor(&mut cur).map_err(|e| corrupt(format!("tensor {name}: {e}")))?;
        if tensors.insert(name.clone(), raw).is_some() {
            return Err(corrupt(format!("duplicate tensor {name}")));
        }
    }
    if (cur.position() as usize) != bytes.len() - 4 {
        return Err(corrupt("trailing bytes after tensors".into()));
    }

    let mut params = ModelParams::<f32>::init(&header.model, 0).map_err(|e| corrupt(e.to_string()))?;
    fill(path, &mut params, "", &mut tensors)?;
    let optimizer = match header.optimizer {
        None => None,
        Some(h) => {
            let mut opt = Optimizer::new(h.kind, &params);
            opt.updates = h.updates;
            fill(path, &mut opt.first, "optimizer.first.", &mut tensors)?;
            if let Some(second) = opt.second.as_mut() {
                fill(path, second, "optimizer.second.", &mut tensors)?;
            }
            Some(opt)
        }
    };
    if let Some(name) = tensors.keys().next() {
        return Err(corrupt(format!("unexpected tensor {name}")));
    }
    if !params.all_finite() {
        return Err(corrupt("non-finite parameter values".into()));
    }
    Ok(Checkpoint { config: header.model, params, step: header.step, optimizer })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes)
}

/// Conventional checkpoint location inside a run directory.
pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint.xmck")
}
