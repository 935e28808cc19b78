//! Self-describing checkpoint files.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes   b"PLMCKPT\0"
//! header_len u64 LE
//! header     header_len bytes of UTF-8 TOML (version, configs, step, RNG,
//!            tensor table: name, dtype, shape, byte offset, byte length)
//! payload    tensors as contiguous little-endian f64, at the listed offsets
//! ```
//!
//! Tensor names are prefixed `context.`, `target.`, `adam_m.` or `adam_v.`;
//! the loss history is stored as `history` (`steps x 4`, absent terms NaN).

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::{Encoder, ModelConfig, NamedTensors, Params};
use crate::objective::LossBreakdown;
use crate::tensor::Matrix;

pub const CHECKPOINT_VERSION: &str = "pilamim-checkpoint-v1";
const MAGIC: &[u8; 8] = b"PLMCKPT\0";
const DTYPE: &str = "f64";

#[derive(Debug, Serialize, Deserialize)]
struct RngRecord {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: [usize; 2],
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: String,
    step: u64,
    total_steps: u64,
    warmup_steps: u64,
    rng: RngRecord,
    model: ModelConfig,
    train: TrainConfig,
    tensors: Vec<TensorEntry>,
}

fn rng_record(rng: &ChaCha8Rng) -> RngRecord {
    RngRecord {
        seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(rec: &RngRecord) -> Result<ChaCha8Rng> {
    let bad = |what: &str| Error::CorruptFile(format!("rng {what}"));
    if rec.seed.len() != 64 {
        return Err(bad("seed length"));
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&rec.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed"))?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(rec.stream);
    rng.set_word_pos(rec.word_pos.parse().map_err(|_| bad("word position"))?);
    Ok(rng)
}

fn history_matrix(history: &[LossBreakdown]) -> Matrix {
    let mut m = Matrix::zeros(history.len(), 4);
    for (i, h) in history.iter().enumerate() {
        let row = m.row_mut(i);
        row[0] = h.l_pixel.unwrap_or(f64::NAN);
        row[1] = h.l_latent.unwrap_or(f64::NAN);
        row[2] = h.l_cls.unwrap_or(f64::NAN);
        row[3] = h.total;
    }
    m
}

fn history_from_matrix(m: &Matrix) -> Vec<LossBreakdown> {
    let opt = |v: f64| if v.is_nan() { None } else { Some(v) };
    (0..m.rows())
        .map(|i| {
            let r = m.row(i);
            LossBreakdown {
                l_pixel: opt(r[0]),
                l_latent: opt(r[1]),
                l_cls: opt(r[2]),
                total: r[3],
            }
        })
        .collect()
}

fn named_tensors(state: &TrainState) -> Vec<(String, &Matrix)> {
    let mut out = Vec::new();
    state.context.collect("context", &mut out);
    state.target.collect("target", &mut out);
    state.optimizer.m.collect("adam_m", &mut out);
    state.optimizer.v.collect("adam_v", &mut out);
    out
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let history = history_matrix(&state.history);
    let mut tensors = named_tensors(state);
    tensors.push(("history".to_string(), &history));

    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        let nbytes = (t.len() * 8) as u64;
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: DTYPE.into(),
            shape: [t.rows(), t.cols()],
            offset,
            nbytes,
        });
        offset += nbytes;
    }
    let header = Header {
        version: CHECKPOINT_VERSION.into(),
        step: state.step,
        total_steps: state.total_steps,
        warmup_steps: state.warmup_steps,
        rng: rng_record(&state.rng),
        model: state.model.clone(),
        train: state.train.clone(),
        tensors: entries,
    };
    let header = toml::to_string(&header)
        .map_err(|e| Error::InvalidArgument(format!("checkpoint header: {e}")))?;

    let mut buf = Vec::with_capacity(16 + header.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    for (_, t) in &tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and checks it was trained with `expected`'s architecture and mode.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<TrainState> {
    let state = load_checkpoint(path)?;
    if &state.model != expected {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint holds a {} model {:?}, expected {} {:?}",
            state.model.mode, state.model, expected.mode, expected
        )));
    }
    Ok(state)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let corrupt = |m: String| Error::CorruptFile(m);
    if bytes.len() < 16 {
        return Err(corrupt(format!("{} bytes is shorter than the preamble", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("header runs past end of file".into()))?;
    let text = std::str::from_utf8(&bytes[16..payload_start]).map_err(|_| corrupt("header is not UTF-8".into()))?;

    // version first, so files from other versions report as such
    let version = toml::from_str::<toml::Table>(text)
        .ok()
        .and_then(|t| t.get("version").and_then(|v| v.as_str().map(str::to_string)))
        .ok_or_else(|| corrupt("header lacks a version tag".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION.into(),
            found: version,
        });
    }
    let header: Header = toml::from_str(text).map_err(|e| corrupt(format!("header: {e}")))?;
    let payload = &bytes[payload_start..];
    let expected_len: u64 = header.tensors.iter().map(|t| t.nbytes).sum();
    if payload.len() as u64 != expected_len {
        return Err(corrupt(format!(
            "payload is {} bytes, tensor table expects {expected_len}",
            payload.len()
        )));
    }

    header.model.validate().map_err(|e| corrupt(format!("model config: {e}")))?;
    // the skeleton fixes which names and shapes must be present
    let mut state = TrainState::new(header.model.clone(), header.train.clone(), 1)
        .map_err(|e| corrupt(format!("configs: {e}")))?;

    let mut table = std::collections::BTreeMap::new();
    for e in &header.tensors {
        if e.dtype != DTYPE {
            return Err(corrupt(format!("tensor `{}` has dtype {}", e.name, e.dtype)));
        }
        let [r, c] = e.shape;
        let end = e.offset.checked_add(e.nbytes).filter(|&x| x <= expected_len);
        if e.nbytes != (r * c * 8) as u64 || end.is_none() {
            return Err(corrupt(format!("tensor `{}` has inconsistent extent", e.name)));
        }
        let raw = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        if table.insert(e.name.clone(), Matrix::from_vec(r, c, data)).is_some() {
            return Err(corrupt(format!("tensor `{}` listed twice", e.name)));
        }
    }

    let history = table
        .remove("history")
        .ok_or_else(|| corrupt("missing tensor `history`".into()))?;
    if history.cols() != 4 {
        return Err(corrupt("history must have 4 columns".into()));
    }
    fill(&mut state.context, "context", &mut table)?;
    fill_encoder(&mut state.target, "target", &mut table)?;
    fill(&mut state.optimizer.m, "adam_m", &mut table)?;
    fill(&mut state.optimizer.v, "adam_v", &mut table)?;
    if let Some(extra) = table.keys().next() {
        return Err(corrupt(format!("unexpected tensor `{extra}` for a {} model", header.model.mode)));
    }
    state.step = header.step;
    state.total_steps = header.total_steps;
    state.warmup_steps = header.warmup_steps;
    state.rng = restore_rng(&header.rng)?;
    state.history = history_from_matrix(&history);
    Ok(state)
}

fn take(table: &mut std::collections::BTreeMap<String, Matrix>, name: &str, dst: &mut Matrix) -> Result<()> {
    let t = table
        .remove(name)
        .ok_or_else(|| Error::CorruptFile(format!("missing tensor `{name}`")))?;
    if t.shape() != dst.shape() {
        return Err(Error::CorruptFile(format!(
            "tensor `{name}` is {:?}, expected {:?}",
            t.shape(),
            dst.shape()
        )));
    }
    *dst = t;
    Ok(())
}

fn fill(params: &mut Params, prefix: &str, table: &mut std::collections::BTreeMap<String, Matrix>) -> Result<()> {
    let mut slots = Vec::new();
    params.collect_mut(prefix, &mut slots);
    for (name, dst) in slots {
        take(table, &name, dst)?;
    }
    Ok(())
}

fn fill_encoder(enc: &mut Encoder, prefix: &str, table: &mut std::collections::BTreeMap<String, Matrix>) -> Result<()> {
    let mut slots = Vec::new();
    enc.collect_mut(prefix, &mut slots);
    for (name, dst) in slots {
        take(table, &name, dst)?;
    }
    Ok(())
}
