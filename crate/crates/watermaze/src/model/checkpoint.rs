//! Binary checkpoint format.
//!
//! Layout, all little-endian, no padding:
//!
//! ```text
//! magic    b"MWMQ"
//! version  u32 (currently 1)
//! config   embed_dim, num_layers, num_heads, ffn_dim, num_actions,
//!          max_seq_len, obs_dim as u32; dropout_p, distance_scale as f64
//! count    u32 number of tensor records
//! record   name_len u32, name bytes (UTF-8), rank u32, extents rank x u64,
//!          values f32 x (product of extents)
//! ```
//!
//! Round trips are bitwise lossless: values are written as raw f32 bits.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::autograd::Tensor;

pub const MAGIC: [u8; 4] = *b"MWMQ";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(io::Error),
    BadMagic,
    UnsupportedVersion(u32),
    Truncated,
    Corrupt(String),
    ShapeMismatch(String),
}

impl std::fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint i/o error: {e}"),
            CheckpointError::BadMagic => write!(f, "not a checkpoint file (bad magic)"),
            CheckpointError::UnsupportedVersion(v) => {
                write!(f, "unsupported checkpoint format version {v}")
            }
            CheckpointError::Truncated => write!(f, "checkpoint file is truncated"),
            CheckpointError::Corrupt(msg) => write!(f, "corrupt checkpoint: {msg}"),
            CheckpointError::ShapeMismatch(msg) => {
                write!(f, "checkpoint shape mismatch: {msg}")
            }
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    }
}

pub fn save_checkpoint(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    write_config(&mut w, cfg)?;

    let records = params.named_tensors();
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, tensor) in records {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(tensor.rows() as u64).to_le_bytes())?;
        w.write_all(&(tensor.cols() as u64).to_le_bytes())?;
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, ModelConfig), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let cfg = read_config(&mut r)?;
    cfg.validate()
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;

    let count = read_u32(&mut r)? as usize;
    let mut records: HashMap<String, Tensor<f32>> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(CheckpointError::Corrupt(format!(
                "record name length {name_len}"
            )));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Corrupt("record name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)?;
        if rank != 2 {
            return Err(CheckpointError::Corrupt(format!(
                "record {name} has rank {rank}, expected 2"
            )));
        }
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let len = rows.checked_mul(cols).ok_or_else(|| {
            CheckpointError::Corrupt(format!("record {name} extent overflow"))
        })?;
        if len > (1 << 28) {
            return Err(CheckpointError::Corrupt(format!(
                "record {name} is implausibly large ({rows} x {cols})"
            )));
        }
        let mut data = vec![0f32; len];
        let mut buf = [0u8; 4];
        for v in &mut data {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        if records.insert(name.clone(), Tensor::from_vec(rows, cols, data)).is_some() {
            return Err(CheckpointError::Corrupt(format!("duplicate record {name}")));
        }
    }

    let params = assemble(&cfg, &mut records)?;
    if let Some(extra) = records.keys().next() {
        return Err(CheckpointError::Corrupt(format!(
            "unexpected record {extra}"
        )));
    }
    Ok((params, cfg))
}

/// Rebuild the parameter struct from named records, verifying every shape
/// against the config before accepting anything.
fn assemble(
    cfg: &ModelConfig,
    records: &mut HashMap<String, Tensor<f32>>,
) -> Result<ModelParams<f32>, CheckpointError> {
    let mut take = |name: String, rows: usize, cols: usize| {
        let t = records
            .remove(&name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing record {name}")))?;
        if (t.rows(), t.cols()) != (rows, cols) {
            return Err(CheckpointError::ShapeMismatch(format!(
                "{name}: file has {}x{}, config requires {rows}x{cols}",
                t.rows(),
                t.cols()
            )));
        }
        Ok(t)
    };

    let d = cfg.embed_dim;
    let dk = cfg.head_dim();
    let obs_w = take("obs_embed.w".into(), cfg.obs_dim, d)?;
    let obs_b = take("obs_embed.b".into(), 1, d)?;
    let pos = take("pos_table".into(), cfg.max_seq_len, d)?;
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for i in 0..cfg.num_layers {
        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        for h in 0..cfg.num_heads {
            wq.push(take(format!("layer{i}.wq{h}"), d, dk)?);
            wk.push(take(format!("layer{i}.wk{h}"), d, dk)?);
            wv.push(take(format!("layer{i}.wv{h}"), d, dk)?);
        }
        layers.push(super::LayerParams {
            wq,
            wk,
            wv,
            wo: take(format!("layer{i}.wo"), cfg.num_heads * dk, d)?,
            ln1_gain: take(format!("layer{i}.ln1.g"), 1, d)?,
            ln1_bias: take(format!("layer{i}.ln1.b"), 1, d)?,
            ln2_gain: take(format!("layer{i}.ln2.g"), 1, d)?,
            ln2_bias: take(format!("layer{i}.ln2.b"), 1, d)?,
            ffn_w1: take(format!("layer{i}.ffn.w1"), d, cfg.ffn_dim)?,
            ffn_b1: take(format!("layer{i}.ffn.b1"), 1, cfg.ffn_dim)?,
            ffn_w2: take(format!("layer{i}.ffn.w2"), cfg.ffn_dim, d)?,
            ffn_b2: take(format!("layer{i}.ffn.b2"), 1, d)?,
        });
    }
    Ok(ModelParams {
        obs_w,
        obs_b,
        pos,
        layers,
        final_gain: take("final_ln.g".into(), 1, d)?,
        final_bias: take("final_ln.b".into(), 1, d)?,
        q_w: take("q_head.w".into(), d, cfg.num_actions)?,
        q_b: take("q_head.b".into(), 1, cfg.num_actions)?,
    })
}

fn write_config(w: &mut impl Write, cfg: &ModelConfig) -> io::Result<()> {
    for v in [
        cfg.embed_dim,
        cfg.num_layers,
        cfg.num_heads,
        cfg.ffn_dim,
        cfg.num_actions,
        cfg.max_seq_len,
        cfg.obs_dim,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&cfg.dropout_p.to_le_bytes())?;
    w.write_all(&cfg.distance_scale.to_le_bytes())?;
    Ok(())
}

fn read_config(r: &mut impl Read) -> Result<ModelConfig, CheckpointError> {
    let embed_dim = read_u32(r)? as usize;
    let num_layers = read_u32(r)? as usize;
    let num_heads = read_u32(r)? as usize;
    let ffn_dim = read_u32(r)? as usize;
    let num_actions = read_u32(r)? as usize;
    let max_seq_len = read_u32(r)? as usize;
    let obs_dim = read_u32(r)? as usize;
    let dropout_p = read_f64(r)?;
    let distance_scale = read_f64(r)?;
    Ok(ModelConfig {
        embed_dim,
        num_layers,
        num_heads,
        ffn_dim,
        num_actions,
        max_seq_len,
        dropout_p,
        obs_dim,
        distance_scale,
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}
