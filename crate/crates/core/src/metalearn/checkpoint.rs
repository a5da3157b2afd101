//! Checkpoint layout:
//!
//! ```text
//! <dir>/checkpoint.json
//! <dir>/params.f32    parameters, lexicographic name order, little-endian f32
//! <dir>/params.f64    the same values at full precision, used for resuming
//! <dir>/moments.f64   optimizer first then second moments (empty for sgd)
//! ```

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::OptHeader;
use super::{MetaConfig, OptState, OptimizerKind, TrainState};
use crate::error::{Error, Result};
use crate::nets::{NetConfig, NetParams};
use crate::tensor::{NdArray, ParamSet};

pub const CHECKPOINT_VERSION: u32 = 1;
const PARAMS_F32: &str = "params.f32";
const PARAMS_F64: &str = "params.f64";
const MOMENTS: &str = "moments.f64";
const HEADER: &str = "checkpoint.json";

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub meta: MetaConfig,
    pub state: TrainState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    params_file: String,
    exact_params_file: String,
    moments_file: String,
    optimizer: OptHeader,
    iter: u64,
    rng: ChaCha8Rng,
    net: NetConfig,
    meta: MetaConfig,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn f64_blob(sets: &[&ParamSet]) -> Vec<u8> {
    sets.iter().flat_map(|s| s.flatten()).flat_map(f64::to_le_bytes).collect()
}

fn unflatten(names: &[String], shapes: &[Vec<usize>], values: &mut impl Iterator<Item = f64>) -> Result<ParamSet> {
    names
        .iter()
        .zip(shapes)
        .map(|(name, shape)| {
            let n = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            Ok((name.clone(), NdArray::new(shape.clone(), data)?))
        })
        .collect()
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = ckpt.state.params.merged();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let shapes: Vec<Vec<usize>> = params.iter().map(|(_, v)| v.shape().to_vec()).collect();
    let f32_blob: Vec<u8> = params.flatten().into_iter().flat_map(|v| (v as f32).to_le_bytes()).collect();
    write(&dir.join(PARAMS_F32), &f32_blob)?;
    write(&dir.join(PARAMS_F64), &f64_blob(&[&params]))?;
    write(&dir.join(MOMENTS), &f64_blob(&[&ckpt.state.opt.first, &ckpt.state.opt.second]))?;
    let header = Header {
        version: CHECKPOINT_VERSION,
        names,
        shapes,
        params_file: PARAMS_F32.into(),
        exact_params_file: PARAMS_F64.into(),
        moments_file: MOMENTS.into(),
        optimizer: ckpt.state.opt.header(),
        iter: ckpt.state.iter,
        rng: ckpt.state.rng.clone(),
        net: ckpt.net.clone(),
        meta: ckpt.meta.clone(),
    };
    let path = dir.join(HEADER);
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    write(&path, text.as_bytes())
}

fn decode_f64(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = read(path)?;
    if bytes.len() != expected * 8 {
        return Err(Error::format(path, format!("expected {} bytes, found {}", expected * 8, bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let path = dir.join(HEADER);
    let text = read(&path)?;
    let h: Header = serde_json::from_slice(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    if h.version != CHECKPOINT_VERSION {
        return Err(Error::format(&path, format!("unsupported checkpoint version {}", h.version)));
    }
    if h.names.len() != h.shapes.len() {
        return Err(Error::format(&path, "names and shapes differ in length"));
    }
    let n: usize = h.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let f32_path = dir.join(&h.params_file);
    let f32_len = read(&f32_path)?.len();
    if f32_len != n * 4 {
        return Err(Error::format(&f32_path, format!("expected {} bytes, found {f32_len}", n * 4)));
    }
    let params = unflatten(&h.names, &h.shapes, &mut decode_f64(&dir.join(&h.exact_params_file), n)?.into_iter())?;
    let n_moments = match h.optimizer.kind {
        OptimizerKind::Adam => 2 * n,
        OptimizerKind::Sgd => 0,
    };
    let mut moments = decode_f64(&dir.join(&h.moments_file), n_moments)?.into_iter();
    let opt = match h.optimizer.kind {
        OptimizerKind::Adam => OptState {
            kind: OptimizerKind::Adam,
            step: h.optimizer.step,
            first: unflatten(&h.names, &h.shapes, &mut moments)?,
            second: unflatten(&h.names, &h.shapes, &mut moments)?,
        },
        OptimizerKind::Sgd => OptState { step: h.optimizer.step, ..OptState::new(OptimizerKind::Sgd, &params) },
    };
    Ok(Checkpoint {
        net: h.net,
        meta: h.meta,
        state: TrainState { params: NetParams::split(&params), opt, iter: h.iter, rng: h.rng },
    })
}

/// Reads only the `params.f32` blob, keyed by the header's names.
pub fn load_f32_params(dir: impl AsRef<Path>) -> Result<ParamSet> {
    let dir = dir.as_ref();
    let path = dir.join(HEADER);
    let h: Header = serde_json::from_slice(&read(&path)?).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    let blob_path = dir.join(&h.params_file);
    let bytes = read(&blob_path)?;
    let n: usize = h.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if bytes.len() != n * 4 {
        return Err(Error::format(&blob_path, format!("expected {} bytes, found {}", n * 4, bytes.len())));
    }
    let mut values = bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))));
    unflatten(&h.names, &h.shapes, &mut values)
}
