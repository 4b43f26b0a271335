//! Checkpoint container.
//!
//! ```text
//! magic    8 bytes  "SSRGCKPT"
//! version  u32 LE
//! hlen     u32 LE   length of the JSON header
//! header   JSON     {version, dtype, step, collapse, model, train, tensors: [{name, group, shape}]}
//! data     f64 LE   tensors in header order, row-major
//! ```
//!
//! Values are widened to `f64`, which is exact for `f32` parameters, so a
//! restored state continues bit-for-bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore, SiameseModel};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSRGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    Buffer,
    Momentum,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    group: Group,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: u32,
    step: usize,
    collapse: Option<f64>,
    model: ModelConfig,
    train: TrainConfig,
    tensors: Vec<Entry>,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, state: &TrainState<T>, train: &TrainConfig) -> Result<()> {
    let groups = [
        (Group::Param, &state.model.params),
        (Group::Buffer, &state.model.buffers),
        (Group::Momentum, &state.momentum),
    ];
    let tensors = groups
        .iter()
        .flat_map(|(g, store)| {
            store.iter().map(|(name, t)| Entry {
                name: name.clone(),
                group: *g,
                shape: t.shape().to_vec(),
            })
        })
        .collect();
    let header = Header {
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE_CODE,
        step: state.step,
        collapse: state.collapse,
        model: state.model.config().clone(),
        train: train.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("partial");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&u32::try_from(json.len()).expect("header fits u32").to_le_bytes())?;
        w.write_all(&json)?;
        for (_, store) in groups {
            for t in store.values() {
                for &v in t.data() {
                    w.write_all(&v.f64().to_le_bytes())?;
                }
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Restores a training state and the configuration it was trained with.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(TrainState<T>, TrainConfig)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = read_u32(&mut r)? as usize;
    let mut json = vec![0u8; hlen];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.dtype != T::DTYPE_CODE {
        log::warn!(
            "checkpoint dtype code {} differs from requested {}; values are converted",
            header.dtype,
            T::DTYPE_CODE
        );
    }
    let (mut params, mut buffers, mut momentum) = (ParamStore::new(), ParamStore::new(), ParamStore::new());
    let mut b = [0u8; 8];
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b)
                .map_err(|_| Error::Checkpoint(format!("truncated data in `{}`", e.name)))?;
            data.push(T::of(f64::from_le_bytes(b)));
        }
        let store = match e.group {
            Group::Param => &mut params,
            Group::Buffer => &mut buffers,
            Group::Momentum => &mut momentum,
        };
        if store.insert(e.name.clone(), Tensor::new(e.shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{}`", e.name)));
        }
    }
    if r.read(&mut b)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    let model = SiameseModel::from_tensors(header.model, params, buffers)?;
    let same_layout = momentum.len() == model.params.len()
        && model
            .params
            .iter()
            .all(|(k, t)| momentum.get(k).is_some_and(|m| m.shape() == t.shape()));
    if !same_layout {
        return Err(Error::Checkpoint("momentum buffers do not match parameters".into()));
    }
    let state = TrainState {
        step: header.step,
        model,
        momentum,
        collapse: header.collapse,
    };
    Ok((state, header.train))
}
