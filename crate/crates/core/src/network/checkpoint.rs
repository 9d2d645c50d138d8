//! Binary checkpoint archive.
//!
//! Layout (little endian): magic `MSMVDCKP`, `u32` version, 32-byte config
//! hash, `u32` length + network config JSON, `u32` parameter count, then per
//! parameter a `u16` name length, the UTF-8 name, a `u8` rank, `u32` dims
//! and `f32` values.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

use super::{Model, NetworkConfig};

const MAGIC: &[u8; 8] = b"MSMVDCKP";
const VERSION: u32 = 1;

/// A loaded checkpoint: the model skeleton with its trained parameters.
pub struct Checkpoint {
    pub model: Model,
    pub params: ParamStore<f32>,
}

pub fn save_checkpoint(path: &Path, config: &NetworkConfig, params: &ParamStore<f32>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&config.hash());
    let json = serde_json::to_vec(config).expect("config serializes");
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        buf.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Checkpoint { path: path.to_path_buf(), message: m };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated archive".into()))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err(bad("not a checkpoint archive".into()));
    }
    let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32_of(take(4)?);
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let hash: [u8; 32] = take(32)?.try_into().unwrap();
    let len = u32_of(take(4)?) as usize;
    let config: NetworkConfig = serde_json::from_slice(take(len)?).map_err(|e| bad(format!("config: {e}")))?;
    if config.hash() != hash {
        return Err(bad("config hash mismatch".into()));
    }
    let (model, mut params) = Model::new::<f32>(&config)?;
    let count = u32_of(take(4)?) as usize;
    if count != params.len() {
        return Err(bad(format!("archive holds {count} parameters, model has {}", params.len())));
    }
    for _ in 0..count {
        let nlen = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(nlen)?.to_vec()).map_err(|_| bad("non-UTF-8 parameter name".into()))?;
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_of(take(4)?) as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = take(4 * n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let id = params.id_of(&name).ok_or_else(|| bad(format!("unknown parameter `{name}`")))?;
        let p = params.get_mut(id);
        if p.value.shape() != shape.as_slice() {
            return Err(bad(format!("parameter `{name}` has shape {shape:?}, model expects {:?}", p.value.shape())));
        }
        p.value = Tensor::from_vec(&shape, data);
    }
    Ok(Checkpoint { model, params })
}
