//! Checkpoint files.
//!
//! Layout, integers little-endian:
//! `"SLICW\0"`, version `u8`, header length `u32`, JSON header (config and
//! λ index), parameter count `u32`, then per parameter: name length `u16`,
//! UTF-8 name, four `u32` dims, `f32` values.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error};
use crate::net::{Model, ModelConfig};
use crate::tensor::{numel, Element, Shape, Tensor};

pub const MAGIC: &[u8; 6] = b"SLICW\0";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    lambda_index: u8,
}

pub fn to_bytes<F: Element>(model: &Model<F>, lambda_index: u8) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        lambda_index,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + model.num_params() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, p) in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        for d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    out
}

/// Writes through a temporary sibling and renames, so an existing file is
/// replaced only by a complete one.
pub fn save_checkpoint<F: Element>(model: &Model<F>, lambda_index: u8, path: &Path) -> Result<(), CheckpointError> {
    let bytes = to_bytes(model, lambda_index);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

struct Raw {
    config: ModelConfig,
    lambda_index: u8,
    entries: Vec<(String, Shape, Vec<f32>)>,
}

fn parse(bytes: &[u8]) -> Result<Raw, CheckpointError> {
    let mut r = Reader { b: bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let hlen = r.u32("header length")? as usize;
    let header: Header =
        serde_json::from_slice(r.take(hlen, "header")?).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let count = r.u32("parameter count")? as usize;
    let mut entries = Vec::new();
    for _ in 0..count {
        let nlen = r.u16("parameter name")? as usize;
        let name = std::str::from_utf8(r.take(nlen, "parameter name")?)
            .map_err(|_| CheckpointError::Config("parameter name is not UTF-8".into()))?
            .to_string();
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32("parameter shape")? as usize;
        }
        let n = numel(&shape);
        let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated("parameter values"))?, "parameter values")?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        entries.push((name, shape, values));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Config(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Raw {
        config: header.config,
        lambda_index: header.lambda_index,
        entries,
    })
}

/// Builds `config`'s model and fills it from the parsed entries. Parameters
/// are checked in model order; the first disagreement is reported.
fn assemble<F: Element>(config: ModelConfig, entries: Vec<(String, Shape, Vec<f32>)>) -> Result<Model<F>, Error> {
    let mut model = Model::<F>::new(config, 0)?;
    let mut by_name: HashMap<String, (Shape, Vec<f32>)> =
        entries.into_iter().map(|(n, s, v)| (n, (s, v))).collect();
    let ids: Vec<_> = model.params.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let expected = model.params.value(id).shape();
        let (shape, values) = by_name.remove(&name).ok_or_else(|| CheckpointError::MissingParameter(name.clone()))?;
        if shape != expected {
            return Err(CheckpointError::ShapeDisagreement {
                name,
                expected,
                found: shape,
            }
            .into());
        }
        let data = values.into_iter().map(|v| F::c(v as f64)).collect();
        model.params.set_value(id, Tensor::from_vec(shape, data)?)?;
    }
    if let Some(name) = by_name.into_keys().min() {
        return Err(CheckpointError::UnexpectedParameter(name).into());
    }
    Ok(model)
}

/// Model and λ index stored in `bytes`.
pub fn from_bytes<F: Element>(bytes: &[u8]) -> Result<(Model<F>, u8), Error> {
    let raw = parse(bytes)?;
    let model = assemble(raw.config, raw.entries)?;
    Ok((model, raw.lambda_index))
}

/// Loads the parameters in `bytes` into a model built from `config`,
/// ignoring the stored config.
pub fn from_bytes_with_config<F: Element>(bytes: &[u8], config: ModelConfig) -> Result<(Model<F>, u8), Error> {
    let raw = parse(bytes)?;
    let model = assemble(config, raw.entries)?;
    Ok((model, raw.lambda_index))
}

pub fn load_checkpoint<F: Element>(path: &Path) -> Result<(Model<F>, u8), Error> {
    from_bytes(&std::fs::read(path).map_err(CheckpointError::Io)?)
}

pub fn load_checkpoint_with_config<F: Element>(path: &Path, config: ModelConfig) -> Result<(Model<F>, u8), Error> {
    from_bytes_with_config(&std::fs::read(path).map_err(CheckpointError::Io)?, config)
}
