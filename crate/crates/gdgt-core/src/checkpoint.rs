//! Checkpoint container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "GDGT" | u32 version=1 | u32 tensor count
//! per tensor: u16 name length | name (UTF-8) | u8 dtype | u8 rank
//!             | u32 dims[rank] | raw data
//! u32 CRC32 of every preceding byte
//! ```
//!
//! dtype 0 is f32 tensor data; dtype 2 is a raw byte blob (rank 1), used for
//! the embedded config JSON and for optimizer/rng state. Tensors are written
//! in insertion order, so save -> load -> save reproduces files byte for byte.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Gdgt, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"GDGT";
pub const VERSION: u32 = 1;
pub const CONFIG_TENSOR: &str = "__config__";

const DTYPE_F32: u8 = 0;
const DTYPE_BYTES: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Tensor<f32>),
    Bytes(Vec<u8>),
}

/// An ordered set of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: Vec<(String, Payload)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Payload> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, payload) in &self.tensors {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize {
                return Err(Error::Format(format!("tensor name too long: {name}")));
            }
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            match payload {
                Payload::F32(t) => {
                    buf.push(DTYPE_F32);
                    let shape = t.shape();
                    if shape.len() > u8::MAX as usize {
                        return Err(Error::Format(format!("rank too large for {name}")));
                    }
                    buf.push(shape.len() as u8);
                    for &d in shape {
                        buf.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                    for v in t.data() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Payload::Bytes(b) => {
                    buf.push(DTYPE_BYTES);
                    buf.push(1);
                    buf.extend_from_slice(&(b.len() as u32).to_le_bytes());
                    buf.extend_from_slice(b);
                }
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Container> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 {
            return Err(Error::Integrity("file shorter than any valid checkpoint".into()));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic: expected {:?}, found {:?}",
                MAGIC,
                &bytes[..4]
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let actual_crc = crc32fast::hash(&bytes[..bytes.len() - 4]);
        if stored_crc != actual_crc {
            return Err(Error::Integrity(format!(
                "crc mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
            )));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[..bytes.len() - 4];
        let mut pos = 12usize;
        let mut tensors = Vec::with_capacity(count);
        let mut seen = HashMap::new();
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > body.len() {
                return Err(Error::Integrity("truncated tensor record".into()));
            }
            let s = &body[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if seen.insert(name.clone(), ()).is_some() {
                return Err(Error::Integrity(format!("duplicate tensor name {name}")));
            }
            let dtype = take(&mut pos, 1)?[0];
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = dims.iter().product();
            match dtype {
                DTYPE_F32 => {
                    let raw = take(&mut pos, numel * 4)?;
                    let data: Vec<f32> = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    tensors.push((name, Payload::F32(Tensor::new(&dims, data)?)));
                }
                DTYPE_BYTES => {
                    let raw = take(&mut pos, numel)?;
                    tensors.push((name, Payload::Bytes(raw.to_vec())));
                }
                other => {
                    return Err(Error::Format(format!("unknown dtype {other} for {name}")));
                }
            }
        }
        if pos != body.len() {
            return Err(Error::Integrity("trailing bytes after last tensor".into()));
        }
        Ok(Container { tensors })
    }
}

/// Writes config, parameters, and any extra state tensors.
pub fn save_model(
    path: &Path,
    cfg: &ModelConfig,
    store: &ParamStore<f32>,
    extras: Vec<(String, Payload)>,
) -> Result<()> {
    let cfg_json = serde_json::to_string(cfg)
        .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
    let mut tensors = vec![(CONFIG_TENSOR.to_string(), Payload::Bytes(cfg_json.into_bytes()))];
    for (_, p) in store.iter() {
        tensors.push((p.name.clone(), Payload::F32(p.value.clone())));
    }
    tensors.extend(extras);
    Container { tensors }.write(path)
}

pub struct LoadedModel {
    pub cfg: ModelConfig,
    pub store: ParamStore<f32>,
    pub model: Gdgt,
    pub extras: Vec<(String, Payload)>,
}

/// Rebuilds the model recorded in a checkpoint.
pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let container = Container::read(path)?;
    let cfg_bytes = match container.get(CONFIG_TENSOR) {
        Some(Payload::Bytes(b)) => b.clone(),
        _ => return Err(Error::Integrity(format!("missing tensors: {CONFIG_TENSOR}"))),
    };
    let cfg: ModelConfig = serde_json::from_slice(&cfg_bytes)
        .map_err(|e| Error::Format(format!("embedded config: {e}")))?;
    cfg.validate()?;

    let mut store: ParamStore<f32> = ParamStore::new();
    // values are overwritten below, so the init rng seed is irrelevant
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = Gdgt::build(&cfg, &mut store, &mut rng)?;

    let mut values = HashMap::new();
    let mut extras = Vec::new();
    for (name, payload) in container.tensors {
        if name == CONFIG_TENSOR {
            continue;
        }
        if name.starts_with("__") {
            extras.push((name, payload));
            continue;
        }
        match payload {
            Payload::F32(t) => {
                values.insert(name, t);
            }
            Payload::Bytes(_) => {
                return Err(Error::Format(format!("parameter {name} has a non-float payload")));
            }
        }
    }
    store.load_values(values)?;
    Ok(LoadedModel {
        cfg,
        store,
        model,
        extras,
    })
}

/// Loads a checkpoint that must match `expected`, for resuming a run.
pub fn load_model_expecting(path: &Path, expected: &ModelConfig) -> Result<LoadedModel> {
    let loaded = load_model(path)?;
    if &loaded.cfg != expected {
        return Err(Error::Config(format!(
            "checkpoint config does not match the requested run: embed_dim {} vs {}, \
             blocks {} vs {}, scale {} vs {}",
            loaded.cfg.embed_dim,
            expected.embed_dim,
            loaded.cfg.num_dabs,
            expected.num_dabs,
            loaded.cfg.scale,
            expected.scale
        )));
    }
    Ok(loaded)
}
