//! `ITRB` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "ITRB"
//! version      u32      1
//! meta_len     u32
//! meta         meta_len bytes of UTF-8 JSON
//!              {config, origin_indices, original_layers, drop_history}
//! n_tensors    u32
//! n_tensors × {
//!   name_len   u32
//!   name       name_len bytes UTF-8
//!   rank       u32
//!   dims       rank × u32
//!   data       prod(dims) × f32
//! }
//! ```
//!
//! Tensors appear in [`TransformerModel::params`] order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TransformerModel};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ITRB";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    origin_indices: Vec<usize>,
    original_layers: usize,
    drop_history: Vec<usize>,
}

pub fn encode_checkpoint(model: &TransformerModel) -> Result<Vec<u8>> {
    let meta = Metadata {
        config: model.config.clone(),
        origin_indices: model.origin_indices().to_vec(),
        original_layers: model.original_layers(),
        drop_history: model.drop_history().to_vec(),
    };
    let meta = serde_json::to_vec(&meta)?;
    let params = model.params();
    let mut out = Vec::with_capacity(16 + meta.len() + model.num_params() * 4);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (id, t) in params {
        let name = id.to_string();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &TransformerModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TransformerModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"ITRB\""),
        });
    }
    let version_at = r.pos;
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: version_at as u64,
            message: format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        });
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta_at = r.pos;
    let meta_bytes = r.take(meta_len, "metadata")?;
    let meta: Metadata = serde_json::from_slice(meta_bytes).map_err(|e| Error::Format {
        offset: meta_at as u64,
        message: format!("bad metadata: {e}"),
    })?;
    meta.config.validate().map_err(|e| Error::Format {
        offset: meta_at as u64,
        message: format!("bad config in metadata: {e}"),
    })?;

    // Initializing from the config gives the expected tensor list; every
    // value is then overwritten from the file.
    let mut model = TransformerModel::init(meta.config.clone())?;
    let ids = model.param_ids();
    let count_at = r.pos;
    let count = r.u32("tensor count")? as usize;
    if count != ids.len() {
        return Err(Error::Format {
            offset: count_at as u64,
            message: format!("expected {} tensors, file declares {count}", ids.len()),
        });
    }
    for id in ids {
        let rec_at = r.pos;
        let name_len = r.u32("tensor name length")? as usize;
        let name = r.take(name_len, "tensor name")?;
        let name = std::str::from_utf8(name).map_err(|_| r.err("tensor name is not UTF-8"))?;
        if name != id.to_string() {
            return Err(Error::Format {
                offset: rec_at as u64,
                message: format!("expected tensor `{id}`, found `{name}`"),
            });
        }
        let rank = r.u32("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("tensor dims")? as usize);
        }
        let want = model.param(id).dims().to_vec();
        if dims != want {
            return Err(Error::Format {
                offset: rec_at as u64,
                message: format!("tensor `{id}` has dims {dims:?}, expected {want:?}"),
            });
        }
        let n: usize = dims.iter().product();
        let data_at = r.pos;
        let raw = r.take(n * 4, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Format {
            offset: data_at as u64,
            message: format!("tensor `{id}`: {e}"),
        })?;
        *model.param_mut(id) = t;
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    model.set_lineage(meta.origin_indices, meta.original_layers, meta.drop_history);
    model.validate().map_err(|e| Error::Format {
        offset: meta_at as u64,
        message: format!("inconsistent metadata: {e}"),
    })?;
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TransformerModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
