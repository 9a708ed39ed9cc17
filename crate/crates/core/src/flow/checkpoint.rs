//! Binary checkpoints.
//!
//! Layout: the magic `FLOWDET1`, a little-endian `u64` header length, the
//! header (model configuration as UTF-8 `key = value` lines), then for every
//! layer in order a `u64` parameter count followed by that many
//! little-endian `f64` values.

use crate::config::ModelConfig;
use crate::error::{FlowError, Result};
use crate::flow::layer::Bijector;
use crate::flow::model::FlowModel;

pub const MAGIC: &[u8; 8] = b"FLOWDET1";

pub fn save_checkpoint(cfg: &ModelConfig, model: &FlowModel) -> Vec<u8> {
    let header = cfg.to_kv();
    let mut out = Vec::with_capacity(16 + header.len() + 8 * (model.num_params() + model.num_layers()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for layer in model.layers() {
        let p = layer.params();
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| FlowError::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Rebuilds the model described by the header and overwrites its parameters.
pub fn load_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, FlowModel)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(FlowError::Checkpoint("bad magic".into()));
    }
    let hlen = r.u64()? as usize;
    let header = std::str::from_utf8(r.take(hlen)?).map_err(|e| FlowError::Checkpoint(format!("header is not UTF-8: {e}")))?;
    let cfg = ModelConfig::from_kv(header)?;
    let mut model = cfg.build()?;
    for (i, layer) in model.layers_mut().enumerate() {
        let n = r.u64()? as usize;
        let p = layer.params_mut();
        if n != p.len() {
            return Err(FlowError::Checkpoint(format!("layer {i} stores {n} parameters, model expects {}", p.len())));
        }
        for v in p.iter_mut() {
            *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(FlowError::Checkpoint("trailing bytes".into()));
    }
    Ok((cfg, model))
}
