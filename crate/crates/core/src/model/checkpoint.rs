//! Checkpoint container.
//!
//! ```text
//! "MFCKPT1"
//! u32 header length, header bytes (key=value text: model config + metadata)
//! u32 entry count
//! per entry, sorted by name:
//!   u32 name length, name bytes, u8 dtype code, u8 rank, u64 extents, payload
//! ```
//! All integers and payloads are little endian.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::binio::{payload_len, read_shape, write_shape, ByteReader};
use crate::config::{parse_kv, write_kv, KvReader};
use crate::error::{Error, Result};
use crate::tensor::{DType, Float};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"MFCKPT1";
/// Header keys with this prefix carry caller metadata rather than model config.
const META_PREFIX: &str = "meta.";

/// A model plus free-form metadata (for example preprocessing statistics).
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Float> {
    pub model: Model<T>,
    pub meta: BTreeMap<String, String>,
}

pub fn encode_checkpoint<T: Float>(model: &Model<T>, meta: &BTreeMap<String, String>) -> Vec<u8> {
    let mut header = model.cfg.to_kv();
    for (k, v) in meta {
        header.insert(format!("{META_PREFIX}{k}"), v.clone());
    }
    let header = write_kv(&header);
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    let params = model.named_parameters();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        write_shape(&mut out, t.shape());
        out.extend_from_slice(&T::to_le_bytes_vec(&t.data()));
    }
    out
}

pub fn decode_checkpoint<T: Float>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = ByteReader::new(bytes);
    if r.take(CHECKPOINT_MAGIC.len(), "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad magic, expected MFCKPT1".into(),
        });
    }
    let hlen = r.u32("header length")? as usize;
    let at = r.offset();
    let header = std::str::from_utf8(r.take(hlen, "header")?).map_err(|e| Error::Format {
        offset: at,
        detail: format!("header is not utf-8: {e}"),
    })?;
    let mut kv = KvReader::new(parse_kv(header)?);
    let cfg = ModelConfig::from_reader(&mut kv)?;
    let mut meta = BTreeMap::new();
    for (k, v) in kv.into_rest() {
        match k.strip_prefix(META_PREFIX) {
            Some(m) => {
                meta.insert(m.to_string(), v);
            }
            None => return Err(r.error(format!("unknown header key `{k}`"))),
        }
    }

    let count = r.u32("entry count")? as usize;
    let mut values = BTreeMap::new();
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let nlen = r.u32("name length")? as usize;
        let at = r.offset();
        let name = String::from_utf8(r.take(nlen, "name")?.to_vec()).map_err(|_| Error::Format {
            offset: at,
            detail: "parameter name is not utf-8".into(),
        })?;
        if prev.as_ref().is_some_and(|p| *p >= name) {
            return Err(Error::Format {
                offset: at,
                detail: format!("entry `{name}` out of order"),
            });
        }
        let at = r.offset();
        let code = r.u8("dtype")?;
        match DType::from_code(code) {
            Some(d) if d == T::DTYPE => {}
            other => {
                return Err(Error::Format {
                    offset: at,
                    detail: format!("entry `{name}` has dtype {other:?} (code {code}), expected {:?}", T::DTYPE),
                })
            }
        }
        let shape = read_shape(&mut r)?;
        let n = payload_len(&r, &shape, T::DTYPE.size())?;
        let data = T::from_le_slice(r.take(n, "payload")?);
        values.insert(name.clone(), (shape, data));
        prev = Some(name);
    }
    if r.remaining() != 0 {
        return Err(r.error(format!("{} trailing bytes", r.remaining())));
    }
    let model = Model::build(&cfg, 0)?;
    model.load_parameters(&values)?;
    Ok(Checkpoint { model, meta })
}

pub fn save_checkpoint<T: Float>(path: &Path, model: &Model<T>, meta: &BTreeMap<String, String>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<Checkpoint<T>> {
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
