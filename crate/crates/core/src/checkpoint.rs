//! Binary checkpoint files.
//!
//! Layout: the magic bytes `MCSEG1\n`, a little-endian `u64` byte length, a
//! UTF-8 JSON header of that length, then every parameter as little-endian
//! `f32` values concatenated in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{build_model, Model, ModelSpec};
use crate::rng;

pub const MAGIC: &[u8; 7] = b"MCSEG1\n";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    pub params: Vec<ParamRecord>,
}

pub fn encode(model: &Model, epoch: Option<usize>) -> Result<Vec<u8>> {
    let header = Header {
        model: model.spec(),
        epoch,
        params: model
            .params()
            .iter()
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                dtype: "f32".into(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 4 * model.params().numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.params().iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(model: &Model, epoch: Option<usize>, path: &Path) -> Result<()> {
    let bytes = encode(model, epoch)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Rebuilds a model from checkpoint bytes, validating every record against the
/// layout implied by the stored [`ModelSpec`].
pub fn decode(bytes: &[u8], origin: &Path) -> Result<(Model, Header)> {
    let bad = |m: String| Error::format(origin, m);
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let mut at = MAGIC.len();
    let len = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")) as usize;
    at += 8;
    let json = bytes
        .get(at..at + len)
        .ok_or_else(|| bad("truncated header".into()))?;
    at += len;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;

    let mut model = build_model(header.model, &mut rng::stream(0, "checkpoint"))
        .map_err(|e| bad(e.to_string()))?;
    if header.params.len() != model.params().len() {
        return Err(bad(format!(
            "{} parameter records, model layout has {}",
            header.params.len(),
            model.params().len()
        )));
    }
    let ids: Vec<_> = model.params().ids().collect();
    for (record, id) in header.params.iter().zip(ids) {
        let expected = model.params().get(id);
        if record.name != expected.name || record.shape != expected.value.shape() {
            return Err(bad(format!(
                "record {} {:?} does not match expected {} {:?}",
                record.name,
                record.shape,
                expected.name,
                expected.value.shape()
            )));
        }
        if record.dtype != "f32" {
            return Err(bad(format!("unsupported dtype {}", record.dtype)));
        }
        let n = expected.value.numel();
        let raw = bytes
            .get(at..at + 4 * n)
            .ok_or_else(|| bad(format!("truncated data for {}", record.name)))?;
        at += 4 * n;
        let dst = model.params_mut().value_mut(id).data_mut();
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            *d = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    if at != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - at)));
    }
    Ok((model, header))
}

pub fn load(path: &Path) -> Result<(Model, Header)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
