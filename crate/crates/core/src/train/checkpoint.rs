//! Checkpoint container.
//!
//! ```text
//! conntext-checkpoint <version>\n
//! header-bytes <n>\n
//! <n bytes of TOML: epoch, step, vocab, [config], [[tensors]] {name, shape, offset}>
//! <payload: little-endian f64 values; each tensor starts at its byte offset>
//! ```
//!
//! Tensors are named `param:<name>`, `adam_m:<name>` and `adam_v:<name>`.
//! Batch order is derived from the seed and epoch, so no RNG state is stored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimizerState, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::seeded;
use crate::tensor::{ParamSet, Tensor};
use crate::text::Vocabulary;

pub const CHECKPOINT_MAGIC: &str = "conntext-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub vocab: Vocabulary,
    pub model: Model,
    pub optimizer: OptimizerState,
}

#[derive(Serialize, Deserialize)]
struct Header {
    epoch: usize,
    step: u64,
    vocab: Vec<String>,
    config: TrainConfig,
    tensors: Vec<TableEntry>,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

fn named_tensors(ckpt: &Checkpoint) -> Vec<(String, &Tensor)> {
    let params = &ckpt.model.params;
    let mut out = Vec::with_capacity(3 * params.len());
    for (prefix, source) in [
        ("param", None),
        ("adam_m", Some(&ckpt.optimizer.m)),
        ("adam_v", Some(&ckpt.optimizer.v)),
    ] {
        for id in params.ids() {
            let t = match source {
                None => params.get(id),
                Some(list) => &list[id.index()],
            };
            out.push((format!("{prefix}:{}", params.name(id)), t));
        }
    }
    out
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tensors = named_tensors(ckpt);
    let mut table = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, t) in &tensors {
        table.push(TableEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        epoch: ckpt.epoch,
        step: ckpt.optimizer.step,
        vocab: ckpt.vocab.tokens().to_vec(),
        config: ckpt.config.clone(),
        tensors: table,
    };
    let header = toml::to_string(&header).map_err(|e| corrupt(format!("cannot encode header: {e}")))?;
    let mut bytes = format!(
        "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\nheader-bytes {}\n",
        header.len()
    )
    .into_bytes();
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("truncated preamble"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| corrupt("preamble is not text"))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let magic = read_line(&bytes, &mut pos)?;
    let version = magic
        .strip_prefix(CHECKPOINT_MAGIC)
        .map(str::trim)
        .ok_or_else(|| corrupt("not a checkpoint file"))?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(corrupt(format!(
            "unsupported checkpoint version {version}; expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len: usize = read_line(&bytes, &mut pos)?
        .strip_prefix("header-bytes ")
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| corrupt("missing header length"))?;
    let header_end = pos
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header_text = std::str::from_utf8(&bytes[pos..header_end]).map_err(|_| corrupt("header is not UTF-8"))?;
    let header: Header = toml::from_str(header_text).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let payload = &bytes[header_end..];

    let mut expected_len = 0usize;
    let mut lookup = std::collections::HashMap::new();
    for entry in &header.tensors {
        let count: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + 8 * count;
        if end > payload.len() {
            return Err(corrupt(format!(
                "truncated payload: {} needs bytes {start}..{end}",
                entry.name
            )));
        }
        expected_len = expected_len.max(end);
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        lookup.insert(entry.name.as_str(), Tensor::new(entry.shape.clone(), data)?);
    }
    if expected_len != payload.len() {
        return Err(corrupt(format!(
            "payload has {} bytes, table describes {expected_len}",
            payload.len()
        )));
    }

    let vocab = Vocabulary::from_lines(&(header.vocab.join("\n") + "\n"))?;
    let config = header.config;
    config.validate()?;
    let mut model = Model::new(config.model.clone(), vocab.len(), &mut seeded(0))?;
    let mut take = |prefix: &str, params: &ParamSet, id| -> Result<Tensor> {
        let name = format!("{prefix}:{}", params.name(id));
        let t = lookup
            .remove(name.as_str())
            .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        let want: &Tensor = params.get(id);
        if t.shape() != want.shape() {
            return Err(corrupt(format!(
                "dimension mismatch for {name}: checkpoint {:?}, config implies {:?}",
                t.shape(),
                want.shape()
            )));
        }
        Ok(t)
    };
    let ids: Vec<_> = model.params.ids().collect();
    let mut values = Vec::with_capacity(ids.len());
    let mut m = Vec::with_capacity(ids.len());
    let mut v = Vec::with_capacity(ids.len());
    for &id in &ids {
        values.push(take("param", &model.params, id)?);
        m.push(take("adam_m", &model.params, id)?);
        v.push(take("adam_v", &model.params, id)?);
    }
    if let Some(extra) = lookup.keys().next() {
        return Err(corrupt(format!("unexpected tensor {extra}")));
    }
    for (id, t) in ids.into_iter().zip(values) {
        model.params.set(id, t)?;
    }
    Ok(Checkpoint {
        config,
        epoch: header.epoch,
        vocab,
        model,
        optimizer: OptimizerState {
            step: header.step,
            m,
            v,
        },
    })
}
