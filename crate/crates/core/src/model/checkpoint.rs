//! Binary checkpoint container.
//!
//! Layout: `LZRD`, version (`u32` LE), header length (`u32` LE), a UTF-8
//! JSON header, then the little-endian `f32` payload. The header is an
//! object holding the config snapshot under `config` and the tensor table
//! (`name`, `shape`, `dtype`, `offset` in bytes from payload start) under
//! `tensors`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

use super::config::ModelConfig;
use super::params::{ParamGroup, ParamStore};
use super::Model;

pub const MAGIC: &[u8; 4] = b"LZRD";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    student: bool,
    tensors: Vec<Entry>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (name, t) in model.params.iter() {
        tensors.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
        });
        offset += 4 * t.numel();
    }
    let header = serde_json::to_vec(&Header {
        config: model.cfg.clone(),
        student: model.student,
        tensors,
    })?;
    let hlen = u32::try_from(header.len()).map_err(|_| Error::Contract("header too large".into()))?;
    let mut out = Vec::with_capacity(12 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&hlen.to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in model.params.iter() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let b = bytes
        .get(at..at + 4)
        .ok_or_else(|| corrupt("file ends inside the preamble"))?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses a checkpoint. Structural damage is a [`Error::CorruptCheckpoint`];
/// a tensor table that disagrees with the embedded config's layer count is
/// a [`Error::ConfigMismatch`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(corrupt("bad magic"));
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let hlen = read_u32(bytes, 8)? as usize;
    let header_bytes = bytes
        .get(12..12usize.saturating_add(hlen))
        .ok_or_else(|| corrupt("file ends inside the header"))?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| corrupt(format!("header: {e}")))?;
    let payload = &bytes[12 + hlen..];
    header
        .config
        .validate()
        .map_err(|e| corrupt(format!("config snapshot: {e}")))?;

    let mut params = ParamStore::new();
    let mut end = 0usize;
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(corrupt(format!("{}: dtype {}", e.name, e.dtype)));
        }
        if params.contains(&e.name) {
            return Err(corrupt(format!("duplicate tensor {}", e.name)));
        }
        let n = e
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt(format!("{}: shape overflows", e.name)))?;
        let stop = n
            .checked_mul(4)
            .and_then(|b| b.checked_add(e.offset))
            .ok_or_else(|| corrupt(format!("{}: offset overflows", e.name)))?;
        let raw = payload
            .get(e.offset..stop)
            .ok_or_else(|| corrupt(format!("{}: payload truncated", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| corrupt(format!("{}: {err}", e.name)))?;
        if !t.all_finite() {
            return Err(corrupt(format!("{}: non-finite values", e.name)));
        }
        params.insert(e.name.clone(), t);
        end = end.max(stop);
    }
    if end != payload.len() {
        return Err(corrupt(format!(
            "{} trailing payload bytes",
            payload.len() - end
        )));
    }
    // every layer owns several tensors; checked before building the expected set
    if header.config.n_layers > params.len() {
        return Err(Error::ConfigMismatch(format!(
            "config has {} layers but the file holds {} tensors",
            header.config.n_layers,
            params.len()
        )));
    }
    check_tensors(&header.config, header.student, &params)?;
    Ok(Model {
        cfg: header.config,
        params,
        student: header.student,
    })
}

/// Name and shape of every tensor `cfg` implies, LoRA adapters included
/// only when `lora` is set.
pub fn expected_shapes(cfg: &ModelConfig, student: bool, lora: bool) -> BTreeMap<String, Vec<usize>> {
    let (d, v) = (cfg.d_model, cfg.vocab);
    let mut m = BTreeMap::new();
    let mut put = |n: String, s: Vec<usize>| {
        m.insert(n, s);
    };
    put("embed".into(), vec![v, d]);
    put("norm_f".into(), vec![1, d]);
    put("head".into(), vec![d, v]);
    for l in 0..cfg.n_layers {
        let ln = |leaf: &str| super::lname(l, leaf);
        for w in ["wq", "wk", "wv", "wo"] {
            put(ln(w), vec![d, d]);
        }
        put(ln("norm1"), vec![1, d]);
        put(ln("norm2"), vec![1, d]);
        put(ln("w1"), vec![d, cfg.d_ff]);
        put(ln("w2"), vec![cfg.d_ff, d]);
        if lora {
            for x in ["q", "k", "v"] {
                put(ln(&format!("lora_{x}_a")), vec![d, cfg.lora.rank]);
                put(ln(&format!("lora_{x}_b")), vec![cfg.lora.rank, d]);
            }
        }
        if student && !cfg.is_retained(l) {
            put(ln("fq"), vec![cfg.head_dim, cfg.feature_dim]);
            put(ln("fk"), vec![cfg.head_dim, cfg.feature_dim]);
            put(ln("alpha"), vec![1, cfg.n_heads]);
            for (name, shape) in cfg.gate.variant.param_shapes(d, cfg.n_heads, cfg.feature_dim) {
                put(ln(&format!("gate.{name}")), shape);
            }
        }
    }
    m
}

fn layer_of(name: &str) -> Option<usize> {
    name.strip_prefix("layers.")?.split('.').next()?.parse().ok()
}

fn check_tensors(cfg: &ModelConfig, student: bool, params: &ParamStore) -> Result<()> {
    let layers = params
        .iter()
        .filter_map(|(n, _)| layer_of(n))
        .max()
        .map_or(0, |l| l + 1);
    if layers != cfg.n_layers {
        return Err(Error::ConfigMismatch(format!(
            "config has {} layers, tensors cover {layers}",
            cfg.n_layers
        )));
    }
    let lora = params.iter().any(|(n, _)| ParamGroup::of(n) == ParamGroup::Lora);
    let want = expected_shapes(cfg, student, lora);
    for (name, t) in params.iter() {
        match want.get(name) {
            None => return Err(corrupt(format!("unexpected tensor {name}"))),
            Some(s) if s.as_slice() != t.shape() => {
                return Err(corrupt(format!("{name}: shape {:?}, want {s:?}", t.shape())))
            }
            _ => {}
        }
    }
    if let Some(missing) = want.keys().find(|n| !params.contains(n)) {
        return Err(corrupt(format!("missing tensor {missing}")));
    }
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    decode_checkpoint(&std::fs::read(path)?)
}
