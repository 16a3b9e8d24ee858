//! Binary checkpoint: `"P2FM"`, a u16 version, then records of
//! `[name len u16][utf-8 name][rank u8][extents u32 LE…][f64 LE payload]`,
//! closed by a CRC-32 of all preceding bytes. All integers little-endian.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::{ModelConfig, ModelParams};

const MAGIC: &[u8; 4] = b"P2FM";
const VERSION: u16 = 1;
const CONFIG_RECORD: &str = "meta.config";

fn config_tensor(c: &ModelConfig) -> Tensor {
    Tensor::vector(
        [
            c.height,
            c.width,
            c.embed_dim,
            c.stem_channels,
            c.num_queries,
            c.query_dim,
            c.mlp_hidden,
            c.num_classes,
        ]
        .iter()
        .map(|&v| v as f64)
        .collect(),
    )
}

fn config_from(t: &Tensor) -> Result<ModelConfig> {
    let d = t.data();
    if d.len() != 8 || d.iter().any(|v| v.fract() != 0.0 || *v < 1.0 || *v > 1e6) {
        return Err(Error::Data(format!("malformed {CONFIG_RECORD} record")));
    }
    let u = |i: usize| d[i] as usize;
    let c = ModelConfig {
        height: u(0),
        width: u(1),
        embed_dim: u(2),
        stem_channels: u(3),
        num_queries: u(4),
        query_dim: u(5),
        mlp_hidden: u(6),
        num_classes: u(7),
    };
    c.validate().map_err(|e| Error::Data(e.to_string()))?;
    Ok(c)
}

fn push_record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    push_record(&mut out, CONFIG_RECORD, &config_tensor(&params.config));
    for (name, t) in params.names.iter().zip(&params.tensors) {
        push_record(&mut out, name, t);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.pos,
                detail: format!("truncated {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < MAGIC.len() + 2 + 4 {
        return Err(Error::Parse {
            offset: bytes.len(),
            detail: "file too short for a checkpoint".into(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: "bad magic".into(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Parse {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let body_end = bytes.len() - 4;
    let mut cur = Cursor {
        bytes: &bytes[..body_end],
        pos: 6,
    };
    let mut records = Vec::new();
    while cur.pos < body_end {
        let start = cur.pos;
        let len = cur.take(2, "name length")?;
        let len = u16::from_le_bytes([len[0], len[1]]) as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?).map_err(|_| Error::Parse {
            offset: start + 2,
            detail: "name is not utf-8".into(),
        })?;
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = cur.take(4, "extent")?;
            shape.push(u32::from_le_bytes([d[0], d[1], d[2], d[3]]) as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Parse {
                offset: start,
                detail: "extent overflow".into(),
            })?;
        let payload = cur.take(n, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        records.push((name.to_string(), Tensor::new(shape, data)?));
    }
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(&bytes[..body_end]);
    if stored != actual {
        return Err(Error::Integrity(format!(
            "checkpoint CRC {actual:08x} does not match stored {stored:08x}"
        )));
    }

    let mut it = records.into_iter();
    let config = match it.next() {
        Some((n, t)) if n == CONFIG_RECORD => config_from(&t)?,
        _ => return Err(Error::Data(format!("checkpoint lacks {CONFIG_RECORD}"))),
    };
    let layout = config.layout();
    let rest: Vec<(String, Tensor)> = it.collect();
    if rest.len() != layout.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {} tensors, expected {}",
            rest.len(),
            layout.len()
        )));
    }
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for ((name, t), (want, shape)) in rest.into_iter().zip(layout) {
        if name != want || t.shape() != shape.as_slice() {
            return Err(Error::Data(format!(
                "checkpoint tensor {name} {:?} does not match expected {want} {shape:?}",
                t.shape()
            )));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
        }
        names.push(name);
        tensors.push(t);
    }
    Ok(ModelParams { config, names, tensors })
}

pub fn save_model(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
