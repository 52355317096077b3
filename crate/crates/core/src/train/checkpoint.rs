//! Binary checkpoint: `TRTR`, version, model config, provenance text, then
//! every parameter as little-endian f32 in layout order.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::net::{Model, ModelConfig, Parameters};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"TRTR";

const FLAG_PAPER_WIRING: u32 = 1;
const FLAG_AUX_HEAD: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    /// Free-form run description stored alongside the weights.
    pub provenance: String,
}

fn config_fields(cfg: &ModelConfig) -> [(&'static str, u64); 10] {
    let flags = if cfg.paper_cross_wiring { FLAG_PAPER_WIRING } else { 0 }
        | if cfg.aux_head { FLAG_AUX_HEAD } else { 0 };
    [
        ("d_model", cfg.d_model as u64),
        ("n_heads", cfg.n_heads as u64),
        ("n_enc", cfg.n_enc as u64),
        ("n_dec", cfg.n_dec as u64),
        ("d_ff", cfg.d_ff as u64),
        ("max_slots", cfg.max_slots as u64),
        ("hist_len", cfg.hist_len as u64),
        ("pred_len", cfg.pred_len as u64),
        ("flags", flags as u64),
        ("dropout", cfg.dropout.to_bits()),
    ]
}

pub fn encode_checkpoint(model: &Model<f32>, provenance: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + provenance.len() + 4 * model.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (_, v) in config_fields(&model.cfg) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(provenance.len() as u64).to_le_bytes());
    out.extend_from_slice(provenance.as_bytes());
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for v in &model.params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint. With `expected`, every config field must match.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint(String::from("bad magic bytes")));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut raw = [0u64; 10];
    for v in raw.iter_mut() {
        *v = r.u64("config block")?;
    }
    let small = |i: usize| -> Result<usize> {
        usize::try_from(raw[i]).map_err(|_| Error::Checkpoint(String::from("config field overflows")))
    };
    let cfg = ModelConfig {
        d_model: small(0)?,
        n_heads: small(1)?,
        n_enc: small(2)?,
        n_dec: small(3)?,
        d_ff: small(4)?,
        max_slots: small(5)?,
        hist_len: small(6)?,
        pred_len: small(7)?,
        paper_cross_wiring: raw[8] & FLAG_PAPER_WIRING as u64 != 0,
        aux_head: raw[8] & FLAG_AUX_HEAD as u64 != 0,
        dropout: f64::from_bits(raw[9]),
    };
    if let Some(want) = expected {
        for ((field, found), (_, exp)) in config_fields(&cfg).into_iter().zip(config_fields(want)) {
            if found != exp {
                return Err(Error::ConfigMismatch {
                    field,
                    found,
                    expected: exp,
                });
            }
        }
    }
    cfg.validate()?;
    let plen = r.u64("provenance length")? as usize;
    let provenance = core::str::from_utf8(r.take(plen, "provenance")?)
        .map_err(|_| Error::Checkpoint(String::from("provenance is not UTF-8")))?
        .into();
    let count = r.u64("parameter count")?;
    let want = crate::net::param_count(&cfg) as u64;
    if count != want {
        return Err(Error::ConfigMismatch {
            field: "param_count",
            found: count,
            expected: want,
        });
    }
    let body = r.take(count as usize * 4, "parameters")?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let model = Model::from_params(cfg, Parameters { values })?;
    Ok(Checkpoint { model, provenance })
}
