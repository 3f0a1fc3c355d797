//! FRWT: little-endian parameter checkpoints.
//!
//! ```text
//! "FRWT" | version: u8 = 1
//! config: n_scales u32, channels u32 * n_scales, corr_radius u32,
//!         time_embed_dim u32, mlp_hidden u32, seed u64
//! entry count: u32
//! per entry: name_len u32, name (utf-8), ndim u32, shape u32 * ndim,
//!            payload f32 * prod(shape)
//! ```
//!
//! Parameters are stored as `f32`; values that are already
//! `f32`-representable round-trip exactly.

use std::path::Path;

use super::{NetworkConfig, NetworkParameters};
use crate::error::{Error, Result};
use crate::fvol::write_atomic;

pub const MAGIC: &[u8; 4] = b"FRWT";
pub const VERSION: u8 = 1;

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "FRWT",
        reason: reason.into(),
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(params: &NetworkParameters) -> Vec<u8> {
    let cfg = params.config();
    let mut out = Vec::with_capacity(64 + 4 * params.count());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    put_u32(&mut out, cfg.n_scales);
    for &c in &cfg.channels {
        put_u32(&mut out, c);
    }
    put_u32(&mut out, cfg.corr_radius);
    put_u32(&mut out, cfg.time_embed_dim);
    put_u32(&mut out, cfg.mlp_hidden);
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    put_u32(&mut out, params.entries().len());
    for e in params.entries() {
        put_u32(&mut out, e.name.len());
        out.extend_from_slice(e.name.as_bytes());
        put_u32(&mut out, e.shape.len());
        for &d in &e.shape {
            put_u32(&mut out, d);
        }
        for &v in &params.values()[e.range.clone()] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<NetworkParameters> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let n_scales = r.u32()?;
    if n_scales > 16 {
        return Err(format_err(format!("implausible scale count {n_scales}")));
    }
    let channels = (0..n_scales).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let cfg = NetworkConfig {
        n_scales,
        channels,
        corr_radius: r.u32()?,
        time_embed_dim: r.u32()?,
        mlp_hidden: r.u32()?,
        seed: r.u64()?,
    };
    let mut params = NetworkParameters::zeros(&cfg).map_err(|e| format_err(format!("config echo: {e}")))?;
    let count = r.u32()?;
    if count != params.entries().len() {
        return Err(format_err(format!(
            "{count} entries, config implies {}",
            params.entries().len()
        )));
    }
    for i in 0..count {
        let expected = params.entries()[i].clone();
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| format_err("entry name is not utf-8"))?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if name != expected.name || shape != expected.shape {
            return Err(format_err(format!(
                "entry {i} is `{name}` {shape:?}, expected `{}` {:?}",
                expected.name, expected.shape
            )));
        }
        let payload = r.take(4 * expected.range.len())?;
        for (dst, c) in params.values_mut()[expected.range].iter_mut().zip(payload.chunks_exact(4)) {
            *dst = f64::from(f32::from_le_bytes(c.try_into().unwrap()));
        }
    }
    if r.pos != bytes.len() {
        return Err(format_err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if params.values().iter().any(|v| !v.is_finite()) {
        return Err(format_err("non-finite parameter"));
    }
    Ok(params)
}

pub fn save(path: &Path, params: &NetworkParameters) -> Result<()> {
    write_atomic(path, &encode(params))
}

pub fn load(path: &Path) -> Result<NetworkParameters> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
