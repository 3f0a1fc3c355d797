//! FVOL: little-endian container for volumes, displacement fields and label
//! maps.
//!
//! Layout:
//!
//! ```text
//! "FVOL" | version: u8 = 1
//! nx, ny, nz, channels, dtype: u32   (dtype 0 = f32, 1 = u8 label)
//! sx, sy, sz: f32
//! payload: channel-major, x fastest within a channel
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Dims, DisplacementField, LabelMap, Spacing, Volume};

pub const MAGIC: &[u8; 4] = b"FVOL";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 5 * 4 + 3 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum DType {
    F32 = 0,
    Label = 1,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Header {
    pub dims: Dims,
    pub channels: u32,
    pub dtype: DType,
    pub spacing: [f32; 3],
}

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format {
        format: "FVOL",
        reason: reason.into(),
    }
}

fn encode_header(out: &mut Vec<u8>, h: &Header) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for v in [h.dims.nx as u32, h.dims.ny as u32, h.dims.nz as u32, h.channels, h.dtype as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in h.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
}

pub fn decode_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(format_err(format!("unsupported version {}", bytes[4])));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap());
    let f32_at = |i: usize| f32::from_le_bytes(bytes[25 + 4 * i..29 + 4 * i].try_into().unwrap());
    let dtype = match u32_at(4) {
        0 => DType::F32,
        1 => DType::Label,
        other => return Err(format_err(format!("unknown dtype {other}"))),
    };
    Ok(Header {
        dims: Dims::new(u32_at(0) as usize, u32_at(1) as usize, u32_at(2) as usize),
        channels: u32_at(3),
        dtype,
        spacing: [f32_at(0), f32_at(1), f32_at(2)],
    })
}

fn spacing_f32(s: Spacing) -> [f32; 3] {
    s.0.map(|v| v as f32)
}

fn spacing_f64(s: [f32; 3]) -> Spacing {
    Spacing(s.map(f64::from))
}

fn encode_f32(dims: Dims, spacing: Spacing, channels: u32, data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * data.len());
    encode_header(
        &mut out,
        &Header {
            dims,
            channels,
            dtype: DType::F32,
            spacing: spacing_f32(spacing),
        },
    );
    for v in data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

fn decode_f32(bytes: &[u8], channels: u32) -> Result<(Header, Vec<f64>)> {
    let h = decode_header(bytes)?;
    if h.dtype != DType::F32 || h.channels != channels {
        return Err(format_err(format!(
            "expected {channels} f32 channel(s), found {} of {:?}",
            h.channels, h.dtype
        )));
    }
    let count = h.dims.len() * channels as usize;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 4 * count {
        return Err(format_err(format!("payload is {} bytes, expected {}", payload.len(), 4 * count)));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok((h, data))
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    encode_f32(v.dims, v.spacing, 1, &v.data)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let (h, data) = decode_f32(bytes, 1)?;
    Volume::new(h.dims, spacing_f64(h.spacing), data)
}

pub fn encode_field(f: &DisplacementField) -> Vec<u8> {
    encode_f32(f.dims, f.spacing, 3, &f.data)
}

pub fn decode_field(bytes: &[u8]) -> Result<DisplacementField> {
    let (h, data) = decode_f32(bytes, 3)?;
    DisplacementField::new(h.dims, spacing_f64(h.spacing), data)
}

pub fn encode_labels(l: &LabelMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + l.data.len());
    encode_header(
        &mut out,
        &Header {
            dims: l.dims,
            channels: 1,
            dtype: DType::Label,
            spacing: spacing_f32(l.spacing),
        },
    );
    out.extend_from_slice(&l.data);
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelMap> {
    let h = decode_header(bytes)?;
    if h.dtype != DType::Label || h.channels != 1 {
        return Err(format_err("expected a single-channel label map"));
    }
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != h.dims.len() {
        return Err(format_err(format!("payload is {} bytes, expected {}", payload.len(), h.dims.len())));
    }
    LabelMap::new(h.dims, spacing_f64(h.spacing), payload.to_vec())
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_atomic(path, &encode_volume(v))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&read(path)?)
}

pub fn write_field(path: &Path, f: &DisplacementField) -> Result<()> {
    write_atomic(path, &encode_field(f))
}

pub fn read_field(path: &Path) -> Result<DisplacementField> {
    decode_field(&read(path)?)
}

pub fn write_labels(path: &Path, l: &LabelMap) -> Result<()> {
    write_atomic(path, &encode_labels(l))
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    decode_labels(&read(path)?)
}
