//! RCV1 volume files.
//!
//! Layout (all little-endian):
//!
//! | offset | size | field |
//! |--------|------|-------|
//! | 0  | 4  | magic `RCV1` |
//! | 4  | 4  | u32 version = 1 |
//! | 8  | 8  | reserved, zero |
//! | 16 | 4  | u32 channels |
//! | 20 | 12 | 3 × u32 shape (x, y, z) |
//! | 32 | 24 | 3 × f64 spacing |
//! | 56 | 24 | 3 × f64 origin |
//! | 80 | …  | f32 values, channel-interleaved, x fastest |

use std::fs;
use std::path::Path;

use super::Volume3;
use crate::error::{Error, Result};
use crate::geometry::voxel_count;

pub const MAGIC: &[u8; 4] = b"RCV1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 80;

pub fn encode(v: &Volume3) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + v.data().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&[0u8; 8]);
    out.extend_from_slice(&(v.channels() as u32).to_le_bytes());
    for d in v.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in v.spacing.iter().chain(v.origin.iter()) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f64_at(b: &[u8], off: usize) -> f64 {
    f64::from_le_bytes(b[off..off + 8].try_into().unwrap())
}

pub fn decode(bytes: &[u8]) -> Result<Volume3> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format("bad magic, not an RCV1 file"));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::format(format!("unsupported RCV version {version}")));
    }
    let channels = u32_at(bytes, 16) as usize;
    let shape = [u32_at(bytes, 20), u32_at(bytes, 24), u32_at(bytes, 28)].map(|d| d as usize);
    if channels == 0 || shape.contains(&0) {
        return Err(Error::format(format!("empty volume: shape {shape:?}, {channels} channels")));
    }
    let expected = voxel_count(shape)
        .checked_mul(channels)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format("shape overflows"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::format(format!(
            "payload length mismatch: header implies {expected} bytes, found {}",
            payload.len()
        )));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(format!("non-finite value at element {i}")));
    }
    let mut v = Volume3::new(shape, channels, data)?;
    v.spacing = [f64_at(bytes, 32), f64_at(bytes, 40), f64_at(bytes, 48)];
    v.origin = [f64_at(bytes, 56), f64_at(bytes, 64), f64_at(bytes, 72)];
    Ok(v)
}

pub fn write_volume(v: &Volume3, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(v))?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3> {
    decode(&fs::read(path)?)
}
