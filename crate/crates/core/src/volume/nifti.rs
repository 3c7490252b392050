//! Read-only import of uncompressed single-file NIfTI-1 float32 volumes.

use std::fs;
use std::path::Path;

use super::Volume3;
use crate::error::{Error, Result};
use crate::geometry::voxel_count;

const HEADER_LEN: usize = 348;
const DT_FLOAT32: i16 = 16;

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn array<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut a: [u8; N] = self.bytes[off..off + N].try_into().unwrap();
        if self.big_endian {
            a.reverse();
        }
        a
    }

    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.array(off))
    }

    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.array(off))
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume3> {
    decode_nifti(&fs::read(path)?)
}

pub(crate) fn decode_nifti(bytes: &[u8]) -> Result<Volume3> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        return Err(Error::format("compressed NIfTI (.nii.gz) is not supported"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("truncated NIfTI header"));
    }
    let size_le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let size_be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match (size_le, size_be) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(Error::format("not a NIfTI-1 file (sizeof_hdr != 348)")),
    };
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::format("only single-file NIfTI-1 (magic n+1) is supported"));
    }
    let r = Reader { bytes, big_endian };
    let datatype = r.i16(70);
    if datatype != DT_FLOAT32 {
        return Err(Error::format(format!(
            "unsupported NIfTI datatype code {datatype}; only float32 (16) is accepted"
        )));
    }
    let ndim = r.i16(40);
    let dims: Vec<i16> = (1..=7).map(|i| r.i16(40 + 2 * i)).collect();
    if !(1..=4).contains(&ndim) || (ndim == 4 && dims[3] != 1) {
        return Err(Error::format(format!("expected a 3-D volume, header declares {ndim} dimensions")));
    }
    let mut shape = [1usize; 3];
    for a in 0..(ndim as usize).min(3) {
        if dims[a] <= 0 {
            return Err(Error::format(format!("invalid dimension {} on axis {a}", dims[a])));
        }
        shape[a] = dims[a] as usize;
    }
    let offset = r.f32(108).max(HEADER_LEN as f32) as usize;
    let n = voxel_count(shape);
    let payload = bytes.get(offset..).unwrap_or(&[]);
    if payload.len() < n * 4 {
        return Err(Error::format(format!(
            "payload length mismatch: need {} bytes after offset {offset}, found {}",
            n * 4,
            payload.len()
        )));
    }
    let slope = r.f32(112);
    let inter = r.f32(116);
    let scale = |v: f32| if slope != 0.0 && slope.is_finite() { v * slope + inter } else { v };
    let data: Vec<f32> = payload[..n * 4]
        .chunks_exact(4)
        .map(|c| {
            let mut a: [u8; 4] = c.try_into().unwrap();
            if big_endian {
                a.reverse();
            }
            scale(f32::from_le_bytes(a))
        })
        .collect();
    let mut v = Volume3::new(shape, 1, data).map_err(|e| Error::format(e.to_string()))?;
    v.spacing = [r.f32(80), r.f32(84), r.f32(88)].map(|s| if s > 0.0 { s as f64 } else { 1.0 });
    v.origin = [r.f32(268), r.f32(272), r.f32(276)].map(f64::from);
    Ok(v)
}
