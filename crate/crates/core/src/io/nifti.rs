//! Ingestion-only reader for single-file NIfTI-1 volumes (`.nii`, 348-byte header).
//!
//! Scalar 2-D/3-D volumes only; intensity scaling (`scl_slope`, `scl_inter`) is applied.
//! Trailing singleton dimensions are dropped, so a `64×64×1` file becomes a 2-D grid.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{GridSpec, ImageField};

const HEADER_LEN: usize = 348;

fn fmt_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    little: bool,
}

impl Reader<'_> {
    fn arr<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut a: [u8; N] = self.bytes[off..off + N].try_into().expect("in-bounds header field");
        if !self.little {
            a.reverse();
        }
        a
    }
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.arr(off))
    }
    fn i32(&self, off: usize) -> i32 {
        i32::from_le_bytes(self.arr(off))
    }
    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.arr(off))
    }
    fn f64(&self, off: usize) -> f64 {
        f64::from_le_bytes(self.arr(off))
    }
}

/// Decode an in-memory `.nii` file into an image field.
pub fn decode_nifti(bytes: &[u8]) -> Result<ImageField> {
    if bytes.len() < HEADER_LEN {
        return Err(fmt_err(bytes.len(), "file shorter than the 348-byte header"));
    }
    let raw = i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes"));
    let little = if raw == HEADER_LEN as i32 {
        true
    } else if raw.swap_bytes() == HEADER_LEN as i32 {
        false
    } else {
        return Err(fmt_err(0, format!("sizeof_hdr is {raw}, expected 348")));
    };
    let r = Reader { bytes, little };
    if &bytes[344..348] != b"n+1\0" {
        return Err(fmt_err(344, "missing single-file `n+1` magic"));
    }
    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(fmt_err(40, format!("dim[0] = {ndim} out of range")));
    }
    let mut dims = Vec::new();
    let mut spacing = Vec::new();
    for i in 1..=ndim as usize {
        let d = r.i16(40 + 2 * i);
        if d < 1 {
            return Err(fmt_err(40 + 2 * i, format!("dim[{i}] = {d} is not positive")));
        }
        dims.push(d as usize);
        let p = r.f32(76 + 4 * i).abs();
        spacing.push(if p > 0.0 && p.is_finite() { f64::from(p) } else { 1.0 });
    }
    while dims.len() > 2 && dims.last() == Some(&1) {
        dims.pop();
        spacing.pop();
    }
    if dims.len() > 3 {
        return Err(fmt_err(40, format!("only scalar 2-D/3-D volumes are supported, got dims {dims:?}")));
    }
    let datatype = r.i16(70);
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 | 768 => 4,
        64 | 1024 | 1280 => 8,
        other => return Err(fmt_err(70, format!("unsupported datatype code {other}"))),
    };
    let vox_offset = r.f32(108);
    if !(vox_offset >= HEADER_LEN as f32) || vox_offset.fract() != 0.0 {
        return Err(fmt_err(108, format!("invalid vox_offset {vox_offset}")));
    }
    let start = vox_offset as usize;
    let count: usize = dims.iter().product();
    let end = start + count * width;
    if bytes.len() < end {
        return Err(fmt_err(
            bytes.len(),
            format!("payload truncated: need {end} bytes, file has {}", bytes.len()),
        ));
    }
    let slope = r.f32(112);
    let inter = r.f32(116);
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() {
        (1.0, 0.0)
    } else {
        (f64::from(slope), f64::from(inter))
    };
    let values = (0..count)
        .map(|i| {
            let off = start + i * width;
            let v = match datatype {
                2 => f64::from(bytes[off]),
                256 => f64::from(bytes[off] as i8),
                4 => f64::from(r.i16(off)),
                512 => f64::from(r.i16(off) as u16),
                8 => f64::from(r.i32(off)),
                768 => f64::from(r.i32(off) as u32),
                16 => f64::from(r.f32(off)),
                64 => r.f64(off),
                1024 => i64::from_le_bytes(r.arr(off)) as f64,
                _ => u64::from_le_bytes(r.arr(off)) as f64,
            };
            v * slope + inter
        })
        .collect();
    let grid = GridSpec::with_spacing(&dims, &spacing).map_err(|e| fmt_err(40, e.to_string()))?;
    ImageField::new(grid, values)
}

pub fn read_nifti(path: &Path) -> Result<ImageField> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_nifti(&bytes)
}
