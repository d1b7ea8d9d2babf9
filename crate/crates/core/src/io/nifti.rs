//! Minimal NIfTI-1 single-file reader (`.nii`, `.nii.gz`).
//!
//! Voxel `(i, j, k)` of the file becomes `(z, y, x) = (k, j, i)`, which keeps
//! the on-disk memory order. Only the first 3D frame is read. Intensities are
//! rescaled by `scl_slope`/`scl_inter` when a slope is present.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const HEADER_SIZE: usize = 348;

#[derive(Clone, Copy, Debug)]
enum Endian {
    Little,
    Big,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Cursor<'_> {
    fn take<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b: [u8; N] = self.bytes[at..at + N].try_into().expect("in bounds");
        if let Endian::Big = self.endian {
            b.reverse();
        }
        b
    }

    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.take(at))
    }

    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.take(at))
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.take(at))
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    let gz = path.extension().is_some_and(|e| e == "gz");
    let res = if gz {
        GzDecoder::new(file).read_to_end(&mut bytes)
    } else {
        let mut f = file;
        f.read_to_end(&mut bytes)
    };
    res.map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

pub fn read(path: &Path) -> Result<Volume> {
    decode(&read_all(path)?, path)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(path, "file shorter than a NIfTI-1 header"));
    }
    let endian = if i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) == HEADER_SIZE as i32 {
        Endian::Little
    } else if i32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes")) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(Error::format(path, "sizeof_hdr is not 348"));
    };
    let h = Cursor { bytes, endian };
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::format(path, "only single-file NIfTI-1 (magic n+1) is supported"));
    }

    let dim: Vec<i16> = (0..8).map(|i| h.i16(40 + 2 * i)).collect();
    if !(3..=7).contains(&dim[0]) {
        return Err(Error::format(path, format!("unsupported dimensionality {}", dim[0])));
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(Error::format(path, format!("invalid extents {:?}", &dim[1..4])));
    }
    let (nx, ny, nz) = (dim[1] as usize, dim[2] as usize, dim[3] as usize);
    let datatype = h.i16(70);
    let pixdim: Vec<f32> = (0..8).map(|i| h.f32(76 + 4 * i)).collect();
    let vox_offset = h.f32(108);
    let (slope, inter) = (h.f32(112), h.f32(116));

    let n = nx * ny * nz;
    let width = match datatype {
        2 | 256 => 1,
        4 | 512 => 2,
        8 | 16 | 768 => 4,
        64 => 8,
        other => return Err(Error::format(path, format!("unsupported datatype code {other}"))),
    };
    let offset = if vox_offset >= HEADER_SIZE as f32 { vox_offset as usize } else { 352 };
    let end = offset + n * width;
    if bytes.len() < end {
        return Err(Error::format(path, format!("voxel data truncated: need {end} bytes, have {}", bytes.len())));
    }
    let raw = &bytes[offset..end];
    let c = Cursor { bytes: raw, endian };
    let value = |i: usize| -> f64 {
        let at = i * width;
        match datatype {
            2 => raw[at] as f64,
            256 => raw[at] as i8 as f64,
            4 => c.i16(at) as f64,
            512 => u16::from_le_bytes(c.take(at)) as f64,
            8 => c.i32(at) as f64,
            768 => u32::from_le_bytes(c.take(at)) as f64,
            16 => c.f32(at) as f64,
            _ => f64::from_le_bytes(c.take(at)),
        }
    };
    let scale = slope != 0.0 && slope.is_finite();
    let data = (0..n)
        .map(|i| {
            let v = value(i);
            (if scale { v * slope as f64 + inter as f64 } else { v }) as f32
        })
        .collect();
    let spacing = [pixdim[3].abs(), pixdim[2].abs(), pixdim[1].abs()].map(|s| if s > 0.0 { s } else { 1.0 });
    Volume::new([nz, ny, nx], spacing, data).map_err(|e| Error::format(path, e.to_string()))
}
