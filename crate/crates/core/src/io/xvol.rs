//! Raw little-endian volume container.
//!
//! Layout: the five bytes `XVOL1`, three `u32` extents (D, H, W), three `f32`
//! spacings in mm, then `D * H * W` `f32` intensities with W varying fastest.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const MAGIC: &[u8; 5] = b"XVOL1";
const HEADER_LEN: usize = 5 + 12 + 12;

pub fn encode(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * v.len());
    out.extend_from_slice(MAGIC);
    for d in v.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in v.spacing() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Volume> {
    if bytes.len() < HEADER_LEN || &bytes[..5] != MAGIC {
        return Err(Error::format(path, "not an XVOL1 file"));
    }
    let word = |i: usize| <[u8; 4]>::try_from(&bytes[i..i + 4]).expect("4 bytes");
    let shape = [0, 1, 2].map(|a| u32::from_le_bytes(word(5 + 4 * a)) as usize);
    let spacing = [0, 1, 2].map(|a| f32::from_le_bytes(word(17 + 4 * a)));
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(path, "extent overflow"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != n * 4 {
        return Err(Error::format(
            path,
            format!("expected {} data bytes for {shape:?}, found {}", n * 4, body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Volume::new(shape, spacing, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write(path: &Path, v: &Volume) -> Result<()> {
    fs::write(path, encode(v)).map_err(|e| Error::io(path, e))
}
