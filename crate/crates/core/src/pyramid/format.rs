//! Binary pyramid files.
//!
//! Layout (little-endian):
//! - magic `b"DHPF"`, version `u32` (= 1)
//! - image id: `u16` byte length + UTF-8 bytes
//! - image width `u32`, image height `u32`
//! - layer count `u32`
//! - per layer: `h u32`, `w u32`, `c u32`, then `h*w*c` `f32` values,
//!   position-major and channel-minor.
//!
//! Values are stored as `f32`; anything that came from an `f32` source
//! round-trips bit-exactly.

use std::path::Path;

use super::{FeatureBlock, FeaturePyramid};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::{write_atomic, ByteReader};

pub const PYRAMID_MAGIC: &[u8; 4] = b"DHPF";
pub const PYRAMID_VERSION: u32 = 1;

pub fn write_pyramid(p: &FeaturePyramid) -> Result<Vec<u8>> {
    let id = p.image_id.as_bytes();
    let id_len = u16::try_from(id.len())
        .map_err(|_| Error::InvalidArgument(format!("image id too long ({} bytes)", id.len())))?;
    let payload: usize = p.blocks.iter().map(|b| b.values.len() * 4 + 12).sum();
    let mut out = Vec::with_capacity(22 + id.len() + payload);
    out.extend_from_slice(PYRAMID_MAGIC);
    out.extend_from_slice(&PYRAMID_VERSION.to_le_bytes());
    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&p.image_width.to_le_bytes());
    out.extend_from_slice(&p.image_height.to_le_bytes());
    out.extend_from_slice(&(p.blocks.len() as u32).to_le_bytes());
    for b in &p.blocks {
        for dim in [b.height(), b.width(), b.channels()] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in b.values.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_pyramid(bytes: &[u8]) -> Result<FeaturePyramid> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != PYRAMID_MAGIC {
        return Err(Error::Format("bad magic, not a pyramid file".into()));
    }
    let version = r.u32()?;
    if version != PYRAMID_VERSION {
        return Err(Error::Format(format!("unsupported pyramid version {version}")));
    }
    let id_len = r.u16()? as usize;
    let image_id = std::str::from_utf8(r.take(id_len)?)
        .map_err(|e| Error::Format(format!("image id is not UTF-8: {e}")))?
        .to_owned();
    let image_width = r.u32()?;
    let image_height = r.u32()?;
    let layers = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(layers.min(1024));
    for l in 0..layers {
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let c = r.u32()? as usize;
        let declared = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| Error::Validation(format!("layer {l}: {h}x{w}x{c} overflows")))?;
        let available = r.remaining() / 4;
        if available < declared && r.remaining() % 4 == 0 && l + 1 == layers {
            return Err(Error::Validation(format!(
                "layer {l} declares {h}x{w}x{c} = {declared} values but {available} are present"
            )));
        }
        let raw = r.take(declared * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        blocks.push(FeatureBlock::new(l, Tensor::new(vec![h, w, c], values)?)?);
    }
    if r.remaining() != 0 {
        return Err(Error::Validation(format!(
            "{} trailing bytes after the last layer",
            r.remaining()
        )));
    }
    FeaturePyramid::new(image_id, image_width, image_height, blocks)
}

pub fn save_pyramid(path: impl AsRef<Path>, p: &FeaturePyramid) -> Result<()> {
    write_atomic(path.as_ref(), &write_pyramid(p)?)
}

pub fn load_pyramid(path: impl AsRef<Path>) -> Result<FeaturePyramid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_pyramid(&bytes)
}
