//! Raw RGB images: 12-byte header (`b"IMGR"`, width `u32`, height `u32`)
//! followed by `height * width * 3` bytes, row-major.

use std::path::Path;

use crate::error::{Error, Result};
use crate::util::{write_atomic, ByteReader};

pub const IMAGE_MAGIC: &[u8; 4] = b"IMGR";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Validation(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, ch: usize) -> u8 {
        self.data[(y * self.width + x) * 3 + ch]
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centres at
    /// integer positions), clamping to the border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let x = x.clamp(0.0, max_x);
        let y = y.clamp(0.0, max_y);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let mut out = [0.0; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let top = self.get(x0, y0, ch) as f64 * (1.0 - fx) + self.get(x1, y0, ch) as f64 * fx;
            let bottom = self.get(x0, y1, ch) as f64 * (1.0 - fx) + self.get(x1, y1, ch) as f64 * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len());
        out.extend_from_slice(IMAGE_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != IMAGE_MAGIC {
            return Err(Error::Format("bad magic, not a raw RGB image".into()));
        }
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let data = r.take(width * height * 3)?.to_vec();
        if r.remaining() != 0 {
            return Err(Error::Validation(format!("{} trailing bytes after image", r.remaining())));
        }
        Self::new(width, height, data)
    }
}

pub fn load_raw_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    RgbImage::from_bytes(&bytes)
}

pub fn save_raw_image(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    write_atomic(path.as_ref(), &img.to_bytes())
}
