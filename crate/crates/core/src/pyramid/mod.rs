//! Per-image multi-layer feature blocks, pair annotations, and the synthetic
//! data path (raw images, warps, a fixed random-filter backbone).

mod backbone;
mod format;
mod image;
mod pairs;
mod synth;
mod warp;

use serde::{Deserialize, Serialize};

pub use backbone::{toy_backbone, ToyBackboneConfig};
pub use format::{load_pyramid, read_pyramid, save_pyramid, write_pyramid, PYRAMID_MAGIC, PYRAMID_VERSION};
pub use image::{load_raw_image, save_raw_image, RgbImage, IMAGE_MAGIC};
pub use pairs::{load_pair_list, parse_pair_list, save_pair_list, to_pair_list_json};
pub use synth::{
    random_affine, random_image, random_tps, synth_dataset, synth_pair, SynthDataset, SynthDatasetConfig, SynthSettings,
    WarpKind,
};
pub use warp::{Affine, ThinPlateSpline, WarpSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One layer's `h x w x c` activations, position-major and channel-minor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBlock {
    pub layer_index: usize,
    pub values: Tensor,
}

impl FeatureBlock {
    pub fn new(layer_index: usize, values: Tensor) -> Result<Self> {
        values.dims3()?;
        Ok(Self {
            layer_index,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    /// Feature vector at grid cell `(row, col)`.
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let c = self.channels();
        let start = (row * self.width() + col) * c;
        &self.values.data()[start..start + c]
    }

    /// Mirrors the block left to right.
    pub fn flipped(&self) -> FeatureBlock {
        let (h, w, c) = (self.height(), self.width(), self.channels());
        let src = self.values.data();
        let mut out = Vec::with_capacity(src.len());
        for i in 0..h {
            for j in (0..w).rev() {
                out.extend_from_slice(&src[(i * w + j) * c..(i * w + j + 1) * c]);
            }
        }
        FeatureBlock {
            layer_index: self.layer_index,
            values: Tensor::new(vec![h, w, c], out).expect("same shape"),
        }
    }
}

/// All feature blocks of one image, ordered from the base (highest
/// resolution) block upward.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub image_id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub blocks: Vec<FeatureBlock>,
}

impl FeaturePyramid {
    pub fn new(
        image_id: impl Into<String>,
        image_width: u32,
        image_height: u32,
        blocks: Vec<FeatureBlock>,
    ) -> Result<Self> {
        let p = Self {
            image_id: image_id.into(),
            image_width,
            image_height,
            blocks,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn base(&self) -> &FeatureBlock {
        &self.blocks[0]
    }

    pub fn channels(&self) -> Vec<usize> {
        self.blocks.iter().map(FeatureBlock::channels).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Validation(format!("pyramid '{}' has no blocks", self.image_id)));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::Validation(format!(
                "pyramid '{}' has an empty image size",
                self.image_id
            )));
        }
        let (h0, w0) = (self.blocks[0].height(), self.blocks[0].width());
        for (l, b) in self.blocks.iter().enumerate() {
            if b.layer_index != l {
                return Err(Error::Validation(format!(
                    "block {l} carries layer index {}",
                    b.layer_index
                )));
            }
            let (h, w, c) = b.values.dims3()?;
            if h == 0 || w == 0 || c == 0 {
                return Err(Error::Validation(format!("layer {l} is empty ({h}x{w}x{c})")));
            }
            if h > h0 || w > w0 {
                return Err(Error::Validation(format!(
                    "layer {l} ({h}x{w}) is larger than the base block ({h0}x{w0})"
                )));
            }
        }
        Ok(())
    }

    /// Checks that two pyramids can be matched layer by layer.
    pub fn check_compatible(&self, other: &FeaturePyramid) -> Result<()> {
        if self.channels() != other.channels() {
            return Err(Error::Shape(format!(
                "pyramids '{}' and '{}' disagree on channels: {:?} vs {:?}",
                self.image_id,
                other.image_id,
                self.channels(),
                other.channels()
            )));
        }
        Ok(())
    }

    /// Horizontal mirror of every block; the image size is unchanged.
    pub fn flipped(&self) -> FeaturePyramid {
        FeaturePyramid {
            image_id: self.image_id.clone(),
            image_width: self.image_width,
            image_height: self.image_height,
            blocks: self.blocks.iter().map(FeatureBlock::flipped).collect(),
        }
    }

    pub fn size(&self) -> (f64, f64) {
        (self.image_width as f64, self.image_height as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
    Unlabeled,
}

/// A source keypoint and its ground-truth target location, in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeypointPair {
    pub src: [f64; 2],
    pub trg: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairAnnotation {
    pub src_id: String,
    pub trg_id: String,
    pub keypoints: Vec<KeypointPair>,
    pub label: Label,
    pub category: String,
    /// Optional target bounding box `[x0, y0, x1, y1]` for bbox-based PCK.
    pub trg_bbox: Option<[f64; 4]>,
}

impl PairAnnotation {
    /// Checks every keypoint against the source and target image bounds.
    pub fn check_bounds(&self, src_size: (f64, f64), trg_size: (f64, f64)) -> Result<()> {
        for kp in &self.keypoints {
            check_inside(kp.src, src_size)?;
            check_inside(kp.trg, trg_size)?;
        }
        Ok(())
    }

    /// Horizontal flip of both images (`x -> width - x`).
    pub fn flipped(&self, src_width: f64, trg_width: f64) -> PairAnnotation {
        let mut out = self.clone();
        for kp in &mut out.keypoints {
            kp.src[0] = src_width - kp.src[0];
            kp.trg[0] = trg_width - kp.trg[0];
        }
        if let Some([x0, y0, x1, y1]) = self.trg_bbox {
            out.trg_bbox = Some([trg_width - x1, y0, trg_width - x0, y1]);
        }
        out
    }

    /// Exchanges the roles of source and target. The target bbox is dropped
    /// since the source one is unknown.
    pub fn swapped(&self) -> PairAnnotation {
        PairAnnotation {
            src_id: self.trg_id.clone(),
            trg_id: self.src_id.clone(),
            keypoints: self
                .keypoints
                .iter()
                .map(|kp| KeypointPair {
                    src: kp.trg,
                    trg: kp.src,
                })
                .collect(),
            label: self.label,
            category: self.category.clone(),
            trg_bbox: None,
        }
    }
}

pub(crate) fn check_inside(p: [f64; 2], (w, h): (f64, f64)) -> Result<()> {
    let inside = p[0].is_finite()
        && p[1].is_finite()
        && (0.0..=w).contains(&p[0])
        && (0.0..=h).contains(&p[1]);
    if inside {
        Ok(())
    } else {
        Err(Error::OutsideImage {
            x: p[0],
            y: p[1],
            width: w,
            height: h,
        })
    }
}
