//! A frozen stand-in for a pretrained CNN: a stack of seeded random
//! convolutions with `tanh` activations.
//!
//! Layer `l` has total stride `strides[l]` with respect to the input image.
//! Layer 0 convolves the image directly; every later layer convolves the
//! previous layer's output with relative stride `strides[l] / strides[l-1]`.
//! A layer with relative stride `s` uses an `(s + 2) x (s + 2)` kernel
//! centred on its output cell, with zero padding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{FeatureBlock, FeaturePyramid, RgbImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyBackboneConfig {
    pub strides: Vec<usize>,
    pub channels: Vec<usize>,
    /// Standard deviation multiplier for the random filters.
    pub gain: f64,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        Self {
            strides: vec![4, 4, 8, 8],
            channels: vec![16, 16, 32, 32],
            gain: 1.5,
        }
    }
}

impl ToyBackboneConfig {
    pub fn num_layers(&self) -> usize {
        self.strides.len()
    }

    fn validate(&self) -> Result<()> {
        if self.strides.is_empty() || self.strides.len() != self.channels.len() {
            return Err(Error::InvalidArgument(
                "backbone needs matching, non-empty stride and channel lists".into(),
            ));
        }
        if self.channels.iter().any(|&c| c == 0) || self.strides[0] == 0 {
            return Err(Error::InvalidArgument("zero channels or stride".into()));
        }
        for w in self.strides.windows(2) {
            if w[1] < w[0] || w[1] % w[0] != 0 {
                return Err(Error::InvalidArgument(format!(
                    "strides must be non-decreasing multiples, got {:?}",
                    self.strides
                )));
            }
        }
        Ok(())
    }
}

struct ConvLayer {
    stride: usize,
    kernel: usize,
    in_channels: usize,
    out_channels: usize,
    // [out][ky][kx][in]
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvLayer {
    fn random(rng: &mut ChaCha8Rng, stride: usize, cin: usize, cout: usize, gain: f64) -> Self {
        let kernel = stride + 2;
        let fan_in = (kernel * kernel * cin) as f64;
        let w = Normal::new(0.0, gain / fan_in.sqrt()).expect("valid std");
        let b = Normal::new(0.0, 0.1).expect("valid std");
        let weights = (0..cout * kernel * kernel * cin).map(|_| w.sample(rng)).collect();
        let bias = (0..cout).map(|_| b.sample(rng)).collect();
        Self {
            stride,
            kernel,
            in_channels: cin,
            out_channels: cout,
            weights,
            bias,
        }
    }

    /// `input` is `h x w x cin`; output is `(h / s) x (w / s) x cout`.
    fn apply(&self, input: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
        let s = self.stride;
        let (oh, ow) = (h / s, w / s);
        let k = self.kernel;
        let cin = self.in_channels;
        let mut out = vec![0.0; oh * ow * self.out_channels];
        for oi in 0..oh {
            for oj in 0..ow {
                let y0 = (oi * s) as isize - 1;
                let x0 = (oj * s) as isize - 1;
                let cell = &mut out[(oi * ow + oj) * self.out_channels..][..self.out_channels];
                for (co, o) in cell.iter_mut().enumerate() {
                    let mut acc = self.bias[co];
                    let wk = &self.weights[co * k * k * cin..(co + 1) * k * k * cin];
                    for ky in 0..k {
                        let y = y0 + ky as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let x = x0 + kx as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            let px = &input[(y as usize * w + x as usize) * cin..][..cin];
                            let wv = &wk[(ky * k + kx) * cin..][..cin];
                            acc += px.iter().zip(wv).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    // round through f32 so pyramids survive the binary format exactly
                    *o = (acc.tanh() as f32) as f64;
                }
            }
        }
        (out, oh, ow)
    }
}

/// Runs the seeded random backbone on an image.
pub fn toy_backbone(
    image: &RgbImage,
    config: &ToyBackboneConfig,
    seed: u64,
    image_id: &str,
) -> Result<FeaturePyramid> {
    config.validate()?;
    if image.width < 16 || image.height < 16 {
        return Err(Error::InvalidArgument(format!(
            "toy backbone needs at least 16x16 pixels, got {}x{}",
            image.width, image.height
        )));
    }
    if image.width < config.strides[config.num_layers() - 1]
        || image.height < config.strides[config.num_layers() - 1]
    {
        return Err(Error::InvalidArgument("image smaller than the deepest stride".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current: Vec<f64> = image.data.iter().map(|&v| v as f64 / 127.5 - 1.0).collect();
    let (mut h, mut w, mut c) = (image.height, image.width, 3usize);
    let mut blocks = Vec::with_capacity(config.num_layers());
    let mut prev_stride = 1;
    for l in 0..config.num_layers() {
        let rel = config.strides[l] / prev_stride;
        prev_stride = config.strides[l];
        let layer = ConvLayer::random(&mut rng, rel, c, config.channels[l], config.gain);
        let (out, oh, ow) = layer.apply(&current, h, w);
        blocks.push(FeatureBlock::new(
            l,
            Tensor::new(vec![oh, ow, config.channels[l]], out.clone())?,
        )?);
        current = out;
        h = oh;
        w = ow;
        c = config.channels[l];
    }
    FeaturePyramid::new(image_id, image.width as u32, image.height as u32, blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::random_image;

    #[test]
    fn shapes_follow_strides_and_channels() {
        let img = random_image(64, 64, 3);
        let p = toy_backbone(&img, &ToyBackboneConfig::default(), 1, "x").unwrap();
        let shapes: Vec<_> = p.blocks.iter().map(|b| b.values.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![16, 16, 16], vec![16, 16, 16], vec![8, 8, 32], vec![8, 8, 32]]
        );
    }

    #[test]
    fn deterministic_per_seed() {
        let img = random_image(32, 48, 9);
        let cfg = ToyBackboneConfig::default();
        let a = toy_backbone(&img, &cfg, 5, "x").unwrap();
        let b = toy_backbone(&img, &cfg, 5, "x").unwrap();
        let c = toy_backbone(&img, &cfg, 6, "x").unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.channels(), c.channels());
        for (x, y) in a.blocks.iter().zip(&c.blocks) {
            assert_eq!(x.values.shape(), y.values.shape());
        }
    }

    #[test]
    fn rejects_tiny_images() {
        let img = RgbImage::filled(15, 40, [0, 0, 0]);
        assert!(toy_backbone(&img, &ToyBackboneConfig::default(), 0, "x").is_err());
    }

    #[test]
    fn base_block_is_shift_consistent() {
        let img = random_image(64, 64, 11);
        // shift content right by one base stride (4 px)
        let mut shifted = RgbImage::filled(64, 64, [128, 128, 128]);
        for y in 0..64 {
            for x in 4..64 {
                for ch in 0..3 {
                    shifted.data[(y * 64 + x) * 3 + ch] = img.get(x - 4, y, ch);
                }
            }
        }
        let cfg = ToyBackboneConfig::default();
        let a = toy_backbone(&img, &cfg, 2, "a").unwrap();
        let b = toy_backbone(&shifted, &cfg, 2, "b").unwrap();
        // interior cells away from the left edge and the right border
        for i in 1..15 {
            for j in 2..15 {
                assert_eq!(a.base().at(i, j - 1), b.base().at(i, j), "cell ({i},{j})");
            }
        }
    }
}
