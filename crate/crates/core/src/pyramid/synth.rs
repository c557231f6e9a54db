//! Synthetic images and warped pairs with exact keypoint annotations.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    toy_backbone, Affine, FeaturePyramid, KeypointPair, Label, PairAnnotation, RgbImage, ThinPlateSpline,
    ToyBackboneConfig, WarpSpec,
};
use crate::error::{Error, Result};

/// Bounds for randomly drawn warps.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    /// Maximum absolute rotation in radians.
    pub max_rotation: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Maximum translation as a fraction of the image size.
    pub max_shift: f64,
    /// Maximum thin-plate control point displacement as a fraction of the image size.
    pub tps_jitter: f64,
    /// Keypoints stay at least this many pixels away from both image borders.
    pub margin: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            max_rotation: 0.25,
            min_scale: 0.9,
            max_scale: 1.1,
            max_shift: 0.1,
            tps_jitter: 0.05,
            margin: 4.0,
        }
    }
}

/// Procedural texture: coloured Gaussian blobs over a smooth gradient.
pub fn random_image(width: usize, height: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_blobs = (width * height / 96).max(12);
    struct Blob {
        x: f64,
        y: f64,
        inv_two_s2: f64,
        color: [f64; 3],
    }
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| {
            let s: f64 = rng.random_range(1.5..5.0);
            Blob {
                x: rng.random_range(-4.0..width as f64 + 4.0),
                y: rng.random_range(-4.0..height as f64 + 4.0),
                inv_two_s2: 1.0 / (2.0 * s * s),
                color: [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ],
            }
        })
        .collect();
    let base: [f64; 3] = [
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
    ];
    let grad: [f64; 2] = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut c = [0.0; 3];
            for (ch, v) in c.iter_mut().enumerate() {
                *v = base[ch]
                    + grad[0] * (px / width as f64 - 0.5)
                    + grad[1] * (py / height as f64 - 0.5);
            }
            for b in &blobs {
                let d2 = (px - b.x).powi(2) + (py - b.y).powi(2);
                let g = (-d2 * b.inv_two_s2).exp();
                if g > 1e-4 {
                    for ch in 0..3 {
                        c[ch] += 0.6 * g * b.color[ch];
                    }
                }
            }
            for v in c {
                data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    RgbImage {
        width,
        height,
        data,
    }
}

pub fn random_affine<R: Rng>(width: usize, height: usize, s: &SynthSettings, rng: &mut R) -> Affine {
    let angle = if s.max_rotation > 0.0 {
        rng.random_range(-s.max_rotation..=s.max_rotation)
    } else {
        0.0
    };
    let scale = if s.max_scale > s.min_scale {
        rng.random_range(s.min_scale..=s.max_scale)
    } else {
        s.min_scale
    };
    let shift = |r: &mut R, size: usize| {
        if s.max_shift > 0.0 {
            r.random_range(-s.max_shift..=s.max_shift) * size as f64
        } else {
            0.0
        }
    };
    let tx = shift(rng, width);
    let ty = shift(rng, height);
    Affine::similarity(
        [width as f64 / 2.0, height as f64 / 2.0],
        angle,
        scale,
        [tx, ty],
    )
}

/// Random thin-plate warp on a 3x3 control grid.
pub fn random_tps<R: Rng>(
    width: usize,
    height: usize,
    s: &SynthSettings,
    rng: &mut R,
) -> Result<ThinPlateSpline> {
    let (w, h) = (width as f64, height as f64);
    let mut target = Vec::with_capacity(9);
    let mut source = Vec::with_capacity(9);
    for gy in 0..3 {
        for gx in 0..3 {
            let t = [w * (0.1 + 0.4 * gx as f64), h * (0.1 + 0.4 * gy as f64)];
            let jx = rng.random_range(-s.tps_jitter..=s.tps_jitter) * w;
            let jy = rng.random_range(-s.tps_jitter..=s.tps_jitter) * h;
            target.push(t);
            source.push([t[0] + jx, t[1] + jy]);
        }
    }
    ThinPlateSpline::fit(&target, &source)
}

/// Warps `image` and samples `n_points` exact correspondences.
///
/// The returned annotation has empty image ids and category `"synthetic"`;
/// callers fill those in.
pub fn synth_pair(
    image: &RgbImage,
    warp: &WarpSpec,
    n_points: usize,
    seed: u64,
    margin: f64,
) -> Result<(RgbImage, PairAnnotation)> {
    if n_points == 0 {
        return Err(Error::InvalidArgument("synth_pair needs at least one point".into()));
    }
    let (w, h) = (image.width as f64, image.height as f64);
    if 2.0 * margin >= w || 2.0 * margin >= h {
        return Err(Error::InvalidArgument("margin leaves no room for keypoints".into()));
    }
    let back = warp.backward_map()?;
    let mut data = Vec::with_capacity(image.data.len());
    for y in 0..image.height {
        for x in 0..image.width {
            let src = back([x as f64 + 0.5, y as f64 + 0.5]);
            let rgb = image.sample_bilinear(src[0] - 0.5, src[1] - 0.5);
            data.extend(rgb.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
    }
    let warped = RgbImage::new(image.width, image.height, data)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keypoints = Vec::with_capacity(n_points);
    let max_tries = 200 * n_points;
    let mut tries = 0;
    while keypoints.len() < n_points {
        if tries == max_tries {
            return Err(Error::InvalidArgument(format!(
                "could not place {n_points} keypoints inside the warped image"
            )));
        }
        tries += 1;
        let p = [
            rng.random_range(margin..=w - margin),
            rng.random_range(margin..=h - margin),
        ];
        let Ok(q) = warp.forward(p) else { continue };
        if (margin..=w - margin).contains(&q[0]) && (margin..=h - margin).contains(&q[1]) {
            keypoints.push(KeypointPair { src: p, trg: q });
        }
    }
    Ok((
        warped,
        PairAnnotation {
            src_id: String::new(),
            trg_id: String::new(),
            keypoints,
            label: Label::Positive,
            category: "synthetic".into(),
            trg_bbox: None,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WarpKind {
    Identity,
    Affine,
    Tps,
}

/// Layout of a generated toy dataset: `categories * images_per_category`
/// base images `c{c}_i{i}`, each warped `pairs_per_image` times into
/// `c{c}_i{i}_w{j}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDatasetConfig {
    pub categories: usize,
    pub images_per_category: usize,
    pub pairs_per_image: usize,
    pub size: usize,
    pub keypoints: usize,
    pub warp: WarpKind,
    pub settings: SynthSettings,
    pub backbone: ToyBackboneConfig,
    pub backbone_seed: u64,
    pub seed: u64,
}

impl Default for SynthDatasetConfig {
    fn default() -> Self {
        Self {
            categories: 2,
            images_per_category: 4,
            pairs_per_image: 2,
            size: 64,
            keypoints: 8,
            warp: WarpKind::Affine,
            settings: SynthSettings::default(),
            backbone: ToyBackboneConfig::default(),
            backbone_seed: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SynthDataset {
    pub images: BTreeMap<String, RgbImage>,
    pub pyramids: BTreeMap<String, FeaturePyramid>,
    pub pairs: Vec<PairAnnotation>,
}

pub fn synth_dataset(cfg: &SynthDatasetConfig) -> Result<SynthDataset> {
    if cfg.categories == 0 || cfg.images_per_category == 0 || cfg.pairs_per_image == 0 || cfg.keypoints == 0 {
        return Err(Error::InvalidArgument(
            "synthetic dataset needs at least one category, image, pair and keypoint".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = SynthDataset::default();
    let size = cfg.size;
    for c in 0..cfg.categories {
        for i in 0..cfg.images_per_category {
            let base_id = format!("c{c}_i{i}");
            let base = random_image(size, size, rng.random());
            for j in 0..cfg.pairs_per_image {
                let warp = match cfg.warp {
                    WarpKind::Identity => WarpSpec::Affine(Affine::identity()),
                    WarpKind::Affine => WarpSpec::Affine(random_affine(size, size, &cfg.settings, &mut rng)),
                    WarpKind::Tps => WarpSpec::Tps(random_tps(size, size, &cfg.settings, &mut rng)?),
                };
                let (warped, mut ann) = synth_pair(&base, &warp, cfg.keypoints, rng.random(), cfg.settings.margin)?;
                let trg_id = format!("{base_id}_w{j}");
                ann.src_id = base_id.clone();
                ann.trg_id = trg_id.clone();
                ann.category = format!("cat{c}");
                let pyr = toy_backbone(&warped, &cfg.backbone, cfg.backbone_seed, &trg_id)?;
                out.pyramids.insert(trg_id.clone(), pyr);
                out.images.insert(trg_id, warped);
                out.pairs.push(ann);
            }
            let pyr = toy_backbone(&base, &cfg.backbone, cfg.backbone_seed, &base_id)?;
            out.pyramids.insert(base_id.clone(), pyr);
            out.images.insert(base_id, base);
        }
    }
    Ok(out)
}
