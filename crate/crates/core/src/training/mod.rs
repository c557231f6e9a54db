//! Minibatch training of the gating modules.

mod batch;
mod gradcheck;
mod model;
mod optimizer;
mod pipeline;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batch::{evaluate_batch, BatchItem, BatchResult, GateSpec, LossParts, Role};
pub use gradcheck::{gradcheck, gradcheck_problem, gradcheck_with, GradcheckConfig, GradcheckReport, GroupCheck};
pub use model::{Gradients, ModelParams, PipelineConfig};
pub use optimizer::{Optimizer, OptimizerConfig, OptimizerKind};
pub use pipeline::{backward, forward, sample_noise, FrozenGate, Gates, LayerState, PairForward};

use crate::error::{Error, Result};
use crate::pyramid::{
    load_pair_list, load_pyramid, random_affine, random_tps, synth_pair, toy_backbone, FeaturePyramid, Label,
    PairAnnotation, RgbImage, SynthSettings, ToyBackboneConfig, WarpSpec,
};
use crate::util::{mix_seed, write_atomic};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    Strong,
    Weak,
    SelfSupervised,
}

impl std::str::FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strong" => Ok(Supervision::Strong),
            "weak" => Ok(Supervision::Weak),
            "self_supervised" | "self-supervised" => Ok(Supervision::SelfSupervised),
            other => Err(Error::InvalidArgument(format!("unknown supervision mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub mode: Supervision,
    /// Randomly mirror both images of a pair.
    pub flip: bool,
    /// Randomly exchange source and target.
    pub swap: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            batch_size: 4,
            iterations: 1000,
            seed: 0,
            mode: Supervision::Strong,
            flip: true,
            swap: true,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.mode == Supervision::Weak && self.batch_size < 2 {
            return Err(Error::InvalidArgument("weak supervision needs a batch of at least 2".into()));
        }
        Ok(())
    }
}

/// Annotated pairs together with the pyramids they reference.
#[derive(Clone, Debug, Default)]
pub struct PairDataset {
    pub pyramids: BTreeMap<String, FeaturePyramid>,
    pub pairs: Vec<PairAnnotation>,
}

impl PairDataset {
    /// Checks that every referenced pyramid exists, shares one layer
    /// schema, and contains its keypoints.
    pub fn new(pyramids: BTreeMap<String, FeaturePyramid>, pairs: Vec<PairAnnotation>) -> Result<Self> {
        let d = Self { pyramids, pairs };
        let mut schema: Option<&FeaturePyramid> = None;
        for p in &d.pairs {
            let (s, t) = (d.pyramid(&p.src_id)?, d.pyramid(&p.trg_id)?);
            p.check_bounds(s.size(), t.size())?;
            for x in [s, t] {
                match schema {
                    Some(first) => first.check_compatible(x)?,
                    None => schema = Some(x),
                }
            }
        }
        Ok(d)
    }

    /// Reads a pair list and `<dir>/<id>.dhpf` for every image it mentions.
    pub fn load(pair_list: impl AsRef<Path>, pyramid_dir: impl AsRef<Path>) -> Result<Self> {
        let pairs = load_pair_list(pair_list)?;
        let mut pyramids = BTreeMap::new();
        for p in &pairs {
            for id in [&p.src_id, &p.trg_id] {
                if !pyramids.contains_key(id) {
                    let path = pyramid_dir.as_ref().join(format!("{id}.dhpf"));
                    pyramids.insert(id.clone(), load_pyramid(&path)?);
                }
            }
        }
        Self::new(pyramids, pairs)
    }

    pub fn pyramid(&self, id: &str) -> Result<&FeaturePyramid> {
        self.pyramids
            .get(id)
            .ok_or_else(|| Error::Validation(format!("no pyramid for image '{id}'")))
    }

    pub fn channels(&self) -> Option<Vec<usize>> {
        self.pyramids.values().next().map(FeaturePyramid::channels)
    }

    pub fn categories(&self) -> Vec<&str> {
        let mut c: Vec<&str> = self.pairs.iter().map(|p| p.category.as_str()).collect();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Raw images from which warped training pairs are generated on the fly.
#[derive(Clone, Debug)]
pub struct SyntheticSource {
    pub images: Vec<RgbImage>,
    pub backbone: ToyBackboneConfig,
    pub backbone_seed: u64,
    pub settings: SynthSettings,
    pub keypoints: usize,
    /// Use thin-plate warps instead of affine ones.
    pub tps: bool,
}

impl SyntheticSource {
    /// One warped pair with exact keypoints, drawn from `seed`.
    pub fn draw(&self, seed: u64) -> Result<(FeaturePyramid, FeaturePyramid, PairAnnotation)> {
        if self.images.is_empty() {
            return Err(Error::InvalidArgument("no source images".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = &self.images[rng.random_range(0..self.images.len())];
        let warp = if self.tps {
            WarpSpec::Tps(random_tps(img.width, img.height, &self.settings, &mut rng)?)
        } else {
            WarpSpec::Affine(random_affine(img.width, img.height, &self.settings, &mut rng))
        };
        let (warped, mut ann) = synth_pair(img, &warp, self.keypoints, rng.random(), self.settings.margin)?;
        ann.src_id = "synthetic_src".into();
        ann.trg_id = "synthetic_trg".into();
        let src = toy_backbone(img, &self.backbone, self.backbone_seed, &ann.src_id)?;
        let trg = toy_backbone(&warped, &self.backbone, self.backbone_seed, &ann.trg_id)?;
        Ok((src, trg, ann))
    }
}

#[derive(Clone, Copy, Debug)]
pub enum TrainData<'a> {
    Pairs(&'a PairDataset),
    Synthetic(&'a SyntheticSource),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub total_loss: f64,
    pub match_loss: f64,
    pub sel_loss: f64,
    pub layer_freq: Vec<f64>,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    let layers = rows.first().map_or(0, |r| r.layer_freq.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["iteration".to_string(), "total_loss".into(), "match_loss".into(), "sel_loss".into()];
    header.extend((0..layers).map(|l| format!("layer_freq_{l}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.iteration.to_string(),
            r.total_loss.to_string(),
            r.match_loss.to_string(),
            r.sel_loss.to_string(),
        ];
        rec.extend(r.layer_freq.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::RawIo(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn save_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    write_atomic(path.as_ref(), metrics_csv(rows)?.as_bytes())
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub metrics: Vec<MetricsRow>,
}

fn augment(
    src: &FeaturePyramid,
    trg: &FeaturePyramid,
    ann: &PairAnnotation,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> (FeaturePyramid, FeaturePyramid, PairAnnotation) {
    let flip = cfg.flip && rng.random_bool(0.5);
    let swap = cfg.swap && rng.random_bool(0.5);
    let (mut s, mut t, mut a) = if flip {
        (src.flipped(), trg.flipped(), ann.flipped(src.size().0, trg.size().0))
    } else {
        (src.clone(), trg.clone(), ann.clone())
    };
    if swap {
        std::mem::swap(&mut s, &mut t);
        a = a.swapped();
    }
    (s, t, a)
}

fn pair_rng(seed: u64, iteration: usize, slot: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, iteration as u64, slot as u64]))
}

/// Builds the items of one iteration.
fn make_batch(
    params: &ModelParams,
    data: TrainData,
    cfg: &TrainConfig,
    iteration: usize,
    candidates: &[usize],
) -> Result<Vec<BatchItem>> {
    let layers = params.num_layers();
    let mut items = Vec::with_capacity(cfg.batch_size * 2);
    match data {
        TrainData::Synthetic(source) => {
            for slot in 0..cfg.batch_size {
                let mut rng = pair_rng(cfg.seed, iteration, slot);
                let (src, trg, ann) = source.draw(rng.random())?;
                let gates = GateSpec::Noise(sample_noise(layers, &mut rng));
                let (src, trg, annotation) = augment(&src, &trg, &ann, cfg, &mut rng);
                items.push(BatchItem { src, trg, annotation, role: Role::Strong, gates, weights: None });
            }
        }
        TrainData::Pairs(ds) => {
            let mut pick_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, iteration as u64, u64::MAX]));
            let n = candidates.len();
            let mut picks: Vec<usize> = sample(&mut pick_rng, n, cfg.batch_size.min(n)).into_vec();
            while picks.len() < cfg.batch_size {
                picks.push(pick_rng.random_range(0..n));
            }
            let role = if cfg.mode == Supervision::Weak { Role::Positive } else { Role::Strong };
            for (slot, &k) in picks.iter().enumerate() {
                let pair = &ds.pairs[candidates[k]];
                let mut rng = pair_rng(cfg.seed, iteration, slot);
                let gates = GateSpec::Noise(sample_noise(layers, &mut rng));
                let (src, trg, annotation) = augment(ds.pyramid(&pair.src_id)?, ds.pyramid(&pair.trg_id)?, pair, cfg, &mut rng);
                items.push(BatchItem { src, trg, annotation, role, gates, weights: None });
            }
            if cfg.mode == Supervision::Weak {
                let b = items.len();
                for i in 0..b {
                    let mut rng = pair_rng(cfg.seed, iteration, b + i);
                    let cat = &items[i].annotation.category;
                    let partner = (1..b).map(|d| (i + d) % b).find(|&j| items[j].annotation.category != *cat);
                    let trg = match partner {
                        Some(j) => items[j].trg.clone(),
                        None => {
                            let others: Vec<&PairAnnotation> =
                                ds.pairs.iter().filter(|p| p.category != *cat).collect();
                            if others.is_empty() {
                                return Err(Error::NoNegatives);
                            }
                            ds.pyramid(&others[rng.random_range(0..others.len())].trg_id)?.clone()
                        }
                    };
                    let mut annotation = items[i].annotation.clone();
                    annotation.label = Label::Negative;
                    annotation.keypoints.clear();
                    items.push(BatchItem {
                        src: items[i].src.clone(),
                        trg,
                        annotation,
                        role: Role::Negative,
                        gates: GateSpec::Noise(sample_noise(layers, &mut rng)),
                        weights: None,
                    });
                }
            }
        }
    }
    Ok(items)
}

/// Trains `params` in place of a copy and returns the final parameters with
/// one metrics row per iteration.
///
/// A non-finite loss or gradient aborts with [`Error::Diverged`], carrying
/// the parameters from before the offending update.
pub fn train(params: ModelParams, data: TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let candidates: Vec<usize> = match data {
        TrainData::Pairs(ds) => {
            if ds.pairs.is_empty() {
                return Err(Error::InvalidArgument("empty training set".into()));
            }
            if let Some(ch) = ds.channels() {
                if ch != params.channels() {
                    return Err(Error::Validation(format!(
                        "dataset channels {ch:?} do not match the model's {:?}",
                        params.channels()
                    )));
                }
            }
            match cfg.mode {
                Supervision::Weak => {
                    if ds.categories().len() < 2 {
                        return Err(Error::NoNegatives);
                    }
                    (0..ds.pairs.len()).filter(|&k| ds.pairs[k].label != Label::Negative).collect()
                }
                Supervision::Strong => (0..ds.pairs.len())
                    .filter(|&k| ds.pairs[k].label != Label::Negative && !ds.pairs[k].keypoints.is_empty())
                    .collect(),
                Supervision::SelfSupervised => {
                    return Err(Error::InvalidArgument(
                        "self-supervised training draws its own pairs from raw images".into(),
                    ))
                }
            }
        }
        TrainData::Synthetic(_) => {
            if cfg.mode != Supervision::SelfSupervised {
                return Err(Error::InvalidArgument("synthetic sources are for self-supervised training".into()));
            }
            Vec::new()
        }
    };
    if matches!(data, TrainData::Pairs(_)) && candidates.is_empty() {
        return Err(Error::InvalidArgument("no usable training pairs".into()));
    }

    let mut params = params;
    let mut opt = Optimizer::new(cfg.optimizer, &params);
    let mut metrics = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let items = make_batch(&params, data, cfg, it, &candidates)?;
        let result = match evaluate_batch(&params, &items, true) {
            Ok(r) => r,
            Err(Error::NonFinite(node)) => {
                log::error!("iteration {it}: non-finite value in {node}");
                return Err(Error::Diverged {
                    iteration: it,
                    last_finite: Box::new(params),
                });
            }
            Err(e) => return Err(e),
        };
        let grads = result.grads.expect("requested gradients");
        if !result.loss.total.is_finite() || !model::grads_are_finite(&grads) {
            log::error!("iteration {it}: non-finite loss or gradient");
            return Err(Error::Diverged {
                iteration: it,
                last_finite: Box::new(params),
            });
        }
        let loss = result.loss;
        if cfg.log_every > 0 && it % cfg.log_every == 0 {
            log::info!(
                "iter {it}: loss {:.4} (match {:.4}, sel {:.4}) freq {:?}",
                loss.total,
                loss.match_loss,
                loss.sel_loss,
                loss.layer_freq
            );
        }
        metrics.push(MetricsRow {
            iteration: it,
            total_loss: loss.total,
            match_loss: loss.match_loss,
            sel_loss: loss.sel_loss,
            layer_freq: loss.layer_freq,
        });
        let before = params.clone();
        opt.step(&mut params, &grads)?;
        if !params.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                last_finite: Box::new(before),
            });
        }
    }
    Ok(TrainOutcome { params, metrics })
}
