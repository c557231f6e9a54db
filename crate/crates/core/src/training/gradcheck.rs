//! Central finite-difference check of the reverse pass.
//!
//! Gate noise, hard decisions, and keypoint weights are frozen at the base
//! point, which turns the training objective into a deterministic function of
//! the parameters whose exact gradient is the straight-through gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::batch::{evaluate_batch, BatchItem, GateSpec, Role};
use super::model::{ModelParams, PipelineConfig};
use super::pipeline::sample_noise;
use crate::error::{Error, Result};
use crate::gating::PARAM_GROUPS;
use crate::pyramid::{
    random_affine, random_image, synth_pair, toy_backbone, SynthSettings, ToyBackboneConfig, WarpSpec,
};
use crate::util::mix_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub layers: usize,
    pub channels: usize,
    pub image_size: usize,
    pub pairs: usize,
    pub keypoints: usize,
    pub seed: u64,
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub tolerance: f64,
    pub pipeline: PipelineConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            channels: 16,
            image_size: 32,
            pairs: 2,
            keypoints: 2,
            seed: 7,
            step: 1e-5,
            floor: 1e-6,
            tolerance: 1e-4,
            pipeline: PipelineConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupCheck {
    pub layer: usize,
    pub group: &'static str,
    pub params: usize,
    pub max_abs_grad: f64,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub gates_on: Vec<Vec<bool>>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<6} {:<12} {:>7} {:>12} {:>12}  status\n", "layer", "group", "params", "max|grad|", "max rel err");
        for g in &self.groups {
            s.push_str(&format!(
                "{:<6} {:<12} {:>7} {:>12.3e} {:>12.3e}  {}\n",
                g.layer,
                g.group,
                g.params,
                g.max_abs_grad,
                g.max_rel_err,
                if g.max_rel_err < self.tolerance { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

/// Small synthetic problem: `pairs` warped toy-backbone pairs with
/// `layers` blocks of at most 8x8 cells.
pub fn gradcheck_problem(cfg: &GradcheckConfig) -> Result<(ModelParams, Vec<BatchItem>)> {
    if cfg.layers == 0 || cfg.layers > 8 || cfg.pairs == 0 || cfg.keypoints == 0 {
        return Err(Error::InvalidArgument(format!("bad gradcheck config {cfg:?}")));
    }
    let strides: Vec<usize> = (0..cfg.layers).map(|l| if l < cfg.layers / 2 { 4 } else { 8 }).collect();
    let backbone = ToyBackboneConfig {
        strides,
        channels: vec![cfg.channels; cfg.layers],
        gain: 1.5,
    };
    let size = cfg.image_size;
    let mut items = Vec::with_capacity(cfg.pairs);
    for p in 0..cfg.pairs {
        let seed = mix_seed(&[cfg.seed, p as u64]);
        let img = random_image(size, size, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let warp = WarpSpec::Affine(random_affine(size, size, &SynthSettings::default(), &mut rng));
        let (warped, annotation) = synth_pair(&img, &warp, cfg.keypoints, seed ^ 1, 2.0)?;
        let src = toy_backbone(&img, &backbone, cfg.seed, "src")?;
        let trg = toy_backbone(&warped, &backbone, cfg.seed, "trg")?;
        let noise = sample_noise(cfg.layers, &mut rng);
        items.push(BatchItem {
            src,
            trg,
            annotation,
            role: Role::Strong,
            gates: GateSpec::Noise(noise),
            weights: None,
        });
    }
    let mut params = ModelParams::new(&backbone.channels, cfg.pipeline.clone(), cfg.seed)?;
    // small random output biases so the gates are neither certain nor tied
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 99]));
    for m in &mut params.modules {
        m.params.mlp_b2 = vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        m.params.tf_b.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
    }
    Ok((params, items))
}

/// Compares the analytic gradient of the total loss with central finite
/// differences for every parameter.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let (params, items) = gradcheck_problem(cfg)?;
    gradcheck_with(&params, items, cfg)
}

pub fn gradcheck_with(params: &ModelParams, mut items: Vec<BatchItem>, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let base = evaluate_batch(params, &items, true)?;
    let analytic = base.grads.expect("requested gradients");
    for ((it, frozen), w) in items.iter_mut().zip(base.frozen).zip(base.weights) {
        it.gates = GateSpec::Frozen(frozen);
        if it.role == Role::Strong {
            it.weights = Some(w);
        }
    }
    let gates_on = items
        .iter()
        .map(|it| match &it.gates {
            GateSpec::Frozen(f) => f.iter().map(|g| g.on).collect(),
            _ => unreachable!(),
        })
        .collect();
    let loss_at = |p: &ModelParams| -> Result<f64> { Ok(evaluate_batch(p, &items, false)?.loss.total) };
    let mut groups = Vec::new();
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for l in 0..params.num_layers() {
        for (gi, name) in PARAM_GROUPS.iter().enumerate() {
            let n = params.modules[l].params.groups()[gi].len();
            let mut max_rel: f64 = 0.0;
            let mut max_abs: f64 = 0.0;
            for k in 0..n {
                let x = params.modules[l].params.groups()[gi][k];
                probe.modules[l].params.groups_mut()[gi][k] = x + cfg.step;
                let plus = loss_at(&probe)?;
                probe.modules[l].params.groups_mut()[gi][k] = x - cfg.step;
                let minus = loss_at(&probe)?;
                probe.modules[l].params.groups_mut()[gi][k] = x;
                let fd = (plus - minus) / (2.0 * cfg.step);
                let a = analytic[l].groups()[gi][k];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(cfg.floor);
                if rel > max_rel {
                    log::debug!("layer {l} {name}[{k}]: analytic {a:e}, numeric {fd:e}");
                }
                max_rel = max_rel.max(rel);
                max_abs = max_abs.max(a.abs());
            }
            worst = worst.max(max_rel);
            groups.push(GroupCheck {
                layer: l,
                group: name,
                params: n,
                max_abs_grad: max_abs,
                max_rel_err: max_rel,
            });
        }
    }
    Ok(GradcheckReport {
        groups,
        max_rel_err: worst,
        tolerance: cfg.tolerance,
        gates_on,
    })
}
