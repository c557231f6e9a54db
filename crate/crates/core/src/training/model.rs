use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{GateVariant, GatingModule, LayerParams};
use crate::matching::HoughConfig;
use crate::pyramid::FeaturePyramid;

/// Hyperparameters shared by the forward pass and the objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub rho: usize,
    /// Target selection rate of every layer.
    pub mu: f64,
    pub hough: HoughConfig,
    pub variant: GateVariant,
    /// Weight of the l1 penalty of [`GateVariant::SigmoidL1`].
    pub l1_lambda: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rho: 8,
            mu: 0.5,
            hough: HoughConfig::default(),
            variant: GateVariant::Gumbel,
            l1_lambda: 1e-2,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rho == 0 {
            return Err(Error::InvalidArgument("rho must be at least 1".into()));
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(Error::InvalidArgument(format!("mu must lie in (0, 1], got {}", self.mu)));
        }
        if !(self.l1_lambda >= 0.0) {
            return Err(Error::InvalidArgument("l1 weight must be nonnegative".into()));
        }
        self.hough.validate()
    }
}

/// Per-layer gradients, shaped like [`ModelParams::modules`].
pub type Gradients = Vec<LayerParams>;

/// All trainable parameters: one gating module per pyramid layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub modules: Vec<GatingModule>,
    pub config: PipelineConfig,
}

impl ModelParams {
    /// Randomly initialised modules for a pyramid with the given channel counts.
    pub fn new(channels: &[usize], config: PipelineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if channels.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modules = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| GatingModule::new(l, c, config.rho, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { modules, config })
    }

    /// Parameters under which matching reduces to comparing projections of
    /// the raw features: every gate is firmly on, and transform outputs come in
    /// pairs `relu(v.f)`, `relu(-v.f)` for random directions `v`, so no
    /// position maps to an all-zero hyperpixel unless its projections vanish.
    pub fn identity_friendly(channels: &[usize], config: PipelineConfig, seed: u64) -> Result<Self> {
        let mut model = Self::new(channels, config, seed)?;
        for m in &mut model.modules {
            let p = &mut m.params;
            p.mlp_w1.iter_mut().for_each(|v| *v = 0.0);
            p.mlp_w2.iter_mut().for_each(|v| *v = 0.0);
            p.mlp_b2 = vec![5.0, -5.0];
            p.tf_b.iter_mut().for_each(|v| *v = 0.0);
            let co = m.out_channels;
            for i in 0..m.in_channels {
                for k in (1..co).step_by(2) {
                    p.tf_w[i * co + k] = -p.tf_w[i * co + k - 1];
                }
            }
        }
        Ok(model)
    }

    pub fn num_layers(&self) -> usize {
        self.modules.len()
    }

    pub fn num_params(&self) -> usize {
        self.modules.iter().map(GatingModule::num_params).sum()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.modules.iter().map(|m| m.in_channels).collect()
    }

    pub fn zero_grads(&self) -> Gradients {
        self.modules.iter().map(|m| LayerParams::zeros_like(&m.params)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.modules
            .iter()
            .all(|m| m.params.groups().iter().all(|g| g.iter().all(|v| v.is_finite())))
    }

    /// Checks that a pyramid's layer count and channels fit these modules.
    pub fn check_pyramid(&self, p: &FeaturePyramid) -> Result<()> {
        if p.channels() != self.channels() {
            return Err(Error::Validation(format!(
                "pyramid '{}' has channels {:?}, model expects {:?}",
                p.image_id,
                p.channels(),
                self.channels()
            )));
        }
        Ok(())
    }
}

pub(crate) fn grads_are_finite(g: &Gradients) -> bool {
    g.iter().all(|l| l.groups().iter().all(|v| v.iter().all(|x| x.is_finite())))
}

pub(crate) fn add_grads(acc: &mut Gradients, other: &Gradients) {
    for (a, b) in acc.iter_mut().zip(other) {
        a.add_assign(b);
    }
}
