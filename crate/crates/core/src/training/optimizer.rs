use serde::{Deserialize, Serialize};

use super::model::{Gradients, ModelParams};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::InvalidArgument(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("bad optimizer settings {self:?}")))
        }
    }
}

/// Adam or plain SGD over every parameter tensor.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    m: Gradients,
    v: Gradients,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ModelParams) -> Self {
        Self {
            config,
            step: 0,
            m: params.zero_grads(),
            v: params.zero_grads(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
        if grads.len() != params.num_layers() {
            return Err(Error::Shape(format!(
                "{} gradient layers for {} parameter layers",
                grads.len(),
                params.num_layers()
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (l, module) in params.modules.iter_mut().enumerate() {
            let groups = module.params.groups_mut();
            let g = grads[l].groups();
            let m = self.m[l].groups_mut();
            let v = self.v[l].groups_mut();
            for (((p, g), m), v) in groups.into_iter().zip(g).zip(m).zip(v) {
                if p.len() != g.len() {
                    return Err(Error::Shape(format!("layer {l}: gradient length mismatch")));
                }
                match c.kind {
                    OptimizerKind::Sgd => {
                        for (p, g) in p.iter_mut().zip(g) {
                            *p -= c.lr * g;
                        }
                    }
                    OptimizerKind::Adam => {
                        for (((p, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                            let m_hat = *m / bias1;
                            let v_hat = *v / bias2;
                            *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::PipelineConfig;

    fn scalar_model() -> ModelParams {
        ModelParams::new(&[8], PipelineConfig { rho: 8, ..Default::default() }, 0).unwrap()
    }

    fn fill(model: &ModelParams, v: f64) -> Gradients {
        let mut g = model.zero_grads();
        for l in &mut g {
            for t in l.groups_mut() {
                t.iter_mut().for_each(|x| *x = v);
            }
        }
        g
    }

    #[test]
    fn sgd_examples() {
        let mut p = scalar_model();
        let before = p.clone();
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1), &p);
        let zero = p.zero_grads();
        opt.step(&mut p, &zero).unwrap();
        assert_eq!(p, before);
        let g = fill(&p, 1.0);
        opt.step(&mut p, &g).unwrap();
        let a = before.modules[0].params.mlp_b2[0];
        assert!((p.modules[0].params.mlp_b2[0] - (a - 0.1)).abs() < 1e-15);
    }

    #[test]
    fn adam_matches_textbook_recurrence() {
        let mut p = scalar_model();
        let x0 = p.modules[0].params.tf_b[0];
        let cfg = OptimizerConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut opt = Optimizer::new(cfg, &p);
        let seq = [0.5, -1.0, 2.0, 0.25];
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        for (t, g) in seq.iter().enumerate() {
            let grads = fill(&p, *g);
            opt.step(&mut p, &grads).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.modules[0].params.tf_b[0] - x).abs() < 1e-15);
        assert_eq!(opt.steps_taken(), 4);
    }
}
