//! Per-layer dynamic gating.
//!
//! Each layer owns a [`GatingModule`] with two branches: a relevance MLP that
//! scores the layer from globally pooled source and target statistics, and a
//! position-wise linear transform (a 1x1 convolution followed by ReLU) that
//! shrinks the channel count by `rho`.
//!
//! In the Gumbel variant the relevance vector `r = (r_on, r_off)` is treated as
//! log-probabilities of a Bernoulli gate. Training draws Gumbel noise `z` and
//! takes `argmax(r + z)`; the forward pass multiplies the transformed blocks
//! by that hard 0/1 decision while gradients flow through
//! `softmax(r + z)[on]`. Evaluation drops the noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::FeatureBlock;
use crate::tensor::{global_avg_pool, sigmoid, softmax_unchecked, Tensor};

/// Uniform draws are clamped into `[GUMBEL_CLAMP, 1 - GUMBEL_CLAMP]`.
pub const GUMBEL_CLAMP: f64 = 1e-12;

/// Gate softmax temperature.
pub const TAU: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateVariant {
    /// Hard straight-through Gumbel gate.
    Gumbel,
    /// Features weighted by `sigmoid(r_on - r_off)`.
    Sigmoid,
    /// `Sigmoid` trained with the selection-rate loss.
    SigmoidMu,
    /// `Sigmoid` trained with an l1 penalty on the gate outputs.
    SigmoidL1,
}

impl GateVariant {
    pub fn is_soft(self) -> bool {
        !matches!(self, GateVariant::Gumbel)
    }

    pub fn name(self) -> &'static str {
        match self {
            GateVariant::Gumbel => "gumbel",
            GateVariant::Sigmoid => "sigmoid",
            GateVariant::SigmoidMu => "sigmoid_mu",
            GateVariant::SigmoidL1 => "sigmoid_l1",
        }
    }
}

impl std::str::FromStr for GateVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gumbel" => Ok(GateVariant::Gumbel),
            "sigmoid" => Ok(GateVariant::Sigmoid),
            "sigmoid_mu" => Ok(GateVariant::SigmoidMu),
            "sigmoid_l1" => Ok(GateVariant::SigmoidL1),
            other => Err(Error::InvalidArgument(format!("unknown gate variant '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Train,
    Eval,
}

/// Trainable tensors of one gating module, flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// `hidden x in_channels`
    pub mlp_w1: Vec<f64>,
    pub mlp_b1: Vec<f64>,
    /// `2 x hidden`
    pub mlp_w2: Vec<f64>,
    pub mlp_b2: Vec<f64>,
    /// `in_channels x out_channels`
    pub tf_w: Vec<f64>,
    pub tf_b: Vec<f64>,
}

pub const PARAM_GROUPS: [&str; 6] = ["mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2", "transform.w", "transform.b"];

impl LayerParams {
    pub fn zeros_like(other: &LayerParams) -> Self {
        LayerParams {
            mlp_w1: vec![0.0; other.mlp_w1.len()],
            mlp_b1: vec![0.0; other.mlp_b1.len()],
            mlp_w2: vec![0.0; other.mlp_w2.len()],
            mlp_b2: vec![0.0; other.mlp_b2.len()],
            tf_w: vec![0.0; other.tf_w.len()],
            tf_b: vec![0.0; other.tf_b.len()],
        }
    }

    /// Parameter tensors in [`PARAM_GROUPS`] order.
    pub fn groups(&self) -> [&Vec<f64>; 6] {
        [&self.mlp_w1, &self.mlp_b1, &self.mlp_w2, &self.mlp_b2, &self.tf_w, &self.tf_b]
    }

    pub fn groups_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
            &mut self.tf_w,
            &mut self.tf_b,
        ]
    }

    pub fn add_assign(&mut self, other: &LayerParams) {
        for (a, b) in self.groups_mut().into_iter().zip(other.groups()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatingModule {
    pub layer_index: usize,
    pub in_channels: usize,
    pub hidden: usize,
    pub out_channels: usize,
    pub params: LayerParams,
}

/// Hidden width of the relevance MLP for a layer with `channels` inputs.
pub fn hidden_width(channels: usize) -> usize {
    (channels / 16).max(8)
}

impl GatingModule {
    /// Uniform(+-1/sqrt(fan_in)) weights, zero biases.
    pub fn new<R: Rng>(layer_index: usize, channels: usize, rho: usize, rng: &mut R) -> Result<Self> {
        Self::with_hidden(layer_index, channels, hidden_width(channels), rho, rng)
    }

    pub fn with_hidden<R: Rng>(
        layer_index: usize,
        channels: usize,
        hidden: usize,
        rho: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if rho == 0 || channels == 0 || channels % rho != 0 {
            return Err(Error::InvalidArgument(format!(
                "layer {layer_index}: {channels} channels are not divisible by rho = {rho}"
            )));
        }
        if hidden == 0 {
            return Err(Error::InvalidArgument("hidden width must be positive".into()));
        }
        let out = channels / rho;
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let mlp_w1 = uniform(hidden * channels, channels);
        let mlp_w2 = uniform(2 * hidden, hidden);
        let tf_w = uniform(channels * out, channels);
        Ok(Self {
            layer_index,
            in_channels: channels,
            hidden,
            out_channels: out,
            params: LayerParams {
                mlp_w1,
                mlp_b1: vec![0.0; hidden],
                mlp_w2,
                mlp_b2: vec![0.0; 2],
                tf_w,
                tf_b: vec![0.0; out],
            },
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.groups().iter().map(|g| g.len()).sum()
    }
}

/// Intermediate values of the relevance MLP kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceTrace {
    pub pooled: Vec<f64>,
    pub hidden_pre: Vec<f64>,
    pub relevance: [f64; 2],
}

/// `r_l = MLP(gap(b_l) + gap(b'_l))`.
pub fn relevance(src: &FeatureBlock, trg: &FeatureBlock, module: &GatingModule) -> Result<[f64; 2]> {
    Ok(relevance_traced(src, trg, module)?.relevance)
}

pub fn relevance_traced(
    src: &FeatureBlock,
    trg: &FeatureBlock,
    module: &GatingModule,
) -> Result<RelevanceTrace> {
    let c = module.in_channels;
    if src.channels() != c || trg.channels() != c {
        return Err(Error::Shape(format!(
            "layer {}: gate expects {c} channels, got {} and {}",
            module.layer_index,
            src.channels(),
            trg.channels()
        )));
    }
    let a = global_avg_pool(&src.values)?;
    let b = global_avg_pool(&trg.values)?;
    let pooled: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    Ok(mlp_forward(&pooled, module))
}

pub(crate) fn mlp_forward(pooled: &[f64], module: &GatingModule) -> RelevanceTrace {
    let p = &module.params;
    let c = module.in_channels;
    let hidden_pre: Vec<f64> = (0..module.hidden)
        .map(|k| {
            p.mlp_b1[k]
                + p.mlp_w1[k * c..(k + 1) * c]
                    .iter()
                    .zip(pooled)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
        })
        .collect();
    let mut relevance = [0.0; 2];
    for (o, r) in relevance.iter_mut().enumerate() {
        *r = p.mlp_b2[o]
            + p.mlp_w2[o * module.hidden..(o + 1) * module.hidden]
                .iter()
                .zip(&hidden_pre)
                .map(|(w, h)| w * h.max(0.0))
                .sum::<f64>();
    }
    RelevanceTrace {
        pooled: pooled.to_vec(),
        hidden_pre,
        relevance,
    }
}

/// Accumulates MLP parameter gradients for an upstream `d_relevance`.
pub(crate) fn mlp_backward(
    trace: &RelevanceTrace,
    module: &GatingModule,
    d_relevance: [f64; 2],
    grad: &mut LayerParams,
) {
    let h = module.hidden;
    let c = module.in_channels;
    let w2 = &module.params.mlp_w2;
    for o in 0..2 {
        grad.mlp_b2[o] += d_relevance[o];
        for k in 0..h {
            grad.mlp_w2[o * h + k] += d_relevance[o] * trace.hidden_pre[k].max(0.0);
        }
    }
    for k in 0..h {
        if trace.hidden_pre[k] <= 0.0 {
            continue;
        }
        let d_hidden = d_relevance[0] * w2[k] + d_relevance[1] * w2[h + k];
        grad.mlp_b1[k] += d_hidden;
        for (g, x) in grad.mlp_w1[k * c..(k + 1) * c].iter_mut().zip(&trace.pooled) {
            *g += d_hidden * x;
        }
    }
}

pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP);
    -(-u.ln()).ln()
}

/// Two i.i.d. standard Gumbel samples.
pub fn gumbel_noise<R: Rng>(rng: &mut R) -> [f64; 2] {
    [
        gumbel_from_uniform(rng.random::<f64>()),
        gumbel_from_uniform(rng.random::<f64>()),
    ]
}

/// Outcome of one gate evaluation. Index 0 is "on", index 1 is "off".
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateDecision {
    pub relevance: [f64; 2],
    pub soft: [f64; 2],
    pub hard: [f64; 2],
    pub noise: [f64; 2],
    pub on: bool,
}

impl GateDecision {
    /// Decision for relevance `r` perturbed by `noise`; ties go to "on".
    pub fn with_noise(r: [f64; 2], noise: [f64; 2]) -> Self {
        let logits = [r[0] + noise[0], r[1] + noise[1]];
        let s = softmax_unchecked(&logits, TAU);
        let on = logits[0] >= logits[1];
        GateDecision {
            relevance: r,
            soft: [s[0], s[1]],
            hard: if on { [1.0, 0.0] } else { [0.0, 1.0] },
            noise,
            on,
        }
    }

    /// Forward value and relevance-gradient of the straight-through multiplier
    /// `soft_on + stop_gradient(hard_on - soft_on)`.
    pub fn straight_through(&self) -> StraightThrough {
        let s = self.soft[0];
        let d = s * (1.0 - s) / TAU;
        StraightThrough {
            value: self.hard[0],
            d_relevance: [d, -d],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StraightThrough {
    pub value: f64,
    pub d_relevance: [f64; 2],
}

pub fn gate_forward<R: Rng>(r: [f64; 2], mode: GateMode, rng: &mut R) -> GateDecision {
    match mode {
        GateMode::Train => GateDecision::with_noise(r, gumbel_noise(rng)),
        GateMode::Eval => GateDecision::with_noise(r, [0.0, 0.0]),
    }
}

/// Soft gate multiplier `sigmoid(r_on - r_off)` and its relevance gradient.
/// The two-logit MLP head feeds the sigmoid with the logit difference.
pub fn soft_gate_variant(r: [f64; 2]) -> StraightThrough {
    let s = sigmoid(r[0] - r[1]);
    let d = s * (1.0 - s);
    StraightThrough {
        value: s,
        d_relevance: [d, -d],
    }
}

/// Position-wise `ReLU(W^T f + b)`, shrinking channels by `rho`.
pub fn transform(block: &FeatureBlock, module: &GatingModule) -> Result<FeatureBlock> {
    let (h, w, c) = block.values.dims3()?;
    if c != module.in_channels {
        return Err(Error::Shape(format!(
            "layer {}: transform expects {} channels, got {c}",
            module.layer_index, module.in_channels
        )));
    }
    let co = module.out_channels;
    let p = &module.params;
    let mut out = Vec::with_capacity(h * w * co);
    for f in block.values.data().chunks_exact(c) {
        let mut acc = p.tf_b.clone();
        for (i, x) in f.iter().enumerate() {
            if *x == 0.0 {
                continue;
            }
            for (a, wv) in acc.iter_mut().zip(&p.tf_w[i * co..(i + 1) * co]) {
                *a += x * wv;
            }
        }
        out.extend(acc.into_iter().map(|v| v.max(0.0)));
    }
    FeatureBlock::new(block.layer_index, Tensor::new(vec![h, w, co], out)?)
}

/// Accumulates transform gradients given the block, its transformed output,
/// and the upstream gradient with respect to that output.
pub(crate) fn transform_backward(
    input: &FeatureBlock,
    output: &FeatureBlock,
    grad_out: &[f64],
    grad: &mut LayerParams,
) {
    let c = input.channels();
    let co = output.channels();
    for ((f, y), g) in input
        .values
        .data()
        .chunks_exact(c)
        .zip(output.values.data().chunks_exact(co))
        .zip(grad_out.chunks_exact(co))
    {
        for k in 0..co {
            if y[k] <= 0.0 || g[k] == 0.0 {
                continue;
            }
            grad.tf_b[k] += g[k];
            for (i, x) in f.iter().enumerate() {
                grad.tf_w[i * co + k] += x * g[k];
            }
        }
    }
}

/// Transformed source/target blocks after gating.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedPair {
    pub src: FeatureBlock,
    pub trg: FeatureBlock,
    pub multiplier: StraightThrough,
    transformed: (FeatureBlock, FeatureBlock),
}

impl GatedPair {
    /// Relevance gradient given upstream gradients on the gated outputs.
    pub fn relevance_vjp(&self, grad_src: &[f64], grad_trg: &[f64]) -> [f64; 2] {
        let d_mult = crate::tensor::dot(grad_src, self.transformed.0.values.data())
            + crate::tensor::dot(grad_trg, self.transformed.1.values.data());
        [
            d_mult * self.multiplier.d_relevance[0],
            d_mult * self.multiplier.d_relevance[1],
        ]
    }
}

/// Multiplies a transformed pair by the gate's hard decision. The returned
/// [`GatedPair`] carries the straight-through gradient rule.
pub fn gate_apply(src: &FeatureBlock, trg: &FeatureBlock, decision: &GateDecision) -> GatedPair {
    let st = decision.straight_through();
    let scale = |b: &FeatureBlock| {
        let mut out = b.clone();
        if st.value == 0.0 {
            out.values.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        out
    };
    GatedPair {
        src: scale(src),
        trg: scale(trg),
        multiplier: st,
        transformed: (src.clone(), trg.clone()),
    }
}
