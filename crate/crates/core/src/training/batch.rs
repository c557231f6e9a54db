//! Loss and gradient of a minibatch of pairs.

use rayon::prelude::*;

use super::model::{add_grads, Gradients, ModelParams};
use super::pipeline::{backward, forward, FrozenGate, Gates, PairForward};
use crate::error::{Error, Result};
use crate::gating::GateVariant;
use crate::objective::{
    bidirectional_entropy, keypoint_weights, selection_loss, selection_loss_grad, strong_loss_weighted,
    weak_loss_from_entropies,
};
use crate::pyramid::{FeaturePyramid, PairAnnotation};
use crate::tensor::Tensor;

/// What a pair contributes to the matching loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Keypoint cross-entropy.
    Strong,
    /// Numerator of the entropy ratio.
    Positive,
    /// Denominator of the entropy ratio.
    Negative,
}

#[derive(Clone, Debug)]
pub enum GateSpec {
    Eval,
    Noise(Vec<[f64; 2]>),
    Frozen(Vec<FrozenGate>),
}

impl GateSpec {
    fn as_gates(&self) -> Gates<'_> {
        match self {
            GateSpec::Eval => Gates::Eval,
            GateSpec::Noise(n) => Gates::Noise(n),
            GateSpec::Frozen(f) => Gates::Frozen(f),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchItem {
    pub src: FeaturePyramid,
    pub trg: FeaturePyramid,
    pub annotation: PairAnnotation,
    pub role: Role,
    pub gates: GateSpec,
    /// Keypoint weights to use instead of recomputing them from the
    /// current transfer.
    pub weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub match_loss: f64,
    pub sel_loss: f64,
    /// Batch mean of each layer's gate multiplier.
    pub layer_freq: Vec<f64>,
}

pub struct BatchResult {
    pub loss: LossParts,
    pub grads: Option<Gradients>,
    /// Per item: the gates actually used, frozen for replay.
    pub frozen: Vec<Vec<FrozenGate>>,
    /// Per item: the keypoint weights used (empty for weak roles).
    pub weights: Vec<Vec<f64>>,
}

/// Forward every item, assemble the objective, and optionally run the
/// reverse pass. Gradients are reduced in item order.
pub fn evaluate_batch(params: &ModelParams, items: &[BatchItem], want_grads: bool) -> Result<BatchResult> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let forwards: Vec<PairForward> = items
        .par_iter()
        .map(|it| forward(params, &it.src, &it.trg, it.gates.as_gates()))
        .collect::<Result<_>>()?;

    let n_strong = items.iter().filter(|i| i.role == Role::Strong).count();
    let mut d_corr: Vec<Option<Tensor>> = vec![None; items.len()];
    let mut weights_used = vec![Vec::new(); items.len()];
    let mut match_loss = 0.0;
    if n_strong > 0 {
        let results: Vec<(f64, Tensor, Vec<f64>)> = items
            .par_iter()
            .zip(&forwards)
            .filter(|(it, _)| it.role == Role::Strong)
            .map(|(it, f)| {
                let w = match &it.weights {
                    Some(w) => w.clone(),
                    None => keypoint_weights(&f.correlation, &f.src_grid, &f.trg_grid, &it.annotation.keypoints)?,
                };
                let (l, g) =
                    strong_loss_weighted(&f.correlation, &f.src_grid, &f.trg_grid, &it.annotation.keypoints, &w)?;
                Ok((l, g, w))
            })
            .collect::<Result<_>>()?;
        let scale = 1.0 / n_strong as f64;
        let strong_idx = items.iter().enumerate().filter(|(_, i)| i.role == Role::Strong).map(|(k, _)| k);
        for (k, (l, mut g, w)) in strong_idx.zip(results) {
            match_loss += scale * l;
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
            d_corr[k] = Some(g);
            weights_used[k] = w;
        }
    }
    let weak_idx: Vec<usize> = (0..items.len()).filter(|&k| items[k].role != Role::Strong).collect();
    if !weak_idx.is_empty() {
        let ent: Vec<(f64, Tensor)> = weak_idx
            .par_iter()
            .map(|&k| bidirectional_entropy(&forwards[k].correlation))
            .collect::<Result<_>>()?;
        let pos: Vec<f64> = weak_idx
            .iter()
            .zip(&ent)
            .filter(|(k, _)| items[**k].role == Role::Positive)
            .map(|(_, e)| e.0)
            .collect();
        let neg: Vec<f64> = weak_idx
            .iter()
            .zip(&ent)
            .filter(|(k, _)| items[**k].role == Role::Negative)
            .map(|(_, e)| e.0)
            .collect();
        let (loss, d_pos, d_neg) = weak_loss_from_entropies(&pos, &neg)?;
        match_loss += loss;
        let (mut ip, mut ineg) = (d_pos.into_iter(), d_neg.into_iter());
        for (&k, (_, g)) in weak_idx.iter().zip(ent) {
            let s = if items[k].role == Role::Positive {
                ip.next()
            } else {
                ineg.next()
            }
            .expect("one derivative per entropy");
            let mut g = g;
            g.data_mut().iter_mut().for_each(|v| *v *= s);
            d_corr[k] = Some(g);
        }
    }

    let l_count = params.num_layers();
    let b = items.len() as f64;
    let mut zbar = vec![0.0; l_count];
    for f in &forwards {
        for (z, m) in zbar.iter_mut().zip(f.multipliers()) {
            *z += m / b;
        }
    }
    let cfg = &params.config;
    let (sel_loss, d_zbar) = match cfg.variant {
        GateVariant::Gumbel | GateVariant::SigmoidMu => (selection_loss(&zbar, cfg.mu), selection_loss_grad(&zbar, cfg.mu)),
        GateVariant::SigmoidL1 => (
            crate::objective::l1_penalty(&zbar, cfg.l1_lambda),
            vec![cfg.l1_lambda; l_count],
        ),
        GateVariant::Sigmoid => (0.0, vec![0.0; l_count]),
    };
    let d_mult: Vec<f64> = d_zbar.iter().map(|d| d / b).collect();
    let loss = LossParts {
        total: crate::objective::total_loss(match_loss, sel_loss),
        match_loss,
        sel_loss,
        layer_freq: zbar,
    };

    let grads = if want_grads {
        let per_item: Vec<Gradients> = items
            .par_iter()
            .zip(&forwards)
            .zip(&d_corr)
            .map(|((it, f), d)| backward(params, &it.src, &it.trg, f, d.as_ref(), &d_mult))
            .collect::<Result<_>>()?;
        let mut acc = params.zero_grads();
        for g in &per_item {
            add_grads(&mut acc, g);
        }
        Some(acc)
    } else {
        None
    };
    Ok(BatchResult {
        loss,
        grads,
        frozen: forwards.iter().map(PairForward::frozen_gates).collect(),
        weights: weights_used,
    })
}
