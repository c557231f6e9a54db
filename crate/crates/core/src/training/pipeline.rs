//! Forward pass over one image pair with every intermediate kept, and the
//! hand-derived reverse pass over the same graph.

use rand::Rng;

use super::model::{Gradients, ModelParams};
use crate::error::{Error, Result};
use crate::gating::{
    gumbel_noise, mlp_backward, mlp_forward, soft_gate_variant, transform, transform_backward,
    GateDecision, RelevanceTrace,
};
use crate::matching::{
    appearance_backward, appearance_from_cosine, compose_hyperimage, cosine_matrix, mutual_nn_filter_backward,
    mutual_nn_filter_traced, phm_backward, phm_traced, CorrelationMatrix, CosineTrace, FilterTrace, Grid,
};
use crate::pyramid::{FeatureBlock, FeaturePyramid};
use crate::tensor::{global_avg_pool, upsample_backward, Tensor};

/// A Gumbel gate with its noise and decision held fixed. The multiplier
/// becomes `hard_on + soft_on(r) - soft_anchor`, which equals the
/// straight-through value at the anchor point and has the straight-through
/// derivative everywhere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrozenGate {
    pub noise: [f64; 2],
    pub on: bool,
    pub soft_anchor: f64,
}

impl FrozenGate {
    pub fn from_decision(d: &GateDecision) -> Self {
        Self {
            noise: d.noise,
            on: d.on,
            soft_anchor: d.soft[0],
        }
    }
}

/// How gate decisions are made during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Gates<'a> {
    /// No noise: deterministic argmax gating.
    Eval,
    /// Gumbel noise per layer.
    Noise(&'a [[f64; 2]]),
    Frozen(&'a [FrozenGate]),
}

/// Draws one pair of Gumbel samples per layer.
pub fn sample_noise<R: Rng>(layers: usize, rng: &mut R) -> Vec<[f64; 2]> {
    (0..layers).map(|_| gumbel_noise(rng)).collect()
}

#[derive(Clone, Debug)]
pub struct LayerState {
    pub trace: RelevanceTrace,
    pub decision: GateDecision,
    /// Forward value of the gate multiplier.
    pub multiplier: f64,
    /// Derivative of the multiplier with respect to the relevance vector.
    pub d_multiplier: [f64; 2],
    /// Whether the layer's multiplier receives gradient from the matching
    /// loss. False for layers outside the hyperimage and for the base-layer
    /// fallback, whose multiplier is the constant 1.
    pub gate_grad: bool,
    transformed: Option<(FeatureBlock, FeatureBlock)>,
}

impl LayerState {
    pub fn included(&self) -> bool {
        self.transformed.is_some()
    }
}

/// Everything the reverse pass needs for one pair.
pub struct PairForward {
    pub layers: Vec<LayerState>,
    pub selected: Vec<usize>,
    pub src_grid: Grid,
    pub trg_grid: Grid,
    cosine: CosineTrace,
    appearance: Tensor,
    votes: Vec<f64>,
    phm: Tensor,
    filter: FilterTrace,
    pub correlation: Tensor,
}

impl PairForward {
    pub fn multipliers(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.multiplier).collect()
    }

    pub fn decisions(&self) -> Vec<GateDecision> {
        self.layers.iter().map(|l| l.decision).collect()
    }

    pub fn frozen_gates(&self) -> Vec<FrozenGate> {
        self.layers.iter().map(|l| FrozenGate::from_decision(&l.decision)).collect()
    }

    pub fn correlation_matrix(&self) -> CorrelationMatrix {
        CorrelationMatrix {
            values: self.correlation.clone(),
            src_grid: self.src_grid,
            trg_grid: self.trg_grid,
        }
    }
}

fn check_finite(t: &[f64], node: impl FnOnce() -> String) -> Result<()> {
    if t.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(node()))
    }
}

/// Runs the model on one pair.
pub fn forward(params: &ModelParams, src: &FeaturePyramid, trg: &FeaturePyramid, gates: Gates) -> Result<PairForward> {
    params.check_pyramid(src)?;
    params.check_pyramid(trg)?;
    let l_count = params.num_layers();
    match gates {
        Gates::Noise(n) if n.len() != l_count => {
            return Err(Error::Shape(format!("{} noise samples for {l_count} layers", n.len())))
        }
        Gates::Frozen(f) if f.len() != l_count => {
            return Err(Error::Shape(format!("{} frozen gates for {l_count} layers", f.len())))
        }
        _ => {}
    }
    let soft = params.config.variant.is_soft();
    let mut layers = Vec::with_capacity(l_count);
    for (l, module) in params.modules.iter().enumerate() {
        let a = global_avg_pool(&src.blocks[l].values)?;
        let b = global_avg_pool(&trg.blocks[l].values)?;
        let pooled: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let trace = mlp_forward(&pooled, module);
        let r = trace.relevance;
        let (decision, multiplier, d_multiplier) = if soft {
            let st = soft_gate_variant(r);
            (GateDecision::with_noise(r, [0.0; 2]), st.value, st.d_relevance)
        } else {
            match gates {
                Gates::Eval => {
                    let d = GateDecision::with_noise(r, [0.0; 2]);
                    let st = d.straight_through();
                    (d, st.value, st.d_relevance)
                }
                Gates::Noise(n) => {
                    let d = GateDecision::with_noise(r, n[l]);
                    let st = d.straight_through();
                    (d, st.value, st.d_relevance)
                }
                Gates::Frozen(f) => {
                    let g = f[l];
                    let fresh = GateDecision::with_noise(r, g.noise);
                    let hard = if g.on { 1.0 } else { 0.0 };
                    let d = GateDecision {
                        hard: [hard, 1.0 - hard],
                        on: g.on,
                        ..fresh
                    };
                    let st = fresh.straight_through();
                    (d, hard + fresh.soft[0] - g.soft_anchor, st.d_relevance)
                }
            }
        };
        if !multiplier.is_finite() {
            return Err(Error::NonFinite(format!("layer {l} gate multiplier")));
        }
        layers.push(LayerState {
            trace,
            decision,
            multiplier,
            d_multiplier,
            gate_grad: soft || decision.on,
            transformed: None,
        });
    }

    let mut selected: Vec<usize> = (0..l_count)
        .filter(|&l| soft || layers[l].decision.on)
        .collect();
    let mut fallback = false;
    if selected.is_empty() {
        selected.push(0);
        fallback = true;
    }
    for &l in &selected {
        let ts = transform(&src.blocks[l], &params.modules[l])?;
        let tt = transform(&trg.blocks[l], &params.modules[l])?;
        layers[l].transformed = Some((ts, tt));
    }
    let scale = |l: usize| if fallback { 1.0 } else { layers[l].multiplier };
    let src_grid = Grid::for_pyramid(src);
    let trg_grid = Grid::for_pyramid(trg);
    let src_parts: Vec<(&FeatureBlock, f64)> = selected
        .iter()
        .map(|&l| (&layers[l].transformed.as_ref().expect("selected").0, scale(l)))
        .collect();
    let trg_parts: Vec<(&FeatureBlock, f64)> = selected
        .iter()
        .map(|&l| (&layers[l].transformed.as_ref().expect("selected").1, scale(l)))
        .collect();
    let src_h = compose_hyperimage(src_grid, &src_parts, selected.clone())?;
    let trg_h = compose_hyperimage(trg_grid, &trg_parts, selected.clone())?;

    let cosine = cosine_matrix(&src_h.features, &trg_h.features)?;
    let appearance = appearance_from_cosine(&cosine.cosine);
    let (phm, votes) = phm_traced(&appearance, &src_grid, &trg_grid, &params.config.hough)?;
    let (correlation, filter) = mutual_nn_filter_traced(&phm);
    check_finite(correlation.data(), || "correlation".into())?;
    Ok(PairForward {
        layers,
        selected,
        src_grid,
        trg_grid,
        cosine,
        appearance,
        votes,
        phm,
        filter,
        correlation,
    })
}

/// Columns `offset..offset + c` of an `n x d` matrix as an `rows x cols x c` block.
fn column_block(m: &Tensor, offset: usize, c: usize, grid: &Grid) -> Tensor {
    let d = m.shape()[1];
    let mut out = Vec::with_capacity(grid.len() * c);
    for row in m.data().chunks_exact(d) {
        out.extend_from_slice(&row[offset..offset + c]);
    }
    Tensor::new(vec![grid.rows, grid.cols, c], out).expect("shape")
}

/// Parameter gradients of `<d_correlation, C> + sum_l d_multiplier[l] * m_l`.
///
/// `d_correlation` may be `None` when the loss ignores the correlation (for
/// instance a pair that only contributes to the selection loss).
pub fn backward(
    params: &ModelParams,
    src: &FeaturePyramid,
    trg: &FeaturePyramid,
    fwd: &PairForward,
    d_correlation: Option<&Tensor>,
    d_multiplier: &[f64],
) -> Result<Gradients> {
    let l_count = params.num_layers();
    if d_multiplier.len() != l_count {
        return Err(Error::Shape(format!(
            "{} multiplier gradients for {l_count} layers",
            d_multiplier.len()
        )));
    }
    let mut grads = params.zero_grads();
    let mut d_mult: Vec<f64> = d_multiplier.to_vec();

    if let Some(d_c) = d_correlation {
        if d_c.shape() != fwd.correlation.shape() {
            return Err(Error::Shape("correlation gradient shape".into()));
        }
        check_finite(d_c.data(), || "correlation gradient".into())?;
        let d_phm = mutual_nn_filter_backward(&fwd.phm, &fwd.correlation, &fwd.filter, d_c);
        check_finite(d_phm.data(), || "mutual filter gradient".into())?;
        let d_app = phm_backward(
            &fwd.appearance,
            &fwd.votes,
            &d_phm,
            &fwd.src_grid,
            &fwd.trg_grid,
            &params.config.hough,
        );
        check_finite(d_app.data(), || "hough matching gradient".into())?;
        let (d_src, d_trg) = appearance_backward(&fwd.cosine, &d_app);
        check_finite(d_src.data(), || "source hyperimage gradient".into())?;
        check_finite(d_trg.data(), || "target hyperimage gradient".into())?;

        let mut offset = 0;
        for &l in &fwd.selected {
            let state = &fwd.layers[l];
            let (ts, tt) = state.transformed.as_ref().expect("selected layer");
            let c = ts.channels();
            let gs = upsample_backward(&column_block(&d_src, offset, c, &fwd.src_grid), ts.height(), ts.width())?;
            let gt = upsample_backward(&column_block(&d_trg, offset, c, &fwd.trg_grid), tt.height(), tt.width())?;
            offset += c;
            if state.gate_grad {
                d_mult[l] += crate::tensor::dot(gs.data(), ts.values.data())
                    + crate::tensor::dot(gt.data(), tt.values.data());
            }
            let m = if state.gate_grad { state.multiplier } else { 1.0 };
            let scaled = |g: Tensor| -> Vec<f64> { g.into_data().into_iter().map(|v| v * m).collect() };
            transform_backward(&src.blocks[l], ts, &scaled(gs), &mut grads[l]);
            transform_backward(&trg.blocks[l], tt, &scaled(gt), &mut grads[l]);
        }
    }

    for (l, state) in fwd.layers.iter().enumerate() {
        let d_r = [d_mult[l] * state.d_multiplier[0], d_mult[l] * state.d_multiplier[1]];
        if !(d_r[0].is_finite() && d_r[1].is_finite()) {
            return Err(Error::NonFinite(format!("layer {l} relevance gradient")));
        }
        mlp_backward(&state.trace, &params.modules[l], d_r, &mut grads[l]);
        for (name, g) in crate::gating::PARAM_GROUPS.iter().zip(grads[l].groups()) {
            check_finite(g, || format!("layer {l} {name} gradient"))?;
        }
    }
    Ok(grads)
}
