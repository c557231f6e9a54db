//! Matching and layer-selection losses, each with its gradient.

use crate::error::{Error, Result};
use crate::matching::{dense_match, transfer_keypoint, CorrelationMatrix, Grid};
use crate::pyramid::{check_inside, KeypointPair, PairAnnotation};
use crate::tensor::{softmax_unchecked, standardize_backward, standardize_with_stats, Tensor};

/// Floor applied inside every `log` of a probability.
pub const LOG_FLOOR: f64 = 1e-12;

/// Floor on the weak-loss denominator.
pub const WEAK_DENOMINATOR_FLOOR: f64 = 1e-8;

/// Grid cell whose centre is nearest to `p`; ties go to the smaller index.
pub fn nearest_index(p: [f64; 2], grid: &Grid) -> Result<usize> {
    check_inside(p, grid.size())?;
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for n in 0..grid.len() {
        let c = grid.center(n);
        let d = (c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2);
        if d < best_d {
            best_d = d;
            best = n;
        }
    }
    Ok(best)
}

/// Distance below which a keypoint's loss term is down-weighted.
pub fn delta_threshold(width: f64, height: f64) -> f64 {
    width.max(height) / 10.0
}

/// `(d / delta)^2` for `d < delta`, otherwise 1, where `d` is the distance
/// between the predicted and true target keypoint.
pub fn keypoint_weight(predicted: [f64; 2], truth: [f64; 2], delta: f64) -> f64 {
    let d = ((predicted[0] - truth[0]).powi(2) + (predicted[1] - truth[1]).powi(2)).sqrt();
    if d < delta {
        (d / delta).powi(2)
    } else {
        1.0
    }
}

/// Keypoint weights from the keypoint transfer induced by `c`.
pub fn keypoint_weights(c: &Tensor, src: &Grid, trg: &Grid, keypoints: &[KeypointPair]) -> Result<Vec<f64>> {
    let assignment = dense_match(c);
    let delta = delta_threshold(trg.image_width, trg.image_height);
    keypoints
        .iter()
        .map(|kp| Ok(keypoint_weight(transfer_keypoint(kp.src, &assignment, src, trg)?, kp.trg, delta)))
        .collect()
}

/// Weighted cross-entropy between standardised-then-softmaxed rows of `c`
/// picked by the source keypoints and one-hot target cells. Returns the loss
/// and its gradient with respect to `c`.
pub fn strong_loss_weighted(
    c: &Tensor,
    src: &Grid,
    trg: &Grid,
    keypoints: &[KeypointPair],
    weights: &[f64],
) -> Result<(f64, Tensor)> {
    let (n, m) = c.dims2()?;
    if n != src.len() || m != trg.len() {
        return Err(Error::Shape(format!(
            "correlation is {n}x{m} but grids hold {} and {} cells",
            src.len(),
            trg.len()
        )));
    }
    if keypoints.is_empty() {
        return Err(Error::InvalidArgument("strong loss needs at least one keypoint".into()));
    }
    if weights.len() != keypoints.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} keypoints",
            weights.len(),
            keypoints.len()
        )));
    }
    let scale = 1.0 / keypoints.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(vec![n, m]);
    for (kp, w) in keypoints.iter().zip(weights) {
        let k = nearest_index(kp.src, src)?;
        let t = nearest_index(kp.trg, trg)?;
        let (z, std) = standardize_with_stats(c.row(k));
        let y = softmax_unchecked(&z, 1.0);
        loss -= scale * w * y[t].max(LOG_FLOOR).ln();
        if *w == 0.0 || y[t] < LOG_FLOOR {
            continue;
        }
        let mut dz: Vec<f64> = y.iter().map(|p| scale * w * p).collect();
        dz[t] -= scale * w;
        for (g, d) in grad.row_mut(k).iter_mut().zip(standardize_backward(&z, std, &dz)) {
            *g += d;
        }
    }
    Ok((loss, grad))
}

/// Strong-supervision loss with weights taken from the current keypoint transfer.
pub fn strong_loss(c: &CorrelationMatrix, annotation: &PairAnnotation) -> Result<f64> {
    let w = keypoint_weights(&c.values, &c.src_grid, &c.trg_grid, &annotation.keypoints)?;
    Ok(strong_loss_weighted(&c.values, &c.src_grid, &c.trg_grid, &annotation.keypoints, &w)?.0)
}

/// Mean row entropy of the row-L1-normalised matrix. All-zero rows count as
/// uniform.
pub fn correlation_entropy(c: &Tensor) -> Result<f64> {
    Ok(correlation_entropy_with_grad(c)?.0)
}

pub fn correlation_entropy_with_grad(c: &Tensor) -> Result<(f64, Tensor)> {
    let (n, m) = c.dims2()?;
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("entropy of an empty matrix".into()));
    }
    if c.data().iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument("entropy needs a finite nonnegative matrix".into()));
    }
    let max_entropy = (m as f64).ln();
    let mut total = 0.0;
    let mut grad = Tensor::zeros(vec![n, m]);
    for i in 0..n {
        let row = c.row(i);
        let sum: f64 = row.iter().sum();
        if sum <= 0.0 {
            total += max_entropy;
            continue;
        }
        let h: f64 = row
            .iter()
            .filter(|v| **v > 0.0)
            .map(|v| {
                let p = v / sum;
                -p * p.ln()
            })
            .sum();
        total += h;
        for (g, v) in grad.row_mut(i).iter_mut().zip(row) {
            let log_p = (v / sum).max(LOG_FLOOR).ln();
            *g = -(log_p + h) / (sum * n as f64);
        }
    }
    Ok((total / n as f64, grad))
}

/// `s(C) + s(C^T)` with its gradient.
pub fn bidirectional_entropy(c: &Tensor) -> Result<(f64, Tensor)> {
    let (a, ga) = correlation_entropy_with_grad(c)?;
    let (b, gb) = correlation_entropy_with_grad(&c.transpose()?)?;
    let mut g = ga;
    for (x, y) in g.data_mut().iter_mut().zip(gb.transpose()?.data()) {
        *x += y;
    }
    Ok((a + b, g))
}

/// Weak loss given the bidirectional entropies of the positive and negative
/// pairs: `mean(pos) / max(mean(neg), floor)`. Also returns the derivative
/// with respect to each entropy.
pub fn weak_loss_from_entropies(pos: &[f64], neg: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if pos.is_empty() {
        return Err(Error::InvalidArgument("weak loss needs a positive pair".into()));
    }
    if neg.is_empty() {
        return Err(Error::NoNegatives);
    }
    let num = pos.iter().sum::<f64>() / pos.len() as f64;
    let raw_den = neg.iter().sum::<f64>() / neg.len() as f64;
    let den = raw_den.max(WEAK_DENOMINATOR_FLOOR);
    let d_pos = vec![1.0 / (den * pos.len() as f64); pos.len()];
    let d_neg = if raw_den > WEAK_DENOMINATOR_FLOOR {
        vec![-num / (den * den * neg.len() as f64); neg.len()]
    } else {
        vec![0.0; neg.len()]
    };
    Ok((num / den, d_pos, d_neg))
}

/// Entropy ratio of positive over negative correlation matrices.
pub fn weak_loss(pos: &[&Tensor], neg: &[&Tensor]) -> Result<f64> {
    let p = pos
        .iter()
        .map(|c| Ok(bidirectional_entropy(c)?.0))
        .collect::<Result<Vec<_>>>()?;
    let n = neg
        .iter()
        .map(|c| Ok(bidirectional_entropy(c)?.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(weak_loss_from_entropies(&p, &n)?.0)
}

/// `sum_l (zbar_l - mu)^2`.
pub fn selection_loss(zbar: &[f64], mu: f64) -> f64 {
    zbar.iter().map(|z| (z - mu).powi(2)).sum()
}

/// Derivative of [`selection_loss`] with respect to each `zbar_l`.
pub fn selection_loss_grad(zbar: &[f64], mu: f64) -> Vec<f64> {
    zbar.iter().map(|z| 2.0 * (z - mu)).collect()
}

/// `lambda * sum_l m_l`, the penalty of the l1 soft-gating variant.
pub fn l1_penalty(multipliers: &[f64], lambda: f64) -> f64 {
    lambda * multipliers.iter().sum::<f64>()
}

pub fn total_loss(match_loss: f64, sel_loss: f64) -> f64 {
    match_loss + sel_loss
}
