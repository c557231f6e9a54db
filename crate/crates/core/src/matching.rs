//! Hyperimage construction, geometrically re-weighted correlation, dense
//! matching, and keypoint transfer.
//!
//! The correlation pipeline is
//! `appearance -> phm -> mutual_nn_filter`, all over `|H| x |H'|` matrices
//! whose rows index source hyperpixels and columns index target hyperpixels.
//! The crate-private `*_backward` functions are the matching vector-Jacobian
//! products used by training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{transform, GateDecision, GatingModule};
use crate::pyramid::{check_inside, FeatureBlock, FeaturePyramid};
use crate::tensor::{upsample, Tensor, COSINE_NORM_FLOOR};

/// Positions of base-block cells in image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub image_width: f64,
    pub image_height: f64,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, image_width: f64, image_height: f64) -> Self {
        Self {
            rows,
            cols,
            image_width,
            image_height,
        }
    }

    pub fn for_pyramid(p: &FeaturePyramid) -> Self {
        let b = p.base();
        Self::new(b.height(), b.width(), p.image_width as f64, p.image_height as f64)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_width(&self) -> f64 {
        self.image_width / self.cols as f64
    }

    pub fn cell_height(&self) -> f64 {
        self.image_height / self.rows as f64
    }

    pub fn center_x(&self, col: usize) -> f64 {
        (col as f64 + 0.5) * self.cell_width()
    }

    pub fn center_y(&self, row: usize) -> f64 {
        (row as f64 + 0.5) * self.cell_height()
    }

    /// Pixel coordinates of the centre of row-major cell `index`.
    pub fn center(&self, index: usize) -> [f64; 2] {
        [self.center_x(index % self.cols), self.center_y(index / self.cols)]
    }

    /// Cell containing pixel `p`, clamped to the grid.
    pub fn cell_of(&self, p: [f64; 2]) -> (usize, usize) {
        let col = ((p[0] / self.cell_width()).floor().max(0.0) as usize).min(self.cols - 1);
        let row = ((p[1] / self.cell_height()).floor().max(0.0) as usize).min(self.rows - 1);
        (row, col)
    }

    pub fn size(&self) -> (f64, f64) {
        (self.image_width, self.image_height)
    }
}

const BIN_EDGE_SLACK: f64 = 1e-9;

/// Centre of cell `i` of `n`, as a fraction of the grid extent.
fn unit_center(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

/// Translation-only Hough space over normalised offsets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoughConfig {
    pub bins_per_axis: usize,
    /// Offsets are normalised by image size and binned over `[-range, range]`.
    pub offset_range: f64,
}

impl Default for HoughConfig {
    fn default() -> Self {
        Self {
            bins_per_axis: 10,
            offset_range: 1.0,
        }
    }
}

impl HoughConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins_per_axis == 0 || !(self.offset_range > 0.0) {
            return Err(Error::InvalidArgument(format!("bad Hough config {self:?}")));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.bins_per_axis * self.bins_per_axis
    }

    /// Bin index along one axis for a normalised offset. Offsets within
    /// rounding of a bin edge go to the upper bin.
    pub fn axis_bin(&self, offset: f64) -> usize {
        let t = (offset + self.offset_range) * self.bins_per_axis as f64 / (2.0 * self.offset_range);
        ((t + BIN_EDGE_SLACK).floor().max(0.0) as usize).min(self.bins_per_axis - 1)
    }
}

/// Hough bin of every candidate match between two grids.
pub(crate) struct BinTable {
    bx: Vec<usize>, // src col x trg col
    by: Vec<usize>, // src row x trg row
    n_b: usize,
    trg_cols: usize,
    trg_rows: usize,
}

impl BinTable {
    pub fn new(src: &Grid, trg: &Grid, cfg: &HoughConfig) -> Self {
        let mut bx = Vec::with_capacity(src.cols * trg.cols);
        for c in 0..src.cols {
            let u = unit_center(c, src.cols);
            for c2 in 0..trg.cols {
                bx.push(cfg.axis_bin(unit_center(c2, trg.cols) - u));
            }
        }
        let mut by = Vec::with_capacity(src.rows * trg.rows);
        for r in 0..src.rows {
            let v = unit_center(r, src.rows);
            for r2 in 0..trg.rows {
                by.push(cfg.axis_bin(unit_center(r2, trg.rows) - v));
            }
        }
        Self {
            bx,
            by,
            n_b: cfg.bins_per_axis,
            trg_cols: trg.cols,
            trg_rows: trg.rows,
        }
    }

    /// Fills `out` with the bin ids for source row `i` (a grid cell) against every target cell.
    fn row_bins(&self, src_row: usize, src_col: usize, out: &mut Vec<usize>) {
        out.clear();
        let by = &self.by[src_row * self.trg_rows..(src_row + 1) * self.trg_rows];
        let bx = &self.bx[src_col * self.trg_cols..(src_col + 1) * self.trg_cols];
        for y in by {
            for x in bx {
                out.push(y * self.n_b + x);
            }
        }
    }
}

/// Grid of hyperpixels: base-grid positions with concatenated features.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyperimage {
    pub grid: Grid,
    /// `|H| x D`
    pub features: Tensor,
    pub selected: Vec<usize>,
}

impl Hyperimage {
    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Concatenates `(block, multiplier)` pairs along channels after upsampling
/// each to `rows x cols`.
pub fn compose_hyperimage(
    grid: Grid,
    layers: &[(&FeatureBlock, f64)],
    selected: Vec<usize>,
) -> Result<Hyperimage> {
    let n = grid.len();
    let dim: usize = layers.iter().map(|(b, _)| b.channels()).sum();
    let mut features = vec![0.0; n * dim];
    let mut offset = 0;
    for (block, m) in layers {
        let c = block.channels();
        let up = upsample(&block.values, grid.rows, grid.cols)?;
        for (p, f) in up.data().chunks_exact(c).enumerate() {
            let dst = &mut features[p * dim + offset..p * dim + offset + c];
            for (d, v) in dst.iter_mut().zip(f) {
                *d = m * v;
            }
        }
        offset += c;
    }
    Ok(Hyperimage {
        grid,
        features: Tensor::new(vec![n, dim], features)?,
        selected,
    })
}

/// Layers switched on by `decisions`, or `[0]` when every gate is off.
pub fn selected_layers(decisions: &[GateDecision]) -> Vec<usize> {
    let s: Vec<usize> = decisions
        .iter()
        .enumerate()
        .filter(|(_, d)| d.on)
        .map(|(l, _)| l)
        .collect();
    if s.is_empty() {
        vec![0]
    } else {
        s
    }
}

/// Hyperimage from the transformed blocks of the layers the gates selected.
pub fn build_hyperimage(
    pyramid: &FeaturePyramid,
    decisions: &[GateDecision],
    modules: &[GatingModule],
) -> Result<Hyperimage> {
    if decisions.len() != pyramid.num_layers() || modules.len() != pyramid.num_layers() {
        return Err(Error::InvalidArgument(format!(
            "{} layers but {} decisions and {} modules",
            pyramid.num_layers(),
            decisions.len(),
            modules.len()
        )));
    }
    let selected = selected_layers(decisions);
    let transformed = selected
        .iter()
        .map(|&l| transform(&pyramid.blocks[l], &modules[l]))
        .collect::<Result<Vec<_>>>()?;
    let layers: Vec<(&FeatureBlock, f64)> = transformed.iter().map(|b| (b, 1.0)).collect();
    compose_hyperimage(Grid::for_pyramid(pyramid), &layers, selected)
}

/// Unit-normalised rows and their original norms. Rows below the norm floor
/// stay zero.
pub(crate) fn normalize_rows(features: &Tensor) -> (Tensor, Vec<f64>) {
    let (n, d) = features.dims2().expect("matrix");
    let mut out = features.clone();
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let row = out.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms.push(norm);
        if norm < COSINE_NORM_FLOOR {
            if d > 0 {
                log::trace!("zero-norm hyperpixel {i}");
            }
            row.iter_mut().for_each(|v| *v = 0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    (out, norms)
}

/// `A B^T` for row-major `A: n x d`, `B: m x d`.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, d) = a.dims2().expect("matrix");
    let (m, d2) = b.dims2().expect("matrix");
    assert_eq!(d, d2);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ra = a.row(i);
        let dst = &mut out[i * m..(i + 1) * m];
        for (j, o) in dst.iter_mut().enumerate() {
            *o = ra.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![n, m], out).expect("shape")
}

/// Cosine matrix between hyperpixel features, with the normalised rows kept
/// for the backward pass.
pub(crate) struct CosineTrace {
    pub src_unit: Tensor,
    pub src_norms: Vec<f64>,
    pub trg_unit: Tensor,
    pub trg_norms: Vec<f64>,
    pub cosine: Tensor,
}

pub(crate) fn cosine_matrix(src: &Tensor, trg: &Tensor) -> Result<CosineTrace> {
    let (_, d) = src.dims2()?;
    let (_, d2) = trg.dims2()?;
    if d != d2 {
        return Err(Error::Shape(format!("hyperimage dims differ: {d} vs {d2}")));
    }
    let (src_unit, src_norms) = normalize_rows(src);
    let (trg_unit, trg_norms) = normalize_rows(trg);
    let cosine = matmul_nt(&src_unit, &trg_unit);
    Ok(CosineTrace {
        src_unit,
        src_norms,
        trg_unit,
        trg_norms,
        cosine,
    })
}

pub(crate) fn appearance_from_cosine(cosine: &Tensor) -> Tensor {
    let mut a = cosine.clone();
    a.data_mut().iter_mut().for_each(|c| *c = c.max(0.0).powi(2));
    a
}

/// `ReLU(cos(f_p, f'_q))^2` for every hyperpixel pair.
pub fn appearance_confidence(src: &Hyperimage, trg: &Hyperimage) -> Result<Tensor> {
    Ok(appearance_from_cosine(&cosine_matrix(&src.features, &trg.features)?.cosine))
}

/// Gradients with respect to the source and target feature matrices.
pub(crate) fn appearance_backward(trace: &CosineTrace, d_appearance: &Tensor) -> (Tensor, Tensor) {
    let (n, m) = trace.cosine.dims2().expect("matrix");
    let d = trace.src_unit.shape()[1];
    let mut d_cos = d_appearance.clone();
    for (g, c) in d_cos.data_mut().iter_mut().zip(trace.cosine.data()) {
        *g *= 2.0 * c.max(0.0);
    }
    // d_src_unit = dC T, d_trg_unit = dC^T S
    let mut d_src_unit = Tensor::zeros(vec![n, d]);
    let mut d_trg_unit = Tensor::zeros(vec![m, d]);
    for i in 0..n {
        let gi = d_cos.row(i);
        let si = trace.src_unit.row(i).to_vec();
        let dsi = d_src_unit.row_mut(i);
        for (j, g) in gi.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            let tj = trace.trg_unit.row(j);
            for (a, t) in dsi.iter_mut().zip(tj) {
                *a += g * t;
            }
            let dtj = d_trg_unit.row_mut(j);
            for (a, s) in dtj.iter_mut().zip(&si) {
                *a += g * s;
            }
        }
    }
    let unnormalize = |unit: &Tensor, norms: &[f64], d_unit: Tensor| {
        let mut out = d_unit;
        for (i, norm) in norms.iter().enumerate() {
            let u = unit.row(i);
            let row = out.row_mut(i);
            if *norm < COSINE_NORM_FLOOR {
                row.iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            let proj: f64 = row.iter().zip(u).map(|(a, b)| a * b).sum();
            for (r, uu) in row.iter_mut().zip(u) {
                *r = (*r - proj * uu) / norm;
            }
        }
        out
    };
    (
        unnormalize(&trace.src_unit, &trace.src_norms, d_src_unit),
        unnormalize(&trace.trg_unit, &trace.trg_norms, d_trg_unit),
    )
}

/// Probabilistic Hough matching with a hard translation kernel:
/// `out(m) = A(m) * sum_{m' in bin(m)} A(m')`.
pub fn phm(appearance: &Tensor, src: &Grid, trg: &Grid, cfg: &HoughConfig) -> Result<Tensor> {
    Ok(phm_traced(appearance, src, trg, cfg)?.0)
}

/// PHM output together with the per-bin vote totals.
pub(crate) fn phm_traced(
    appearance: &Tensor,
    src: &Grid,
    trg: &Grid,
    cfg: &HoughConfig,
) -> Result<(Tensor, Vec<f64>)> {
    cfg.validate()?;
    let (n, m) = appearance.dims2()?;
    if n != src.len() || m != trg.len() {
        return Err(Error::Shape(format!(
            "appearance is {n}x{m} but grids hold {} and {} cells",
            src.len(),
            trg.len()
        )));
    }
    let table = BinTable::new(src, trg, cfg);
    let mut votes = vec![0.0; cfg.num_bins()];
    let mut bins = Vec::with_capacity(m);
    for i in 0..n {
        table.row_bins(i / src.cols, i % src.cols, &mut bins);
        for (a, b) in appearance.row(i).iter().zip(&bins) {
            votes[*b] += a;
        }
    }
    let mut out = appearance.clone();
    for i in 0..n {
        table.row_bins(i / src.cols, i % src.cols, &mut bins);
        for (o, b) in out.row_mut(i).iter_mut().zip(&bins) {
            *o *= votes[*b];
        }
    }
    Ok((out, votes))
}

pub(crate) fn phm_backward(
    appearance: &Tensor,
    votes: &[f64],
    d_out: &Tensor,
    src: &Grid,
    trg: &Grid,
    cfg: &HoughConfig,
) -> Tensor {
    let (n, _) = appearance.dims2().expect("matrix");
    let table = BinTable::new(src, trg, cfg);
    let mut bins = Vec::new();
    // u(b) = sum over matches in b of g(m) A(m)
    let mut u = vec![0.0; votes.len()];
    for i in 0..n {
        table.row_bins(i / src.cols, i % src.cols, &mut bins);
        for ((g, a), b) in d_out.row(i).iter().zip(appearance.row(i)).zip(&bins) {
            u[*b] += g * a;
        }
    }
    let mut d_a = d_out.clone();
    for i in 0..n {
        table.row_bins(i / src.cols, i % src.cols, &mut bins);
        for (g, b) in d_a.row_mut(i).iter_mut().zip(&bins) {
            *g = *g * votes[*b] + u[*b];
        }
    }
    d_a
}

/// Row and column maxima with the first index attaining each.
pub(crate) struct FilterTrace {
    pub row_max: Vec<(f64, usize)>,
    pub col_max: Vec<(f64, usize)>,
}

pub(crate) fn mutual_nn_filter_traced(c: &Tensor) -> (Tensor, FilterTrace) {
    let (n, m) = c.dims2().expect("matrix");
    let mut row_max = vec![(f64::NEG_INFINITY, 0); n];
    let mut col_max = vec![(f64::NEG_INFINITY, 0); m];
    for i in 0..n {
        for (j, v) in c.row(i).iter().enumerate() {
            if *v > row_max[i].0 {
                row_max[i] = (*v, j);
            }
            if *v > col_max[j].0 {
                col_max[j] = (*v, i);
            }
        }
    }
    let mut out = c.clone();
    for i in 0..n {
        let r = row_max[i].0;
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            let k = col_max[j].0;
            *v = if r > 0.0 && k > 0.0 {
                *v * (*v / r) * (*v / k)
            } else {
                0.0
            };
        }
    }
    (out, FilterTrace { row_max, col_max })
}

/// Soft mutual nearest-neighbour filtering:
/// `out_ij = c_ij * (c_ij / max_k c_ik) * (c_ij / max_k c_kj)`.
pub fn mutual_nn_filter(c: &Tensor) -> Result<Tensor> {
    c.dims2()?;
    Ok(mutual_nn_filter_traced(c).0)
}

pub(crate) fn mutual_nn_filter_backward(
    input: &Tensor,
    output: &Tensor,
    trace: &FilterTrace,
    d_out: &Tensor,
) -> Tensor {
    let (n, m) = input.dims2().expect("matrix");
    let mut d_in = Tensor::zeros(vec![n, m]);
    let mut d_col = vec![0.0; m];
    for i in 0..n {
        let (r, r_arg) = trace.row_max[i];
        if r <= 0.0 {
            continue;
        }
        let mut d_row = 0.0;
        for j in 0..m {
            let k = trace.col_max[j].0;
            if k <= 0.0 {
                continue;
            }
            let g = d_out.row(i)[j];
            if g == 0.0 {
                continue;
            }
            let p = input.row(i)[j];
            let o = output.row(i)[j];
            d_in.row_mut(i)[j] += g * 3.0 * p * p / (r * k);
            d_row -= g * o / r;
            d_col[j] -= g * o / k;
        }
        d_in.row_mut(i)[r_arg] += d_row;
    }
    for (j, g) in d_col.into_iter().enumerate() {
        if trace.col_max[j].0 > 0.0 {
            let i = trace.col_max[j].1;
            d_in.row_mut(i)[j] += g;
        }
    }
    d_in
}

/// Final correlation between two hyperimages.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub values: Tensor,
    pub src_grid: Grid,
    pub trg_grid: Grid,
}

/// Row-wise argmax; ties go to the smaller column.
pub fn dense_match(c: &Tensor) -> Vec<usize> {
    let (n, _) = c.dims2().expect("matrix");
    (0..n)
        .map(|i| {
            let mut best = 0;
            let row = c.row(i);
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Predicts the target location of source keypoint `p` by averaging the
/// transfers of the matches of every cell within Chebyshev distance 1 of the
/// cell containing `p`.
pub fn transfer_keypoint(p: [f64; 2], assignment: &[usize], src: &Grid, trg: &Grid) -> Result<[f64; 2]> {
    check_inside(p, src.size())?;
    if assignment.len() != src.len() {
        return Err(Error::Shape(format!(
            "assignment covers {} cells, grid has {}",
            assignment.len(),
            src.len()
        )));
    }
    let (row, col) = src.cell_of(p);
    let mut sum = [0.0; 2];
    let mut count = 0usize;
    for r in row.saturating_sub(1)..=(row + 1).min(src.rows - 1) {
        for c in col.saturating_sub(1)..=(col + 1).min(src.cols - 1) {
            let n = r * src.cols + c;
            let x = src.center(n);
            let x2 = trg.center(assignment[n]);
            sum[0] += x2[0] - x[0];
            sum[1] += x2[1] - x[1];
            count += 1;
        }
    }
    Ok([p[0] + sum[0] / count as f64, p[1] + sum[1] / count as f64])
}

/// Per-pair match dump written by the `match` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchDump {
    pub src: String,
    pub trg: String,
    pub selected_layers: Vec<usize>,
    /// `[source index, target index, score]`
    pub matches: Vec<(usize, usize, f64)>,
    /// `[x, y, predicted x', predicted y']`
    pub keypoints: Vec<[f64; 4]>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, m: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, m], (0..n * m).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn random_features(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn hyper(grid: Grid, features: Tensor) -> Hyperimage {
        Hyperimage {
            grid,
            features,
            selected: vec![0],
        }
    }

    #[test]
    fn grid_geometry() {
        let g = Grid::new(4, 8, 64.0, 32.0);
        assert_eq!(g.center(0), [4.0, 4.0]);
        assert_eq!(g.center(9), [12.0, 12.0]);
        assert_eq!(g.cell_of([64.0, 32.0]), (3, 7));
        assert_eq!(g.cell_of([0.0, 0.0]), (0, 0));
    }

    #[test]
    fn compose_concatenates_in_order() {
        let grid = Grid::new(2, 2, 8.0, 8.0);
        let b0 = FeatureBlock::new(0, Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let b2 = FeatureBlock::new(2, Tensor::new(vec![1, 1, 2], vec![5.0, 6.0]).unwrap()).unwrap();
        let h = compose_hyperimage(grid, &[(&b0, 1.0), (&b2, 0.5)], vec![0, 2]).unwrap();
        assert_eq!(h.dim(), 3);
        assert_eq!(h.features.row(3), &[4.0, 2.5, 3.0]);
    }

    #[test]
    fn appearance_examples() {
        let grid = Grid::new(1, 1, 4.0, 4.0);
        let f = Tensor::new(vec![1, 2], vec![0.3, -0.4]).unwrap();
        let a = appearance_confidence(&hyper(grid, f.clone()), &hyper(grid, f)).unwrap();
        assert!((a.data()[0] - 1.0).abs() < 1e-12);
        // cos = -0.5 and 0.5
        let s = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let t = Tensor::new(vec![2, 2], vec![-0.5, 0.75f64.sqrt(), 0.5, 0.75f64.sqrt()]).unwrap();
        let a = appearance_confidence(&hyper(grid, s), &hyper(Grid::new(1, 2, 4.0, 4.0), t)).unwrap();
        assert_eq!(a.data()[0], 0.0);
        assert!((a.data()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn phm_single_bin_is_total_mass() {
        let g = Grid::new(3, 3, 30.0, 30.0);
        let a = random_matrix(9, 9, 1);
        let cfg = HoughConfig {
            bins_per_axis: 1,
            offset_range: 1.0,
        };
        let out = phm(&a, &g, &g, &cfg).unwrap();
        let total: f64 = a.data().iter().sum();
        for (o, v) in out.data().iter().zip(a.data()) {
            assert!((o - v * total).abs() < 1e-12);
        }
        assert_eq!(dense_match(&out), dense_match(&a));
    }

    #[test]
    fn offsets_on_bin_edges_go_to_the_upper_bin() {
        let cfg = HoughConfig::default();
        for k in 0..10 {
            // k/5 - 1 lands on an edge up to rounding
            assert_eq!(cfg.axis_bin(k as f64 / 5.0 - 1.0), k, "edge {k}");
        }
        for k in 0..5 {
            assert_eq!(cfg.axis_bin(unit_center(k, 5) - unit_center(0, 5)), k + 5, "grid offset {k}");
        }
        assert_eq!(cfg.axis_bin(-1.5), 0);
        assert_eq!(cfg.axis_bin(1.0), 9);
    }

    #[test]
    fn phm_of_zero_is_zero() {
        let g = Grid::new(2, 3, 12.0, 8.0);
        let out = phm(&Tensor::zeros(vec![6, 6]), &g, &g, &HoughConfig::default()).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn phm_prefers_geometrically_supported_matches() {
        // 2x2 grids; source cell 0 is equally similar to target cells 0 and 3.
        // A third match (1 -> 1) shares the zero offset with 0 -> 0.
        let g = Grid::new(2, 2, 20.0, 20.0);
        let mut a = Tensor::zeros(vec![4, 4]);
        a.row_mut(0)[0] = 0.8;
        a.row_mut(0)[3] = 0.8;
        a.row_mut(1)[1] = 0.5;
        let out = phm(&a, &g, &g, &HoughConfig::default()).unwrap();
        // oracle: double sum over all matches and bins
        let cfg = HoughConfig::default();
        let in_bin = |i: usize, j: usize, bx: usize, by: usize| {
            let s = g.center(i);
            let t = g.center(j);
            let tx = ((t[0] - s[0]) / 20.0 + 1.0) * 10.0 / 2.0;
            let ty = ((t[1] - s[1]) / 20.0 + 1.0) * 10.0 / 2.0;
            (bx as f64) <= tx && tx < (bx + 1) as f64 && (by as f64) <= ty && ty < (by + 1) as f64
        };
        let mut expect = Tensor::zeros(vec![4, 4]);
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for bx in 0..cfg.bins_per_axis {
                    for by in 0..cfg.bins_per_axis {
                        if !in_bin(i, j, bx, by) {
                            continue;
                        }
                        for i2 in 0..4 {
                            for j2 in 0..4 {
                                if in_bin(i2, j2, bx, by) {
                                    s += a.row(i2)[j2];
                                }
                            }
                        }
                    }
                }
                expect.row_mut(i)[j] = a.row(i)[j] * s;
            }
        }
        for (x, y) in out.data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(out.row(0)[0] > out.row(0)[3]);
    }

    #[test]
    fn filter_examples() {
        let id = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(mutual_nn_filter(&id).unwrap(), id);
        let c = Tensor::new(vec![2, 2], vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        assert_eq!(mutual_nn_filter(&c).unwrap().data(), &[2.0, 0.25, 0.25, 2.0]);
        let c = random_matrix(5, 4, 3);
        let f = mutual_nn_filter(&c).unwrap();
        for i in 0..5 {
            let j = dense_match(&c)[i];
            let col_max = (0..5).map(|k| c.row(k)[j]).fold(0.0, f64::max);
            if c.row(i)[j] == col_max {
                assert_eq!(f.row(i)[j], c.row(i)[j]);
            }
        }
        // zero rows/cols stay zero
        let z = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(mutual_nn_filter(&z).unwrap(), z);
    }

    #[test]
    fn dense_match_examples() {
        let id = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(dense_match(&id), vec![0, 1]);
        let uniform = Tensor::new(vec![1, 3], vec![0.2; 3]).unwrap();
        assert_eq!(dense_match(&uniform), vec![0]);
        let perm = Tensor::new(vec![3, 3], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(dense_match(&perm), vec![2, 0, 1]);
    }

    #[test]
    fn transfer_identity_and_translation() {
        let g = Grid::new(4, 4, 32.0, 32.0);
        let identity: Vec<usize> = (0..16).collect();
        let p = [13.3, 22.9];
        assert_eq!(transfer_keypoint(p, &identity, &g, &g).unwrap(), p);
        // every cell maps one column right: translation by one cell (8 px)
        let shifted: Vec<usize> = (0..16).map(|i| if i % 4 < 3 { i + 1 } else { i }).collect();
        let p = [9.0, 9.0]; // cell (1,1); neighbours in cols 0..=2 all shift
        let t = transfer_keypoint(p, &shifted, &g, &g).unwrap();
        assert!((t[0] - 17.0).abs() < 1e-12 && (t[1] - 9.0).abs() < 1e-12);
        assert!(transfer_keypoint([33.0, 1.0], &identity, &g, &g).is_err());
    }

    #[test]
    fn transfer_matches_enumeration() {
        let g = Grid::new(4, 4, 40.0, 40.0);
        let t = Grid::new(4, 4, 60.0, 60.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let assign: Vec<usize> = (0..16).map(|_| rng.random_range(0..16)).collect();
        for p in [[1.0f64, 1.0], [15.0, 25.0], [39.9, 20.0], [40.0, 40.0]] {
            let (r, c) = ((p[1] / 10.0).floor().min(3.0) as i64, (p[0] / 10.0).floor().min(3.0) as i64);
            let mut contributions = Vec::new();
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if !(0..4).contains(&rr) || !(0..4).contains(&cc) {
                        continue;
                    }
                    let n = (rr * 4 + cc) as usize;
                    let (sx, sy) = (cc as f64 * 10.0 + 5.0, rr as f64 * 10.0 + 5.0);
                    let j = assign[n];
                    let (tx, ty) = ((j % 4) as f64 * 15.0 + 7.5, (j / 4) as f64 * 15.0 + 7.5);
                    contributions.push([tx + p[0] - sx, ty + p[1] - sy]);
                }
            }
            let k = contributions.len() as f64;
            let ex = contributions.iter().map(|v| v[0]).sum::<f64>() / k;
            let ey = contributions.iter().map(|v| v[1]).sum::<f64>() / k;
            let got = transfer_keypoint(p, &assign, &g, &t).unwrap();
            assert!((got[0] - ex).abs() < 1e-9 && (got[1] - ey).abs() < 1e-9);
        }
    }

    fn fd_check(f: impl Fn(&Tensor) -> f64, x: &Tensor, analytic: &Tensor, tol: f64) {
        let h = 1e-6;
        for k in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[k] += h;
            xm.data_mut()[k] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(err < tol, "entry {k}: fd {fd} analytic {a}");
        }
    }

    #[test]
    fn filter_backward_matches_finite_differences() {
        let c = random_matrix(4, 5, 11);
        let w = random_features(4, 5, 12);
        let f = |c: &Tensor| crate::tensor::dot(mutual_nn_filter(c).unwrap().data(), w.data());
        let (out, trace) = mutual_nn_filter_traced(&c);
        let g = mutual_nn_filter_backward(&c, &out, &trace, &w);
        fd_check(f, &c, &g, 1e-5);
    }

    #[test]
    fn phm_backward_matches_finite_differences() {
        let sg = Grid::new(2, 3, 30.0, 20.0);
        let tg = Grid::new(3, 2, 20.0, 30.0);
        let cfg = HoughConfig {
            bins_per_axis: 3,
            offset_range: 1.0,
        };
        let a = random_matrix(6, 6, 2);
        let w = random_features(6, 6, 3);
        let f = |a: &Tensor| crate::tensor::dot(phm(a, &sg, &tg, &cfg).unwrap().data(), w.data());
        let (_, votes) = phm_traced(&a, &sg, &tg, &cfg).unwrap();
        let g = phm_backward(&a, &votes, &w, &sg, &tg, &cfg);
        fd_check(f, &a, &g, 1e-6);
    }

    #[test]
    fn appearance_backward_matches_finite_differences() {
        let s = random_features(5, 3, 4);
        let t = random_features(4, 3, 5);
        let w = random_features(5, 4, 6);
        let trace = cosine_matrix(&s, &t).unwrap();
        let (gs, gt) = appearance_backward(&trace, &w);
        let fs = |x: &Tensor| {
            let c = cosine_matrix(x, &t).unwrap();
            crate::tensor::dot(appearance_from_cosine(&c.cosine).data(), w.data())
        };
        let ft = |x: &Tensor| {
            let c = cosine_matrix(&s, x).unwrap();
            crate::tensor::dot(appearance_from_cosine(&c.cosine).data(), w.data())
        };
        fd_check(fs, &s, &gs, 1e-5);
        fd_check(ft, &t, &gt, 1e-5);
    }
}
