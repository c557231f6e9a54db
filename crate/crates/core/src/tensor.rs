//! Dense row-major arrays and the small set of numeric primitives the
//! matching pipeline is built from.
//!
//! Everything is `f64`. Feature blocks coming from disk are `f32` and are
//! widened on load, which is exact.

use crate::error::{Error, Result};

/// Norms and standard deviations below this are treated as zero.
pub const EPS: f64 = 1e-8;

/// Vectors with a norm below this have no defined direction; `cosine` returns 0.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interprets a rank-3 tensor as `(height, width, channels)`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            other => Err(Error::Shape(format!("expected rank-3 block, got {other:?}"))),
        }
    }

    /// Interprets a rank-2 tensor as `(rows, cols)`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Shape(format!("expected matrix, got {other:?}"))),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&0);
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = *self.shape.last().unwrap_or(&0);
        &mut self.data[r * cols..(r + 1) * cols]
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&self) -> Result<Tensor> {
        let (rows, cols) = self.dims2()?;
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = self.data[i * cols + j];
            }
        }
        Ok(Tensor {
            shape: vec![cols, rows],
            data: out,
        })
    }
}

/// Temperature softmax with max subtraction.
pub fn softmax(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {tau}"
        )));
    }
    if v.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    Ok(softmax_unchecked(v, tau))
}

pub(crate) fn softmax_unchecked(v: &[f64], tau: f64) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| ((x - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean over the spatial positions of an `h x w x c` block.
pub fn global_avg_pool(block: &Tensor) -> Result<Vec<f64>> {
    let (h, w, c) = block.dims3()?;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot pool an empty {h}x{w}x{c} block"
        )));
    }
    let mut out = vec![0.0; c];
    for pos in block.data.chunks_exact(c) {
        for (o, v) in out.iter_mut().zip(pos) {
            *o += v;
        }
    }
    let n = (h * w) as f64;
    for o in &mut out {
        *o /= n;
    }
    Ok(out)
}

/// Source cell that target cell `i` of an upsampled axis reads from.
#[inline]
pub fn nearest_source(i: usize, src: usize, dst: usize) -> usize {
    (i * src) / dst
}

/// Nearest-neighbour upsampling of an `h x w x c` block to `height x width`.
pub fn upsample(block: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w, c) = block.dims3()?;
    if height < h || width < w {
        return Err(Error::InvalidArgument(format!(
            "cannot upsample {h}x{w} to the smaller {height}x{width}"
        )));
    }
    if height == h && width == w {
        return Ok(block.clone());
    }
    let mut out = Vec::with_capacity(height * width * c);
    for i in 0..height {
        let si = nearest_source(i, h, height);
        for j in 0..width {
            let sj = nearest_source(j, w, width);
            let base = (si * w + sj) * c;
            out.extend_from_slice(&block.data[base..base + c]);
        }
    }
    Tensor::new(vec![height, width, c], out)
}

/// Adjoint of [`upsample`]: sums gradients of every target cell into the
/// source cell it was copied from.
pub fn upsample_backward(grad: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (height, width, c) = grad.dims3()?;
    let mut out = Tensor::zeros(vec![h, w, c]);
    for i in 0..height {
        let si = nearest_source(i, h, height);
        for j in 0..width {
            let sj = nearest_source(j, w, width);
            let src = &grad.data[(i * width + j) * c..(i * width + j + 1) * c];
            let dst = &mut out.data[(si * w + sj) * c..(si * w + sj + 1) * c];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; 0 when either vector is (numerically) zero.
pub fn cosine(f: &[f64], g: &[f64]) -> f64 {
    let nf = norm(f);
    let ng = norm(g);
    if nf < COSINE_NORM_FLOOR || ng < COSINE_NORM_FLOOR {
        log::trace!("cosine of a zero-norm vector treated as 0");
        return 0.0;
    }
    (dot(f, g) / (nf * ng)).clamp(-1.0, 1.0)
}

/// Zero mean, unit population variance. Degenerate inputs map to zeros.
pub fn standardize(v: &[f64]) -> Vec<f64> {
    standardize_with_stats(v).0
}

/// Returns the standardized vector together with the population standard
/// deviation used (0 in the degenerate case).
pub(crate) fn standardize_with_stats(v: &[f64]) -> (Vec<f64>, f64) {
    if v.len() < 2 {
        return (vec![0.0; v.len()], 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= EPS {
        return (vec![0.0; v.len()], 0.0);
    }
    (v.iter().map(|x| (x - mean) / std).collect(), std)
}

/// Vector-Jacobian product of [`standardize`] given its output `z` and the
/// standard deviation it used.
pub(crate) fn standardize_backward(z: &[f64], std: f64, grad: &[f64]) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; z.len()];
    }
    let n = z.len() as f64;
    let mean_g = grad.iter().sum::<f64>() / n;
    let mean_gz = dot(grad, z) / n;
    z.iter()
        .zip(grad)
        .map(|(zi, gi)| (gi - mean_g - zi * mean_gz) / std)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[0.0, 0.0], 1.0).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
        let s = softmax(&[3f64.ln(), 0.0], 1.0).unwrap();
        assert!(close(s[0], 0.75, 1e-12) && close(s[1], 0.25, 1e-12));
        let s = softmax(&[5.0, 5.0, 5.0], 2.0).unwrap();
        assert!(s.iter().all(|p| close(*p, 1.0 / 3.0, 1e-12)));
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[1.0, f64::NAN], 1.0).is_err());
        assert!(softmax(&[1.0, 2.0], 0.0).is_err());
        assert!(softmax(&[1.0, 2.0], -1.0).is_err());
    }

    #[test]
    fn pooling_examples() {
        let b = Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(global_avg_pool(&b).unwrap(), vec![1.0, 2.0, 3.0]);
        let b = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&b).unwrap(), vec![2.5]);
        let b = Tensor::zeros(vec![3, 2, 4]);
        assert_eq!(global_avg_pool(&b).unwrap(), vec![0.0; 4]);
        assert!(global_avg_pool(&Tensor::zeros(vec![0, 2, 4])).is_err());
    }

    #[test]
    fn upsample_examples() {
        let single = Tensor::new(vec![1, 1, 2], vec![0.5, -1.0]).unwrap();
        let up = upsample(&single, 3, 4).unwrap();
        assert!(up.data().chunks(2).all(|p| p == [0.5, -1.0]));

        let checker = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample(&checker, 4, 4).unwrap();
        #[rustfmt::skip]
        let expected = vec![
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(up.data(), expected.as_slice());

        assert_eq!(upsample(&checker, 2, 2).unwrap(), checker);
        assert!(upsample(&checker, 1, 4).is_err());
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        // <up(x), y> == <x, up^T(y)>
        let x = Tensor::new(vec![2, 3, 2], (0..12).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        let y = Tensor::new(vec![5, 7, 2], (0..70).map(|v| ((v * 37) % 11) as f64 - 5.0).collect())
            .unwrap();
        let lhs = dot(upsample(&x, 5, 7).unwrap().data(), y.data());
        let rhs = dot(x.data(), upsample_backward(&y, 2, 3).unwrap().data());
        assert!(close(lhs, rhs, 1e-12));
    }

    #[test]
    fn cosine_examples() {
        let v = [1.0, -2.0, 0.5];
        assert!(close(cosine(&v, &v), 1.0, 1e-12));
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!(close(cosine(&v, &neg), -1.0, 1e-12));
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn standardize_examples() {
        assert_eq!(standardize(&[1.0, 3.0]), vec![-1.0, 1.0]);
        assert_eq!(standardize(&[2.0, 2.0, 2.0]), vec![0.0; 3]);
        let s = standardize(&[0.0, 1.0, 2.0]);
        let r = 1.5f64.sqrt();
        assert!(close(s[0], -r, 1e-12) && close(s[1], 0.0, 1e-12) && close(s[2], r, 1e-12));
    }

    #[test]
    fn standardize_backward_matches_finite_differences() {
        let x = [0.3, -1.2, 2.0, 0.7, 0.1];
        let w = [0.5, -0.25, 1.0, 2.0, -1.0];
        let f = |x: &[f64]| dot(&standardize(x), &w);
        let (z, std) = standardize_with_stats(&x);
        let g = standardize_backward(&z, std, &w);
        for i in 0..x.len() {
            let h = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!(close(fd, g[i], 1e-7), "{i}: {fd} vs {}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..12), tau in 0.1f64..10.0) {
            let s = softmax(&v, tau).unwrap();
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(s.iter().all(|p| *p >= 0.0 && *p <= 1.0));
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] > v[j] {
                        prop_assert!(s[i] >= s[j]);
                    }
                }
            }
        }

        #[test]
        fn cosine_is_scale_invariant(
            f in prop::collection::vec(-5.0f64..5.0, 4),
            g in prop::collection::vec(-5.0f64..5.0, 4),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&f) > 1e-3 && norm(&g) > 1e-3);
            let fs: Vec<f64> = f.iter().map(|x| a * x).collect();
            let gs: Vec<f64> = g.iter().map(|x| b * x).collect();
            prop_assert!((cosine(&f, &g) - cosine(&fs, &gs)).abs() < 1e-9);
        }

        #[test]
        fn constant_blocks_survive_upsampling(
            vals in prop::collection::vec(-3.0f64..3.0, 1..5),
            h in 1usize..4, w in 1usize..4, sh in 0usize..4, sw in 0usize..4,
        ) {
            let c = vals.len();
            let data: Vec<f64> = (0..h * w).flat_map(|_| vals.clone()).collect();
            let block = Tensor::new(vec![h, w, c], data).unwrap();
            let up = upsample(&block, h + sh, w + sw).unwrap();
            let a = global_avg_pool(&block).unwrap();
            let b = global_avg_pool(&up).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn standardize_moments(v in prop::collection::vec(-100.0f64..100.0, 2..20)) {
            let z = standardize(&v);
            let n = z.len() as f64;
            let mean = z.iter().sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            let var = z.iter().map(|x| x * x).sum::<f64>() / n;
            prop_assert!(var.sqrt() < 1e-6 || (var.sqrt() - 1.0).abs() < 1e-6);
        }
    }
}
