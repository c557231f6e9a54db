//! Geometric warps used to synthesise training pairs.
//!
//! A warp relates continuous pixel coordinates of a source image to those of
//! its warped copy. `forward` maps source to target (used for keypoints),
//! `backward` maps target to source (used to resample the image).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `p' = M p + t` with `M = [[a, b], [c, d]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub matrix: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0], [0.0, 1.0]],
            translation: [0.0, 0.0],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            translation: [tx, ty],
            ..Self::identity()
        }
    }

    /// Rotation by `angle` radians and isotropic `scale` about `center`,
    /// followed by a translation.
    pub fn similarity(center: [f64; 2], angle: f64, scale: f64, shift: [f64; 2]) -> Self {
        let (s, c) = angle.sin_cos();
        let m = [[scale * c, -scale * s], [scale * s, scale * c]];
        let tx = center[0] - (m[0][0] * center[0] + m[0][1] * center[1]) + shift[0];
        let ty = center[1] - (m[1][0] * center[0] + m[1][1] * center[1]) + shift[1];
        Self {
            matrix: m,
            translation: [tx, ty],
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = &self.matrix;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + self.translation[0],
            m[1][0] * p[0] + m[1][1] * p[1] + self.translation[1],
        ]
    }

    pub fn inverse(&self) -> Result<Affine> {
        let m = &self.matrix;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-12 {
            return Err(Error::InvalidArgument("affine warp is singular".into()));
        }
        let inv = [
            [m[1][1] / det, -m[0][1] / det],
            [-m[1][0] / det, m[0][0] / det],
        ];
        let t = self.translation;
        Ok(Affine {
            matrix: inv,
            translation: [
                -(inv[0][0] * t[0] + inv[0][1] * t[1]),
                -(inv[1][0] * t[0] + inv[1][1] * t[1]),
            ],
        })
    }
}

/// Thin-plate spline from target coordinates to source coordinates, fitted
/// to interpolate a set of control-point correspondences.
#[derive(Clone, Debug, PartialEq)]
pub struct ThinPlateSpline {
    controls: Vec<[f64; 2]>,
    // per output axis: radial weights then [a0, ax, ay]
    weights: [Vec<f64>; 2],
    affine: [[f64; 3]; 2],
}

fn tps_kernel(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

impl ThinPlateSpline {
    /// Fits the spline so that `backward(target[i]) == source[i]`.
    pub fn fit(target: &[[f64; 2]], source: &[[f64; 2]]) -> Result<Self> {
        let n = target.len();
        if n < 3 || source.len() != n {
            return Err(Error::InvalidArgument(
                "thin-plate spline needs at least 3 matched control points".into(),
            ));
        }
        let size = n + 3;
        let mut a = DMatrix::<f64>::zeros(size, size);
        for i in 0..n {
            for j in 0..n {
                let dx = target[i][0] - target[j][0];
                let dy = target[i][1] - target[j][1];
                a[(i, j)] = tps_kernel(dx * dx + dy * dy);
            }
            let row = [1.0, target[i][0], target[i][1]];
            for (k, v) in row.iter().enumerate() {
                a[(i, n + k)] = *v;
                a[(n + k, i)] = *v;
            }
        }
        let lu = a.lu();
        let mut weights: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        let mut affine = [[0.0; 3]; 2];
        for axis in 0..2 {
            let mut rhs = DVector::<f64>::zeros(size);
            for i in 0..n {
                rhs[i] = source[i][axis];
            }
            let sol = lu
                .solve(&rhs)
                .ok_or_else(|| Error::InvalidArgument("degenerate thin-plate control points".into()))?;
            weights[axis] = sol.rows(0, n).iter().copied().collect();
            affine[axis] = [sol[n], sol[n + 1], sol[n + 2]];
        }
        Ok(Self {
            controls: target.to_vec(),
            weights,
            affine,
        })
    }

    pub fn backward(&self, q: [f64; 2]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (axis, o) in out.iter_mut().enumerate() {
            let a = self.affine[axis];
            let mut v = a[0] + a[1] * q[0] + a[2] * q[1];
            for (c, w) in self.controls.iter().zip(&self.weights[axis]) {
                let dx = q[0] - c[0];
                let dy = q[1] - c[1];
                v += w * tps_kernel(dx * dx + dy * dy);
            }
            *o = v;
        }
        out
    }

    fn jacobian(&self, q: [f64; 2]) -> [[f64; 2]; 2] {
        let mut j = [[0.0; 2]; 2];
        for (axis, row) in j.iter_mut().enumerate() {
            row[0] = self.affine[axis][1];
            row[1] = self.affine[axis][2];
            for (c, w) in self.controls.iter().zip(&self.weights[axis]) {
                let dx = q[0] - c[0];
                let dy = q[1] - c[1];
                let r2 = dx * dx + dy * dy;
                if r2 > 0.0 {
                    let g = 2.0 * (r2.ln() + 1.0);
                    row[0] += w * g * dx;
                    row[1] += w * g * dy;
                }
            }
        }
        j
    }

    /// Inverts [`backward`](Self::backward) by Newton iteration.
    pub fn forward(&self, p: [f64; 2]) -> Result<[f64; 2]> {
        let mut q = p;
        for _ in 0..100 {
            let f = self.backward(q);
            let r = [f[0] - p[0], f[1] - p[1]];
            if r[0].abs().max(r[1].abs()) < 1e-11 {
                return Ok(q);
            }
            let j = self.jacobian(q);
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            if det.abs() < 1e-12 {
                break;
            }
            q[0] -= (j[1][1] * r[0] - j[0][1] * r[1]) / det;
            q[1] -= (-j[1][0] * r[0] + j[0][0] * r[1]) / det;
        }
        Err(Error::InvalidArgument(format!(
            "thin-plate spline is not invertible near ({}, {})",
            p[0], p[1]
        )))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum WarpSpec {
    Affine(Affine),
    Tps(ThinPlateSpline),
}

impl WarpSpec {
    pub fn forward(&self, p: [f64; 2]) -> Result<[f64; 2]> {
        match self {
            WarpSpec::Affine(a) => Ok(a.apply(p)),
            WarpSpec::Tps(t) => t.forward(p),
        }
    }

    /// Target-to-source map used to resample a warped image.
    pub fn backward_map(&self) -> Result<Box<dyn Fn([f64; 2]) -> [f64; 2] + Sync + '_>> {
        Ok(match self {
            WarpSpec::Affine(a) => {
                let inv = a.inverse()?;
                Box::new(move |q| inv.apply(q))
            }
            WarpSpec::Tps(t) => Box::new(move |q| t.backward(q)),
        })
    }
}
