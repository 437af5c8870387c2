//! Chebyshev–Lobatto grids on an interval: transforms, differentiation,
//! barycentric evaluation.

use nalgebra::DMatrix;
use std::f64::consts::PI;

/// Lobatto grid with `n + 1` nodes on `[a, b]`, stored in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebGrid {
    pub a: f64,
    pub b: f64,
    pub n: usize,
    pub nodes: Vec<f64>,
}

/// Relative cutoff below which trailing coefficients are treated as noise.
pub const CHOP_REL: f64 = 1e-14;

impl ChebGrid {
    pub fn new(a: f64, b: f64, n: usize) -> Self {
        assert!(n >= 2 && b > a);
        let nodes = (0..=n).map(|i| Self::map(a, b, -(PI * i as f64 / n as f64).cos())).collect();
        ChebGrid { a, b, n, nodes }
    }

    fn map(a: f64, b: f64, t: f64) -> f64 {
        0.5 * (a + b) + 0.5 * (b - a) * t
    }

    /// Reference coordinate in `[-1, 1]`.
    pub fn to_ref(&self, x: f64) -> f64 {
        (2.0 * x - self.a - self.b) / (self.b - self.a)
    }

    /// Coefficients `c_k` with `f = Σ c_k T_k(t)` from values at the nodes.
    pub fn coeffs(&self, vals: &[f64]) -> Vec<f64> {
        let n = self.n;
        debug_assert_eq!(vals.len(), n + 1);
        // node i sits at t = -cos(iπ/n) = cos((n-i)π/n)
        let mut c = vec![0.0; n + 1];
        for (k, ck) in c.iter_mut().enumerate() {
            let mut s = 0.0;
            for (i, v) in vals.iter().enumerate() {
                let j = n - i;
                let w = if j == 0 || j == n { 0.5 } else { 1.0 };
                s += w * v * (PI * (k * j) as f64 / n as f64).cos();
            }
            let scale = if k == 0 || k == n { 1.0 } else { 2.0 };
            *ck = scale * s / n as f64;
        }
        c
    }

    pub fn values(&self, c: &[f64]) -> Vec<f64> {
        self.nodes.iter().map(|&x| clenshaw(c, self.to_ref(x))).collect()
    }

    /// Derivative in `x` of the nodal function, computed through chopped coefficients.
    pub fn diff(&self, vals: &[f64]) -> Vec<f64> {
        let mut c = self.coeffs(vals);
        chop(&mut c, CHOP_REL);
        let dc = diff_coeffs(&c, 2.0 / (self.b - self.a));
        self.values(&dc)
    }

    /// Barycentric interpolation weights for evaluating nodal data at `x`.
    pub fn interp_row(&self, x: f64) -> Vec<f64> {
        let n = self.n;
        let mut row = vec![0.0; n + 1];
        for (i, &xi) in self.nodes.iter().enumerate() {
            if (x - xi).abs() < 1e-15 * (self.b - self.a) {
                row[i] = 1.0;
                return row;
            }
        }
        let mut den = 0.0;
        for (i, &xi) in self.nodes.iter().enumerate() {
            let mut w = if i % 2 == 0 { 1.0 } else { -1.0 };
            if i == 0 || i == n {
                w *= 0.5;
            }
            row[i] = w / (x - xi);
            den += row[i];
        }
        row.iter_mut().for_each(|r| *r /= den);
        row
    }

    pub fn eval(&self, vals: &[f64], x: f64) -> f64 {
        self.interp_row(x).iter().zip(vals).map(|(w, v)| w * v).sum()
    }

    /// Dense first-derivative matrix on the nodes.
    pub fn diff_matrix(&self) -> DMatrix<f64> {
        let n = self.n;
        let x = &self.nodes;
        let cw = |i: usize| -> f64 {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            if i == 0 || i == n {
                2.0 * s
            } else {
                s
            }
        };
        let mut d = DMatrix::zeros(n + 1, n + 1);
        for i in 0..=n {
            let mut diag = 0.0;
            for j in 0..=n {
                if i != j {
                    let v = cw(i) / cw(j) / (x[i] - x[j]);
                    d[(i, j)] = v;
                    diag -= v;
                }
            }
            d[(i, i)] = diag;
        }
        d
    }
}

/// Clenshaw evaluation of `Σ c_k T_k(t)`.
pub fn clenshaw(c: &[f64], t: f64) -> f64 {
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for &ck in c.iter().skip(1).rev() {
        let b0 = 2.0 * t * b1 - b2 + ck;
        b2 = b1;
        b1 = b0;
    }
    c.first().copied().unwrap_or(0.0) + t * b1 - b2
}

/// Coefficients of the derivative, times `scale` (the chain-rule factor).
pub fn diff_coeffs(c: &[f64], scale: f64) -> Vec<f64> {
    let n = c.len();
    if n < 2 {
        return vec![0.0; n.max(1)];
    }
    let mut d = vec![0.0; n];
    for k in (1..n).rev() {
        let up = if k + 1 < n { d[k + 1] } else { 0.0 };
        d[k - 1] = up + 2.0 * k as f64 * c[k];
    }
    d[0] *= 0.5;
    d.iter_mut().for_each(|v| *v *= scale);
    d
}

/// Zero the trailing coefficients below `rel · max|c|`.
pub fn chop(c: &mut [f64], rel: f64) {
    let m = c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m == 0.0 {
        return;
    }
    let last = c.iter().rposition(|v| v.abs() > rel * m).unwrap_or(0);
    c.iter_mut().skip(last + 1).for_each(|v| *v = 0.0);
}

/// `T_k(t)` and its first two derivatives in `t` for `k = 0..n`.
pub fn cheb_basis(n: usize, t: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; n + 1];
    let mut d1 = vec![0.0; n + 1];
    let mut d2 = vec![0.0; n + 1];
    p[0] = 1.0;
    if n >= 1 {
        p[1] = t;
        d1[1] = 1.0;
    }
    for k in 2..=n {
        p[k] = 2.0 * t * p[k - 1] - p[k - 2];
        d1[k] = 2.0 * p[k - 1] + 2.0 * t * d1[k - 1] - d1[k - 2];
        d2[k] = 4.0 * d1[k - 1] + 2.0 * t * d2[k - 1] - d2[k - 2];
    }
    (p, d1, d2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_derivative() {
        let g = ChebGrid::new(0.3, 1.1, 24);
        let v: Vec<f64> = g.nodes.iter().map(|x| (2.0 * x).sin()).collect();
        let c = g.coeffs(&v);
        let back = g.values(&c);
        for (a, b) in v.iter().zip(&back) {
            assert!((a - b).abs() < 1e-14);
        }
        let d = g.diff(&v);
        for (x, dv) in g.nodes.iter().zip(&d) {
            assert!((dv - 2.0 * (2.0 * x).cos()).abs() < 1e-11);
        }
        let dm = g.diff_matrix();
        let dv = &dm * nalgebra::DVector::from_vec(v.clone());
        for (x, dv) in g.nodes.iter().zip(dv.iter()) {
            assert!((dv - 2.0 * (2.0 * x).cos()).abs() < 1e-10);
        }
    }

    #[test]
    fn barycentric_matches_function() {
        let g = ChebGrid::new(-1.0, 2.0, 30);
        let v: Vec<f64> = g.nodes.iter().map(|x| (x * x).exp()).collect();
        for &x in &[-0.77, 0.1, 1.93, 2.0] {
            assert!((g.eval(&v, x) - (x * x).exp()).abs() < 1e-11 * (x * x).exp());
        }
    }

    #[test]
    fn basis_derivatives() {
        let (p, d1, d2) = cheb_basis(6, 0.4);
        let h = 1e-5;
        let (pp, _, _) = cheb_basis(6, 0.4 + h);
        let (pm, _, _) = cheb_basis(6, 0.4 - h);
        for k in 0..=6 {
            assert!(((pp[k] - pm[k]) / (2.0 * h) - d1[k]).abs() < 1e-8);
            assert!(((pp[k] - 2.0 * p[k] + pm[k]) / (h * h) - d2[k]).abs() < 1e-4);
        }
    }
}
