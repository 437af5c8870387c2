//! Gauss–Legendre rules, composite rules and tensor grids on the cap and in the cone.

use gauss_quad::legendre::GaussLegendre;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::num::NonZeroUsize;

/// Gauss–Legendre nodes and weights mapped to `[a, b]`.
pub fn gl(a: f64, b: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let rule = GaussLegendre::new(NonZeroUsize::new(n.max(1)).unwrap());
    let h = 0.5 * (b - a);
    let c = 0.5 * (a + b);
    rule.as_node_weight_pairs().iter().map(|&(x, w)| (c + h * x, h * w)).unzip()
}

/// Composite Gauss–Legendre over consecutive breakpoints, `n` nodes per panel.
pub fn composite_gl(breaks: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let rule = GaussLegendre::new(NonZeroUsize::new(n.max(1)).unwrap());
    let mut xs = Vec::with_capacity(n * breaks.len());
    let mut ws = Vec::with_capacity(n * breaks.len());
    for pair in breaks.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b <= a {
            continue;
        }
        let h = 0.5 * (b - a);
        let c = 0.5 * (a + b);
        for &(x, w) in rule.as_node_weight_pairs() {
            xs.push(c + h * x);
            ws.push(h * w);
        }
    }
    (xs, ws)
}

/// Breakpoints `a = b_0 < … < b_p = b` in geometric progression.
pub fn geometric_breaks(a: f64, b: f64, panels: usize) -> Vec<f64> {
    assert!(a > 0.0 && b > a && panels >= 1);
    let q = (b / a).powf(1.0 / panels as f64);
    let mut v: Vec<f64> = (0..=panels).map(|i| a * q.powi(i as i32)).collect();
    v[panels] = b;
    v
}

/// Kahan–Babuška compensated sum.
pub fn ksum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut s = 0.0;
    let mut c = 0.0;
    for x in it {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

/// Tensor grid: radial rule × (Gauss–Legendre in cos θ) × (uniform in φ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureGrid {
    pub r_nodes: Vec<f64>,
    pub r_weights: Vec<f64>,
    pub theta_nodes: Vec<f64>,
    /// Weights in `d(cos θ)`, so that `Σ w = 1 − cos θ0`.
    pub theta_weights: Vec<f64>,
    pub phi_nodes: Vec<f64>,
    pub phi_weight: f64,
}

impl QuadratureGrid {
    /// Cap rule only (single radial node `r = 1` with unit weight).
    pub fn cap(theta0: f64, n_theta: usize, n_phi: usize) -> Self {
        let (xs, ws) = gl(theta0.cos(), 1.0, n_theta);
        let phi_nodes = (0..n_phi).map(|k| 2.0 * PI * (k as f64 + 0.5) / n_phi as f64).collect();
        QuadratureGrid {
            r_nodes: vec![1.0],
            r_weights: vec![1.0],
            theta_nodes: xs.iter().map(|x| x.acos()).collect(),
            theta_weights: ws,
            phi_nodes,
            phi_weight: 2.0 * PI / n_phi as f64,
        }
    }

    /// Cone grid on `r ∈ [r_min, r_max]` with geometric panels.
    pub fn cone(theta0: f64, r_min: f64, r_max: f64, panels: usize, n_r: usize, n_theta: usize, n_phi: usize) -> Self {
        let mut g = Self::cap(theta0, n_theta, n_phi);
        let (rn, rw) = composite_gl(&geometric_breaks(r_min, r_max, panels), n_r);
        g.r_nodes = rn;
        g.r_weights = rw;
        g
    }

    pub fn len(&self) -> usize {
        self.r_nodes.len() * self.theta_nodes.len() * self.phi_nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Integrates `f(r, θ, φ)` against `r² dr dω`.
    pub fn integrate<F: FnMut(f64, f64, f64) -> f64>(&self, mut f: F) -> f64 {
        let mut terms = Vec::with_capacity(self.len());
        for (&r, &wr) in self.r_nodes.iter().zip(&self.r_weights) {
            for (&t, &wt) in self.theta_nodes.iter().zip(&self.theta_weights) {
                for &p in &self.phi_nodes {
                    terms.push(wr * r * r * wt * self.phi_weight * f(r, t, p));
                }
            }
        }
        ksum(terms)
    }

    /// Integrates `f(θ, φ)` over the cap.
    pub fn integrate_cap<F: FnMut(f64, f64) -> f64>(&self, mut f: F) -> f64 {
        let mut terms = Vec::new();
        for (&t, &wt) in self.theta_nodes.iter().zip(&self.theta_weights) {
            for &p in &self.phi_nodes {
                terms.push(wt * self.phi_weight * f(t, p));
            }
        }
        ksum(terms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cap_area_reproduced() {
        for &t0 in &[0.4, PI / 2.0, 2.5] {
            let g = QuadratureGrid::cap(t0, 20, 16);
            let area = g.integrate_cap(|_, _| 1.0);
            let exact = 2.0 * PI * (1.0 - t0.cos());
            assert!(((area - exact) / exact).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_is_exact_for_polynomials() {
        let (x, w) = composite_gl(&geometric_breaks(1.0, 8.0, 3), 5);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(7)).sum();
        assert!((s - (8f64.powi(8) - 1.0) / 8.0).abs() < 1e-8);
    }
}
