//! Coefficients of the asymptotics at infinity.
//!
//! The antisymmetric form `A(u,p,v,q) = a_s(u,p,v,q) − a_s(v,q,u,p)` reduces for
//! singular pairs to the surface integral over `S_R = K ∩ {|x| = R}` of
//! `U₂·∂_rU₁ − U₁·∂_rU₂ + (P₂U₁ − P₁U₂)·x/R`. Pairing the data with the dual
//! solutions `(V, Q)` gives the coefficients
//! `c_{j,k}(s) = −s/(1+2μ_j) ∫_K (f·V + gQ) dx`.
//!
//! The duals are truncated to `η_s(U_N, P_N)` for `j ≥ 2`; for `μ₁ = 0` the
//! constant pair `(0, |Ω|^{−1/2})` is exact. Verification data are manufactured
//! from seeded singular pairs, so no resolvent solver is involved.
//!
//! Pattern fields with different `(m, parity)` are orthogonal in `φ`; all
//! azimuthal integrals are taken analytically.

use crate::error::{Error, Result};
use crate::geometry::{ddeta, deta, eta, smoothstep, smoothstep_d1, smoothstep_d2, ConeSpec, SpatialPoint};
use crate::neumann::{neumann_spectrum, NeumannSpectrum, Parity};
use crate::quad::{composite_gl, geometric_breaks, gl, ksum};
use crate::singular::{build_un_pn, fit_slope, AngularSample, Expansion, PatternValue};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

/// Gauss nodes per panel of the angular and radial rules.
const PANEL_NODES: usize = 8;
/// Tolerance when grouping exponents of the interior power series.
const EXPONENT_TOL: f64 = 1e-9;
/// Minimal distance of `γ − 1/2` from the Neumann spectrum.
const WEIGHT_GAP: f64 = 1e-8;

fn zero() -> C64 {
    C64::new(0.0, 0.0)
}

/// `(∫cos² mφ, ∫sin² mφ)` over one period.
pub fn phi_weights(m: usize) -> (f64, f64) {
    if m == 0 {
        (2.0 * PI, 0.0)
    } else {
        (PI, PI)
    }
}

/// Azimuthal pattern of an expansion.
fn pattern_of(e: &Expansion) -> (usize, Parity) {
    (e.m, if e.m == 0 { Parity::Cos } else { e.parity })
}

/// Bilinear pairing of two pattern values over `φ`.
fn pair_vec(a: &[C64; 3], b: &[C64; 3], m: usize) -> C64 {
    let (wc, ws) = phi_weights(m);
    (a[0] * b[0] + a[1] * b[1]) * wc + a[2] * b[2] * ws
}

/// Radial cut with its jet `(c, c', Δc)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RadialCut {
    None,
    /// `η_s = η(|s| r²)`.
    EtaS,
    /// `0` for `r < ρ`, `1` for `r > 2ρ`.
    Outer { rho: f64 },
}

impl RadialCut {
    pub fn jet(&self, r: f64, s: C64) -> (f64, f64, f64) {
        match *self {
            RadialCut::None => (1.0, 0.0, 0.0),
            RadialCut::EtaS => {
                let sa = s.norm();
                let x = sa * r * r;
                let d1 = deta(x) * 2.0 * sa * r;
                let d2 = ddeta(x) * 4.0 * sa * sa * r * r + deta(x) * 2.0 * sa;
                (eta(x), d1, d2 + 2.0 * d1 / r)
            }
            RadialCut::Outer { rho } => {
                let y = r / rho - 1.0;
                let d1 = smoothstep_d1(y) / rho;
                let d2 = smoothstep_d2(y) / (rho * rho);
                (smoothstep(y), d1, d2 + 2.0 * d1 / r)
            }
        }
    }
}

/// `(θ, sin θ dθ)` nodes over the cap, graded towards `∂Ω` for layers of
/// relative thickness down to `1/scale`.
pub fn cap_rule(cone: &ConeSpec, scale: f64) -> Vec<(f64, f64)> {
    let t0 = cone.half_angle;
    let dc = cone.layer_width;
    let x0 = cone.collar_start();
    let mut out = Vec::new();
    let (xi, wi) = composite_gl(&[0.0, 0.25, 0.5, 0.75, 1.0].map(|f| f * x0), PANEL_NODES);
    out.extend(xi.iter().zip(&wi).map(|(&t, &w)| (t, w * t.sin())));
    let g_min = (1e-3 / scale.max(1.0)).min(dc * 1e-3);
    let panels = ((dc / 2.0 / g_min).log2().ceil() as usize).max(4);
    let mut gb = vec![0.0];
    gb.extend(geometric_breaks(g_min, dc / 2.0, panels));
    gb.push(0.75 * dc);
    gb.push(dc);
    let (gs, gw) = composite_gl(&gb, PANEL_NODES);
    out.extend(gs.iter().zip(&gw).map(|(&g, &w)| {
        let t = t0 - g.asin();
        (t, w / (1.0 - g * g).sqrt() * t.sin())
    }));
    out
}

/// Cut velocity/pressure pattern and its radial derivative.
fn cut_jet(e: &Expansion, a: &AngularSample, r: f64, s: C64, cut: RadialCut) -> (PatternValue, [C64; 3]) {
    let val = |rr: f64| {
        let c = cut.jet(rr, s).0;
        let v = e.eval_pattern(a, rr, s);
        PatternValue { vector: v.vector.map(|x| x * c), scalar: v.scalar * c }
    };
    let h = 1e-3 * r;
    let (p2, p1, m1, m2) = (val(r + 2.0 * h), val(r + h), val(r - h), val(r - 2.0 * h));
    let d = [0, 1, 2].map(|c| (-p2.vector[c] + 8.0 * p1.vector[c] - 8.0 * m1.vector[c] + m2.vector[c]) / (12.0 * h));
    (val(r), d)
}

/// Surface form on `S_R` for two cut pairs; zero when the azimuthal patterns differ.
///
/// The integrand is antisymmetric under exchange of the pairs.
pub fn bilinear_a(e1: &Expansion, e2: &Expansion, s: C64, radius: f64, cut: RadialCut) -> C64 {
    if pattern_of(e1) != pattern_of(e2) {
        return zero();
    }
    let m = e1.m;
    let (wc, _) = phi_weights(m);
    let rule = cap_rule(&e1.cone, radius * s.norm().sqrt());
    let terms = rule.iter().map(|&(t, w)| {
        let (a1, a2) = (e1.sample(t), e2.sample(t));
        let (v1, d1) = cut_jet(e1, &a1, radius, s, cut);
        let (v2, d2) = cut_jet(e2, &a2, radius, s, cut);
        let vel = pair_vec(&v2.vector, &d1, m) - pair_vec(&v1.vector, &d2, m);
        let prs = (v2.scalar * v1.vector[0] - v1.scalar * v2.vector[0]) * wc;
        (vel + prs) * w
    });
    let (re, im): (Vec<f64>, Vec<f64>) = terms.map(|z| (z.re, z.im)).unzip();
    C64::new(ksum(re), ksum(im)) * radius * radius
}

/// Richardson limit of `A(R)` over radii in geometric progression with ratio 2,
/// assuming an expansion in integer powers of `1/R`.
pub fn richardson(values: &[C64]) -> C64 {
    let mut t: Vec<C64> = values.to_vec();
    let mut f = 2.0;
    while t.len() > 1 {
        t = t.windows(2).map(|w| (w[1] * f - w[0]) / (f - 1.0)).collect();
        f *= 2.0;
    }
    t[0]
}

/// `r^p Σ_k c_k (log r)^k`.
#[derive(Debug, Clone, PartialEq)]
struct RLog {
    p: f64,
    c: Vec<C64>,
}

impl RLog {
    fn deriv(&self) -> RLog {
        let n = self.c.len();
        let c = (0..n).map(|k| self.c[k] * self.p + if k + 1 < n { self.c[k + 1] * (k + 1) as f64 } else { zero() });
        RLog { p: self.p - 1.0, c: c.collect() }
    }

    fn over_r(&self) -> RLog {
        RLog { p: self.p - 1.0, c: self.c.clone() }
    }

    fn mul(&self, o: &RLog) -> RLog {
        let mut c = vec![zero(); self.c.len() + o.c.len() - 1];
        for (i, a) in self.c.iter().enumerate() {
            for (j, b) in o.c.iter().enumerate() {
                c[i + j] += a * b;
            }
        }
        RLog { p: self.p + o.p, c }
    }

    fn sub(&self, o: &RLog) -> RLog {
        debug_assert!((self.p - o.p).abs() < EXPONENT_TOL);
        let n = self.c.len().max(o.c.len());
        let c = (0..n).map(|k| self.c.get(k).copied().unwrap_or_default() - o.c.get(k).copied().unwrap_or_default());
        RLog { p: self.p, c: c.collect() }
    }

    fn scale(&self, z: C64) -> RLog {
        RLog { p: self.p, c: self.c.iter().map(|x| x * z).collect() }
    }

    fn at(&self, r: f64) -> C64 {
        let l = r.ln();
        self.c.iter().rev().fold(zero(), |acc, c| acc * l + c) * r.powf(self.p)
    }
}

/// Interior part of `A(R)` as an exact sum `Σ_p R^p poly(log R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSeries {
    /// `(p, coefficients of (log R)^k)`.
    pub terms: Vec<(f64, Vec<C64>)>,
}

impl PowerSeries {
    pub fn at(&self, r: f64) -> C64 {
        self.terms.iter().map(|(p, c)| RLog { p: *p, c: c.clone() }.at(r)).sum()
    }

    /// Coefficient of `R⁰ (log R)⁰`.
    pub fn constant(&self) -> C64 {
        self.terms.iter().filter(|(p, _)| p.abs() < EXPONENT_TOL).map(|(_, c)| c[0]).sum()
    }

    /// Largest coefficient of a non-decaying term other than the constant.
    pub fn divergent_defect(&self) -> f64 {
        let mut d: f64 = 0.0;
        for (p, c) in &self.terms {
            if *p > -EXPONENT_TOL {
                let skip = usize::from(p.abs() < EXPONENT_TOL);
                d = d.max(c.iter().skip(skip).map(|z| z.norm()).fold(0.0, f64::max));
            }
        }
        d
    }
}

/// Exact power structure in `R` of the interior (layer-free) part of `A`.
///
/// With `P = Σ f_a(r)ψ_a(θ)Φ(φ)` and `U = −s⁻¹∇P`, each pair of atoms contributes
/// `R²{s⁻²[(f_b'f_a'' − f_a'f_b'')J₀ + ((f_b/r)(f_a/r)' − (f_a/r)(f_b/r)')J₁] − s⁻¹(f_bf_a' − f_af_b')J₀}`
/// with the angular integrals `J₀ = ∫ψ_aψ_b`, `J₁ = ∫∇_ωψ_a·∇_ωψ_b` (azimuth included).
pub fn interior_series(e1: &Expansion, e2: &Expansion, s: C64) -> PowerSeries {
    let mut acc: Vec<RLog> = Vec::new();
    if pattern_of(e1) == pattern_of(e2) {
        let m = e1.m;
        let (wc, ws) = phi_weights(m);
        let (xs, wx) = composite_gl(&[0.0, 0.25, 0.5, 0.75, 1.0].map(|f| f * e1.cone.half_angle), 16);
        let sq = s.sqrt();
        let mf = m as f64;
        let radial = |e: &Expansion, k: usize| {
            let key = e.interior[k].key;
            let mut c = vec![zero(); key.k as usize + 1];
            c[key.k as usize] = sq.powi(key.a2);
            RLog { p: e.mu - key.b as f64, c }
        };
        for a in 0..e1.interior.len() {
            for b in 0..e2.interior.len() {
                let (pa, pb) = (&e1.interior[a].psi, &e2.interior[b].psi);
                let (mut j0, mut j1) = (Vec::new(), Vec::new());
                for (&t, &w) in xs.iter().zip(&wx) {
                    let (va, vb) = (pa.eval(t), pb.eval(t));
                    let ws_t = w * t.sin();
                    j0.push(ws_t * va.v * vb.v * wc);
                    j1.push(ws_t * (va.d1 * vb.d1 * wc + mf * mf * va.over_sin * vb.over_sin * ws));
                }
                let (j0, j1) = (ksum(j0), ksum(j1));
                let (fa, fb) = (radial(e1, a), radial(e2, b));
                let (fa1, fb1) = (fa.deriv(), fb.deriv());
                let (fa2, fb2) = (fa1.deriv(), fb1.deriv());
                let (ga, gb) = (fa.over_r(), fb.over_r());
                let (ga1, gb1) = (ga.deriv(), gb.deriv());
                let r2 = RLog { p: 2.0, c: vec![C64::new(1.0, 0.0)] };
                let s1 = s.inv();
                let s2 = s1 * s1;
                acc.push(fb1.mul(&fa2).sub(&fa1.mul(&fb2)).scale(s2 * j0).mul(&r2));
                acc.push(gb.mul(&ga1).sub(&ga.mul(&gb1)).scale(s2 * j1).mul(&r2));
                acc.push(fb.mul(&fa1).sub(&fa.mul(&fb1)).scale(-s1 * j0).mul(&r2));
            }
        }
    }
    let mut terms: Vec<(f64, Vec<C64>)> = Vec::new();
    for t in acc {
        match terms.iter_mut().find(|(p, _)| (p - t.p).abs() < EXPONENT_TOL) {
            Some((_, c)) => {
                if c.len() < t.c.len() {
                    c.resize(t.c.len(), zero());
                }
                c.iter_mut().zip(&t.c).for_each(|(x, y)| *x += y);
            }
            None => terms.push((t.p, t.c)),
        }
    }
    terms.sort_by(|a, b| b.0.total_cmp(&a.0));
    PowerSeries { terms }
}

/// Copy without the boundary-layer terms.
fn interior_only(e: &Expansion) -> Expansion {
    let mut o = e.clone();
    o.velocity_layer.clear();
    o.pressure_layer.clear();
    o.momentum_residual.clear();
    o.divergence_residual.clear();
    o.ring_d1.clear();
    o.ring_d2.clear();
    o.ring_div.clear();
    o
}

/// Copy keeping only `p₀ = r^μ φ`.
fn leading_only(e: &Expansion) -> Expansion {
    let mut o = interior_only(e);
    o.interior.retain(|a| a.key.b == 0 && a.key.k == 0);
    o
}

/// `M_j`: smallest integer greater than `μ_j − λ₁`.
pub fn dual_depth(mu: f64, lambda1: f64) -> usize {
    ((mu - lambda1).floor() + 1.0).max(0.0) as usize
}

/// `M_{j,γ}`: smallest integer greater than `γ − μ_j − 3/2`.
pub fn seed_depth(mu: f64, gamma: f64) -> usize {
    let x = gamma - mu - 1.5;
    if x < 0.0 {
        0
    } else {
        x.floor() as usize + 1
    }
}

/// Expansion of the `(j,k)` singular pair on either branch.
pub fn pair_expansion(cone: &ConeSpec, spec: &NeumannSpectrum, j: i32, k: usize, depth: usize) -> Result<Expansion> {
    let ev = spec.get(j.abs()).ok_or_else(|| Error::domain(format!("eigenvalue index {} not in the spectrum", j.abs())))?;
    let profiles = ev.profiles(cone.half_angle)?;
    let p = profiles
        .get(k.wrapping_sub(1))
        .ok_or_else(|| Error::domain(format!("k = {k} exceeds the multiplicity {}", profiles.len())))?;
    let mu = if j > 0 { ev.mu } else { -1.0 - ev.mu };
    build_un_pn(cone, mu, j, p, depth)
}

/// Result of the biorthogonality check on a radius sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiorthogonalityReport {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub l: usize,
    pub mu_i: f64,
    pub mu_j: f64,
    pub s: C64,
    pub radii: Vec<f64>,
    /// Full surface form.
    pub a_full: Vec<C64>,
    /// Layer-free part by quadrature.
    pub a_interior: Vec<C64>,
    /// `p₀`–`p₀` part, `R`-independent for `i = j`.
    pub a_leading: Vec<C64>,
    /// `a_full − a_interior`.
    pub layer: Vec<C64>,
    /// `R⁰` coefficient of the exact interior series.
    pub limit: C64,
    pub expected: C64,
    /// Quadrature versus exact series for the interior part.
    pub series_mismatch: f64,
    pub divergent_defect: f64,
    pub leading_spread: f64,
    pub layer_exponent: Option<f64>,
    pub predicted_layer_exponent: f64,
    pub richardson: C64,
}

/// Surface form between `η_s(U_{M_j}^{(j,k)}, P)` and `η_s(U^{i,l,γ}, P)` on `R ∈ radii·|s|^{−1/2}`.
#[allow(clippy::too_many_arguments)]
pub fn biorthogonality_check(
    cone: &ConeSpec,
    spec: &NeumannSpectrum,
    (i, l): (usize, usize),
    (j, k): (usize, usize),
    s: C64,
    radii: &[f64],
    lambda1: f64,
    gamma: Option<f64>,
) -> Result<BiorthogonalityReport> {
    let get = |n: usize| spec.get(n as i32).map(|e| e.mu).ok_or_else(|| Error::domain(format!("index {n} not in spectrum")));
    let (mu_i, mu_j) = (get(i)?, get(j)?);
    if mu_j >= mu_i + 1.0 {
        return Err(Error::domain(format!("biorthogonality needs μ_j < μ_i + 1 (μ_j = {mu_j}, μ_i = {mu_i})")));
    }
    if s.re < 0.0 || s.norm() == 0.0 {
        return Err(Error::domain("s must satisfy Re s ≥ 0, s ≠ 0"));
    }
    let gamma = gamma.unwrap_or(mu_i + 1.0);
    if gamma <= mu_i + 0.5 {
        return Err(Error::domain("γ must exceed μ_i + 1/2"));
    }
    let e1 = pair_expansion(cone, spec, j as i32, k, dual_depth(mu_j, lambda1))?;
    let e2 = pair_expansion(cone, spec, -(i as i32), l, seed_depth(mu_i, gamma))?;
    let (i1, i2) = (interior_only(&e1), interior_only(&e2));
    let (l1, l2) = (leading_only(&e1), leading_only(&e2));
    let sc = 1.0 / s.norm().sqrt();
    let rs: Vec<f64> = radii.iter().map(|x| x * sc).collect();
    let a_full: Vec<C64> = rs.iter().map(|&r| bilinear_a(&e1, &e2, s, r, RadialCut::EtaS)).collect();
    let a_interior: Vec<C64> = rs.iter().map(|&r| bilinear_a(&i1, &i2, s, r, RadialCut::EtaS)).collect();
    let a_leading: Vec<C64> = rs.iter().map(|&r| bilinear_a(&l1, &l2, s, r, RadialCut::EtaS)).collect();
    let layer: Vec<C64> = a_full.iter().zip(&a_interior).map(|(a, b)| a - b).collect();
    let series = interior_series(&e1, &e2, s);
    let scale = a_interior.iter().map(|z| z.norm()).fold(1.0 / s.norm(), f64::max);
    let series_mismatch =
        rs.iter().zip(&a_interior).map(|(&r, a)| (series.at(r) - a).norm()).fold(0.0, f64::max) / scale;
    let lead_mean = a_leading.iter().sum::<C64>() / a_leading.len() as f64;
    let leading_spread = a_leading.iter().map(|z| (z - lead_mean).norm()).fold(0.0, f64::max);
    let pts: Vec<(f64, f64)> =
        rs.iter().zip(&layer).filter(|(_, z)| z.norm() > 0.0).map(|(r, z)| (r.ln(), z.norm().ln())).collect();
    let layer_exponent = (pts.len() == rs.len() && pts.len() >= 2).then(|| fit_slope(&pts));
    let expected = if i == j && k == l { -(2.0 * mu_j + 1.0) / s } else { zero() };
    Ok(BiorthogonalityReport {
        i,
        j,
        k,
        l,
        mu_i,
        mu_j,
        s,
        radii: rs,
        richardson: richardson(&a_full),
        a_full,
        a_interior,
        a_leading,
        layer,
        limit: series.constant(),
        expected,
        series_mismatch,
        divergent_defect: series.divergent_defect(),
        leading_spread,
        layer_exponent,
        predicted_layer_exponent: mu_j - mu_i - 1.0,
    })
}

/// Dual solution `(V^{(j,k)}, Q^{(j,k)})`, truncated for `j ≥ 2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualSingularPair {
    pub j: usize,
    pub k: usize,
    pub mu: f64,
    pub depth: usize,
    /// Only the constant pair for `μ = 0` is exact.
    pub exact: bool,
    /// `|Ω|^{−1/2}` for the exact pair.
    pub constant: f64,
    /// `η_s(U_N, P_N)` for truncated pairs.
    pub expansion: Option<Expansion>,
    pub lambda1: f64,
}

impl DualSingularPair {
    /// Depth defaults to `M_j`.
    pub fn new(cone: &ConeSpec, spec: &NeumannSpectrum, j: usize, k: usize, lambda1: f64, depth: Option<usize>) -> Result<Self> {
        let ev = spec.get(j as i32).ok_or_else(|| Error::domain(format!("index {j} not in spectrum")))?;
        if ev.mu < 0.0 {
            return Err(Error::domain("dual pairs need μ_j ≥ 0"));
        }
        if ev.mu.abs() < 1e-12 {
            if k != 1 {
                return Err(Error::domain("μ = 0 is simple"));
            }
            return Ok(DualSingularPair {
                j,
                k,
                mu: 0.0,
                depth: 0,
                exact: true,
                constant: cone.cap_area.powf(-0.5),
                expansion: None,
                lambda1,
            });
        }
        let depth = depth.unwrap_or_else(|| dual_depth(ev.mu, lambda1));
        let e = pair_expansion(cone, spec, j as i32, k, depth)?;
        Ok(DualSingularPair { j, k, mu: ev.mu, depth, exact: false, constant: 0.0, expansion: Some(e), lambda1 })
    }

    fn pattern(&self) -> (usize, Parity) {
        self.expansion.as_ref().map_or((0, Parity::Cos), pattern_of)
    }

    /// Cut pattern of `(V, Q)`.
    fn eval(&self, a: Option<&AngularSample>, r: f64, s: C64) -> PatternValue {
        match (&self.expansion, a) {
            (Some(e), Some(a)) => {
                let c = cutoff(s, r);
                let v = e.eval_pattern(a, r, s);
                PatternValue { vector: v.vector.map(|x| x * c), scalar: v.scalar * c }
            }
            _ => PatternValue { vector: [zero(); 3], scalar: C64::new(self.constant, 0.0) },
        }
    }

    /// `(V, Q)` at a point, velocity Cartesian.
    pub fn evaluate(&self, x: &SpatialPoint, s: C64) -> ([C64; 3], C64) {
        match &self.expansion {
            Some(e) => {
                let c = cutoff(s, x.r);
                let (v, q) = e.evaluate(x, s);
                (v.map(|z| z * c), q * c)
            }
            None => ([zero(); 3], C64::new(self.constant, 0.0)),
        }
    }

    /// Envelopes of the dropped remainder `(v, q)` with unit constants: the
    /// near-vertex bounds for `2|s|r² < 1`; in the far zone the larger of the
    /// bound for the part beyond a deep truncation and the first omitted terms
    /// `r^{μ−N−2}`, `r^{μ−N−1}`.
    fn envelope(&self, r: f64, s: C64) -> (f64, f64) {
        if self.exact {
            return (0.0, 0.0);
        }
        let sa = s.norm();
        let y = sa.sqrt() * r;
        let (cv, cq) = (sa.powf(-(1.0 + self.mu) / 2.0), sa.powf(-self.mu / 2.0));
        if 2.0 * y * y < 1.0 {
            let l1 = self.lambda1;
            (cv * y.powf(l1), cq * y.powf(l1 - 1.0))
        } else {
            let e = self.mu - self.depth as f64;
            (cv * (y.powi(-2) + y.powf(e - 2.0)), cq * (y.powi(-1) + y.powf(e - 1.0)))
        }
    }

    /// Exponent `ρ^κ` of the coefficient error for data supported beyond `ρ`:
    /// `κ = max(−μ−1, −N−1)`.
    pub fn envelope_exponent(&self) -> Option<f64> {
        (!self.exact).then(|| (-self.mu - 1.0).max(-(self.depth as f64) - 1.0))
    }
}

fn cutoff(s: C64, r: f64) -> f64 {
    eta(s.norm() * r * r)
}

/// One term of manufactured data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataTerm {
    /// `(u, p) = c·(1−ζ_ρ)(U^{(−j,k)}_N, P^{(−j,k)}_N)` with `1−ζ_ρ` rising on `[ρ, 2ρ]`.
    Seed { j: usize, k: usize, coefficient: C64, rho: f64, depth: usize },
    /// `u = b(x)·a`, `p = κ·b(x)` with `b = (1 − |x−x_c|²/h²)⁴₊`.
    Bump { center: [f64; 3], radius: f64, velocity: [f64; 3], pressure: f64 },
    /// `f = 0`, `g = mass·b(x)/∫b`; no closed-form solution.
    Source { center: [f64; 3], radius: f64, mass: f64 },
}

/// Manufactured problem: data terms and the truncation radius of the quadrature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManufactureSpec {
    pub terms: Vec<DataTerm>,
    /// Outer radius in units of `|s|^{−1/2}`; seeded data beyond it are dropped.
    pub r_max: f64,
}

struct SeedField {
    exp: Expansion,
    c: C64,
    cut: RadialCut,
}

/// Data `(f, g)` with `(s−Δ)u + ∇p = f`, `−∇·u = g` and the known solution.
pub struct ManufacturedData {
    pub cone: ConeSpec,
    pub s: C64,
    pub spec: ManufactureSpec,
    seeds: Vec<SeedField>,
    /// Seeded coefficients `c⁰_{j,k}`.
    pub truth: BTreeMap<(usize, usize), C64>,
    /// Inner radius of the seeded data.
    pub r_min: f64,
    pub r_max: f64,
}

/// Builds the data of a manufactured solution.
pub fn manufacture(cone: &ConeSpec, spectrum: &NeumannSpectrum, spec: &ManufactureSpec, s: C64) -> Result<ManufacturedData> {
    if s.re < 0.0 || s.norm() == 0.0 {
        return Err(Error::domain("s must satisfy Re s ≥ 0, s ≠ 0"));
    }
    let sc = 1.0 / s.norm().sqrt();
    let r_max = spec.r_max * sc;
    let mut seeds = Vec::new();
    let mut truth = BTreeMap::new();
    let mut r_min = f64::INFINITY;
    for t in &spec.terms {
        match t {
            DataTerm::Seed { j, k, coefficient, rho, depth } => {
                if !(*rho > 0.0 && 2.0 * rho * sc < r_max) {
                    return Err(Error::data("seed cut must lie inside the quadrature radius"));
                }
                let exp = pair_expansion(cone, spectrum, -(*j as i32), *k, *depth)?;
                seeds.push(SeedField { exp, c: *coefficient, cut: RadialCut::Outer { rho: rho * sc } });
                *truth.entry((*j, *k)).or_insert(zero()) += coefficient;
                r_min = r_min.min(rho * sc);
            }
            DataTerm::Bump { center, radius, .. } | DataTerm::Source { center, radius, .. } => {
                let p = SpatialPoint::from_cartesian(*center);
                let room = cone.distance_to_boundary(&p).map_err(|_| Error::data("bump centre outside the cone"))?;
                if room <= *radius || p.r + radius > r_max {
                    return Err(Error::data("bump support must lie inside the truncated cone"));
                }
                r_min = r_min.min(p.r - radius);
            }
        }
    }
    Ok(ManufacturedData { cone: *cone, s, spec: spec.clone(), seeds, truth, r_min, r_max })
}

/// `b`, `∇b`, `Δb` of the quartic bump.
pub(crate) fn bump_jet(x: [f64; 3], c: [f64; 3], h: f64) -> (f64, [f64; 3], f64) {
    let d = [x[0] - c[0], x[1] - c[1], x[2] - c[2]];
    let q = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / (h * h);
    if q >= 1.0 {
        return (0.0, [0.0; 3], 0.0);
    }
    let w = 1.0 - q;
    let bw = -4.0 * w.powi(3) / (h * h);
    let bww = 12.0 * w * w / (h * h * h * h);
    let r2 = q * h * h;
    (w.powi(4), d.map(|v| 2.0 * bw * v), 6.0 * bw + 4.0 * r2 * bww)
}

/// Ball rule `(x, weight)` for a bump.
pub(crate) fn ball_rule(c: [f64; 3], h: f64) -> Vec<([f64; 3], f64)> {
    let (rs, wr) = gl(0.0, h, 12);
    let (ts, wt) = gl(0.0, PI, 12);
    let nphi = 16;
    let mut out = Vec::new();
    for (&r, &w1) in rs.iter().zip(&wr) {
        for (&t, &w2) in ts.iter().zip(&wt) {
            for kf in 0..nphi {
                let f = 2.0 * PI * kf as f64 / nphi as f64;
                let x = [c[0] + r * t.sin() * f.cos(), c[1] + r * t.sin() * f.sin(), c[2] + r * t.cos()];
                out.push((x, w1 * w2 * r * r * t.sin() * 2.0 * PI / nphi as f64));
            }
        }
    }
    out
}

/// Product radial rule on `[r_lo, r_hi]` with breaks at the seed cuts.
fn radial_rule(cuts: &[f64], r_hi: f64) -> (Vec<f64>, Vec<f64>) {
    let r_lo = cuts.iter().copied().fold(f64::INFINITY, f64::min);
    let mut br: Vec<f64> = Vec::new();
    for &rho in cuts {
        for f in [1.0, 1.25, 1.5, 1.75, 2.0] {
            br.push(rho * f);
        }
    }
    let top = cuts.iter().copied().fold(0.0, f64::max) * 2.0;
    if r_hi > top {
        let panels = ((r_hi / top).log2() * 3.0).ceil().max(1.0) as usize;
        br.extend(geometric_breaks(top, r_hi, panels));
    }
    br.push(r_lo);
    br.sort_by(f64::total_cmp);
    br.dedup_by(|a, b| (*a - *b).abs() < 1e-14 * b.abs());
    composite_gl(&br, PANEL_NODES)
}

impl ManufacturedData {
    /// True when every term has a known solution.
    pub fn has_solution(&self) -> bool {
        !self.spec.terms.iter().any(|t| matches!(t, DataTerm::Source { .. }))
    }

    /// `(u, p)` at a point, velocity Cartesian; source terms are ignored.
    pub fn solution(&self, x: &SpatialPoint) -> ([C64; 3], C64) {
        let mut u = [zero(); 3];
        let mut p = zero();
        for sd in &self.seeds {
            let c = sd.cut.jet(x.r, self.s).0 * sd.c;
            if c != zero() {
                let (v, q) = sd.exp.evaluate(x, self.s);
                (0..3).for_each(|i| u[i] += v[i] * c);
                p += q * c;
            }
        }
        for t in &self.spec.terms {
            if let DataTerm::Bump { center, radius, velocity, pressure } = t {
                let (b, _, _) = bump_jet(x.cartesian(), *center, *radius);
                (0..3).for_each(|i| u[i] += velocity[i] * b);
                p += pressure * b;
            }
        }
        (u, p)
    }

    /// `(f, g)` at a point, `f` Cartesian.
    pub fn data(&self, x: &SpatialPoint) -> ([C64; 3], C64) {
        let mut f = [zero(); 3];
        let mut g = zero();
        for sd in &self.seeds {
            let a = sd.exp.sample(x.theta);
            let (_, res) = sd.exp.cut_fields(&a, x.r, self.s, sd.cut.jet(x.r, self.s));
            let v = PatternValue { vector: res.vector.map(|z| z * sd.c), scalar: res.scalar * sd.c };
            let (fc, dv) = pattern_to_cartesian(&sd.exp, &v, x);
            (0..3).for_each(|i| f[i] += fc[i]);
            g -= dv;
        }
        for t in &self.spec.terms {
            if let DataTerm::Bump { center, radius, velocity, pressure } = t {
                let (fb, gb) = bump_data(x.cartesian(), *center, *radius, *velocity, *pressure, self.s);
                (0..3).for_each(|i| f[i] += fb[i]);
                g += gb;
            }
            if let DataTerm::Source { center, radius, mass } = t {
                g += source_density(x.cartesian(), *center, *radius, *mass);
            }
        }
        (f, g)
    }

    /// `∫_K g dx` over the quadrature domain.
    pub fn integral_g(&self) -> C64 {
        let mut parts = Vec::new();
        let sa = self.s.norm().sqrt();
        for sd in &self.seeds {
            if sd.exp.m != 0 {
                continue;
            }
            let RadialCut::Outer { rho } = sd.cut else { continue };
            let (rs, wr) = radial_rule(&[rho], self.r_max);
            for (t, wt) in cap_rule(&self.cone, self.r_max * sa) {
                let a = sd.exp.sample(t);
                for (&r, &w) in rs.iter().zip(&wr) {
                    let (_, res) = sd.exp.cut_fields(&a, r, self.s, sd.cut.jet(r, self.s));
                    parts.push(-res.scalar * sd.c * (w * wt * r * r * 2.0 * PI));
                }
            }
        }
        for t in &self.spec.terms {
            if let DataTerm::Bump { center, radius, velocity, pressure } = t {
                for (x, w) in ball_rule(*center, *radius) {
                    parts.push(bump_data(x, *center, *radius, *velocity, *pressure, self.s).1 * w);
                }
            }
            if let DataTerm::Source { center, radius, mass } = t {
                for (x, w) in ball_rule(*center, *radius) {
                    parts.push(source_density(x, *center, *radius, *mass) * w);
                }
            }
        }
        csum(parts)
    }

    /// `−s/(1+2μ_j) ∫(f·V + gQ) dx` and the remainder envelope bar.
    pub fn coefficient(&self, dual: &DualSingularPair) -> CoefficientEntry {
        let s = self.s;
        let sa = s.norm().sqrt();
        let mut parts: Vec<C64> = Vec::new();
        let mut bar: Vec<f64> = Vec::new();
        let dp = dual.pattern();
        for sd in &self.seeds {
            if pattern_of(&sd.exp) != dp {
                continue;
            }
            let m = sd.exp.m;
            let (wc, ws) = phi_weights(m);
            let RadialCut::Outer { rho } = sd.cut else { continue };
            let (rs, wr) = radial_rule(&[rho], self.r_max);
            for (t, wt) in cap_rule(&self.cone, self.r_max * sa) {
                let a = sd.exp.sample(t);
                let ad = dual.expansion.as_ref().map(|e| e.sample(t));
                for (&r, &w) in rs.iter().zip(&wr) {
                    let (_, res) = sd.exp.cut_fields(&a, r, s, sd.cut.jet(r, s));
                    let v = dual.eval(ad.as_ref(), r, s);
                    let vol = w * wt * r * r;
                    // g = −∇·u
                    let val = pair_vec(&res.vector, &v.vector, m) - res.scalar * v.scalar * wc;
                    parts.push(val * sd.c * vol);
                    if !dual.exact {
                        let (ev, eq) = dual.envelope(r, s);
                        let fl = ((res.vector[0].norm_sqr() + res.vector[1].norm_sqr()) * wc
                            + res.vector[2].norm_sqr() * ws)
                            .sqrt();
                        let gl2 = res.scalar.norm() * wc.sqrt();
                        bar.push(sd.c.norm() * vol * (2.0 * PI).sqrt() * (fl * ev + gl2 * eq));
                    }
                }
            }
        }
        for t in &self.spec.terms {
            if let DataTerm::Bump { center, radius, velocity, pressure } = t {
                for (x, w) in ball_rule(*center, *radius) {
                    let pt = SpatialPoint::from_cartesian(x);
                    let (f, g) = bump_data(x, *center, *radius, *velocity, *pressure, s);
                    let (v, q) = dual.evaluate(&pt, s);
                    parts.push((f[0] * v[0] + f[1] * v[1] + f[2] * v[2] + g * q) * w);
                    if !dual.exact {
                        let (ev, eq) = dual.envelope(pt.r, s);
                        let fl = f.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                        bar.push(w * (fl * ev + g.norm() * eq));
                    }
                }
            }
            if let DataTerm::Source { center, radius, mass } = t {
                for (x, w) in ball_rule(*center, *radius) {
                    let pt = SpatialPoint::from_cartesian(x);
                    let g = source_density(x, *center, *radius, *mass);
                    parts.push(g * dual.evaluate(&pt, s).1 * w);
                    if !dual.exact {
                        bar.push(w * g.norm() * dual.envelope(pt.r, s).1);
                    }
                }
            }
        }
        let pref = -s / (1.0 + 2.0 * dual.mu);
        CoefficientEntry {
            j: dual.j,
            k: dual.k,
            mu: dual.mu,
            value: pref * csum(parts),
            error_bar: pref.norm() * ksum(bar),
        }
    }
}

fn csum(v: Vec<C64>) -> C64 {
    let (re, im): (Vec<f64>, Vec<f64>) = v.into_iter().map(|z| (z.re, z.im)).unzip();
    C64::new(ksum(re), ksum(im))
}

fn bump_data(x: [f64; 3], c: [f64; 3], h: f64, a: [f64; 3], kappa: f64, s: C64) -> ([C64; 3], C64) {
    let (b, db, lb) = bump_jet(x, c, h);
    let f = [0, 1, 2].map(|i| s * (b * a[i]) - lb * a[i] + kappa * db[i]);
    let g = -(db[0] * a[0] + db[1] * a[1] + db[2] * a[2]);
    (f, C64::new(g, 0.0))
}

/// `mass·b(x)/∫b` with `∫b = 4πh³·128/3465`.
fn source_density(x: [f64; 3], c: [f64; 3], h: f64, mass: f64) -> C64 {
    let total = 4.0 * PI * h.powi(3) * 128.0 / 3465.0;
    C64::new(mass * bump_jet(x, c, h).0 / total, 0.0)
}

/// Cartesian vector and scalar of a pattern value at a point.
pub(crate) fn pattern_to_cartesian(e: &Expansion, v: &PatternValue, x: &SpatialPoint) -> ([C64; 3], C64) {
    let pp = match e.parity {
        Parity::Sin if e.m > 0 => x.phi - PI / (2.0 * e.m as f64),
        _ => x.phi,
    };
    let mf = e.m as f64;
    let (cm, sm) = ((mf * pp).cos(), (mf * pp).sin());
    let (er, et, ep) = crate::geometry::spherical_basis(x.theta, x.phi);
    let comps = [v.vector[0] * cm, v.vector[1] * cm, v.vector[2] * sm];
    ([0, 1, 2].map(|i| comps[0] * er[i] + comps[1] * et[i] + comps[2] * ep[i]), v.scalar * cm)
}

/// One coefficient with its truncation envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientEntry {
    pub j: usize,
    pub k: usize,
    pub mu: f64,
    pub value: C64,
    pub error_bar: f64,
}

/// Coefficients `c_{j,k}(s)` for `j ∈ J_γ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub s: C64,
    pub gamma: f64,
    pub zero_mean: bool,
    pub entries: Vec<CoefficientEntry>,
}

impl CoefficientSet {
    pub fn get(&self, j: usize, k: usize) -> Option<&CoefficientEntry> {
        self.entries.iter().find(|e| e.j == j && e.k == k)
    }
}

/// `J_γ = {j : 0 ≤ μ_j < γ − 1/2}`, without `j = 1` in the zero-mean variant.
pub fn j_gamma(spec: &NeumannSpectrum, gamma: f64, zero_mean: bool) -> Vec<usize> {
    spec.eigenvalues
        .iter()
        .filter(|e| e.index >= 1 && e.mu >= 0.0 && e.mu < gamma - 0.5)
        .filter(|e| !(zero_mean && e.index == 1))
        .map(|e| e.index as usize)
        .collect()
}

/// Coefficients of the decomposition at infinity for manufactured data.
pub fn decompose(
    data: &ManufacturedData,
    gamma: f64,
    zero_mean: bool,
    lambda1: f64,
    dual_depth_override: Option<usize>,
) -> Result<(CoefficientSet, NeumannSpectrum)> {
    let cone = &data.cone;
    let mu_max = gamma + 1.0;
    let spec = neumann_spectrum(cone, mu_max, mu_max.ceil() as usize + 2)?;
    let mu2 = spec.get(2).map_or(f64::INFINITY, |e| e.mu);
    let upper = if zero_mean { lambda1.min(mu2) + 1.5 } else { 1.5 };
    if !(gamma > 0.5 && gamma < upper) {
        return Err(Error::domain(format!("γ = {gamma} outside (1/2, {upper})")));
    }
    if spec.eigenvalues.iter().any(|e| (e.mu - (gamma - 0.5)).abs() < WEIGHT_GAP) {
        return Err(Error::domain(format!("γ − 1/2 = {} is a Neumann eigenvalue", gamma - 0.5)));
    }
    if zero_mean {
        let ig = data.integral_g();
        let scale = data.truth.values().map(|c| c.norm()).fold(1.0, f64::max) / data.s.norm();
        if ig.norm() > 1e-10 * scale.max(1.0) {
            return Err(Error::data(format!("zero-mean variant requested but ∫g = {ig}")));
        }
    }
    let mut entries = Vec::new();
    for j in j_gamma(&spec, gamma, zero_mean) {
        let mult = spec.get(j as i32).map_or(0, |e| e.multiplicity);
        for k in 1..=mult {
            let dual = DualSingularPair::new(cone, &spec, j, k, lambda1, dual_depth_override)?;
            entries.push(data.coefficient(&dual));
        }
    }
    Ok((CoefficientSet { s: data.s, gamma, zero_mean, entries }, spec))
}

/// `(u, p) − η_s Σ c_{j,k}(u₀^{(−j,k)}, p₀^{(−j,k)})` for manufactured data.
pub struct RemainderEvaluator<'a> {
    data: &'a ManufacturedData,
    terms: Vec<(C64, Expansion)>,
}

impl<'a> RemainderEvaluator<'a> {
    pub fn new(data: &'a ManufacturedData, set: &CoefficientSet, spec: &NeumannSpectrum) -> Result<Self> {
        if !data.has_solution() {
            return Err(Error::data("remainder needs manufactured data with a known solution"));
        }
        let mut terms = Vec::new();
        for e in &set.entries {
            terms.push((e.value, pair_expansion(&data.cone, spec, -(e.j as i32), e.k, 0)?));
        }
        Ok(RemainderEvaluator { data, terms })
    }

    pub fn eval(&self, x: &SpatialPoint) -> ([C64; 3], C64) {
        let (mut u, mut p) = self.data.solution(x);
        let c = cutoff(self.data.s, x.r);
        for (a, e) in &self.terms {
            let (v, q) = e.evaluate(x, self.data.s);
            (0..3).for_each(|i| u[i] -= v[i] * a * c);
            p -= q * a * c;
        }
        (u, p)
    }
}

/// Fitted and predicted `r`-exponents of point values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointEstimateReport {
    pub delta: f64,
    pub gamma: f64,
    pub d: u8,
    /// Near zone `2|s|r² < 1`; `None` when the field vanishes there.
    pub near_velocity: Option<f64>,
    pub near_predicted: f64,
    /// Far zone `(|u|, |∇u|, |p|, |∇p|)` fitted exponents.
    pub far_fitted: [f64; 4],
    /// Bound exponents `(−2, −2, −1, −2)`.
    pub far_predicted: [f64; 4],
}

/// Point estimates of a manufactured solution along the radius range `[r_lo, r_hi]·|s|^{−1/2}`.
pub fn point_estimate_check(
    data: &ManufacturedData,
    delta: f64,
    gamma: f64,
    lambda1: f64,
    d: u8,
    far: (f64, f64),
) -> Result<PointEstimateReport> {
    let s = data.s;
    let sc = 1.0 / s.norm().sqrt();
    if !data.has_solution() {
        return Err(Error::data("point estimates need manufactured data with a known solution"));
    }
    if data.r_min < sc / 2f64.sqrt() * (1.0 - 1e-12) {
        return Err(Error::data("data must vanish for 2|s||x|² < 1"));
    }
    let thetas: Vec<f64> = (1..8).map(|i| data.cone.half_angle * i as f64 / 8.0).collect();
    let phis = [0.1, 0.9, 1.7, 2.9];
    let envelope = |r: f64| -> [f64; 4] {
        let mut out = [0.0f64; 4];
        for &t in &thetas {
            for &ph in &phis {
                let x = SpatialPoint::new(r, t, ph);
                let (u, p) = data.solution(&x);
                let (gu, gp) = gradients(data, &x);
                out[0] = out[0].max(u.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt());
                out[1] = out[1].max(gu);
                out[2] = out[2].max(p.norm());
                out[3] = out[3].max(gp);
            }
        }
        out
    };
    let near: Vec<(f64, f64)> = (0..6)
        .map(|i| sc * 0.05 * (0.6f64 / 0.05).powf(i as f64 / 5.0))
        .map(|r| (r.ln(), envelope(r)[0]))
        .collect();
    let near_velocity = near.iter().all(|(_, v)| *v > 0.0).then(|| fit_slope(&near.iter().map(|(a, b)| (*a, b.ln())).collect::<Vec<_>>()));
    let radii: Vec<f64> = (0..6).map(|i| sc * far.0 * (far.1 / far.0).powf(i as f64 / 5.0)).collect();
    let envs: Vec<[f64; 4]> = radii.iter().map(|&r| envelope(r)).collect();
    let far_fitted = [0, 1, 2, 3].map(|c| {
        let pts: Vec<(f64, f64)> = radii.iter().zip(&envs).map(|(r, e)| (r.ln(), e[c].max(1e-300).ln())).collect();
        fit_slope(&pts)
    });
    Ok(PointEstimateReport {
        delta,
        gamma,
        d,
        near_velocity,
        near_predicted: lambda1,
        far_fitted,
        far_predicted: [-2.0, -2.0, -1.0, -2.0],
    })
}

/// `(|∇u|, |∇p|)` by fourth-order Cartesian differences.
fn gradients(data: &ManufacturedData, x: &SpatialPoint) -> (f64, f64) {
    let c = x.cartesian();
    let h = 1e-3 * x.r;
    let mut gu = 0.0;
    let mut gp = 0.0;
    for dir in 0..3 {
        let at = |o: f64| {
            let mut y = c;
            y[dir] += o * h;
            data.solution(&SpatialPoint::from_cartesian(y))
        };
        let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
        let d = |a: C64, b: C64, cc: C64, dd: C64| (-a + 8.0 * b - 8.0 * cc + dd) / (12.0 * h);
        for i in 0..3 {
            gu += d(p2.0[i], p1.0[i], m1.0[i], m2.0[i]).norm_sqr();
        }
        gp += d(p2.1, p1.1, m1.1, m2.1).norm_sqr();
    }
    (gu.sqrt(), gp.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::spherical_basis;
    use std::f64::consts::FRAC_PI_3;

    fn s0() -> C64 {
        C64::new(1.0, 0.5)
    }

    fn hemi() -> (ConeSpec, NeumannSpectrum) {
        let c = ConeSpec::hemisphere();
        let sp = neumann_spectrum(&c, 3.0, 4).unwrap();
        (c, sp)
    }

    fn seed(j: usize, rho: f64, depth: usize) -> DataTerm {
        DataTerm::Seed { j, k: 1, coefficient: C64::new(1.0, 0.0), rho, depth }
    }

    #[test]
    fn antisymmetry_and_self_pairing() {
        let (c, sp) = hemi();
        let a = pair_expansion(&c, &sp, 2, 1, 1).unwrap();
        let b = pair_expansion(&c, &sp, -2, 1, 0).unwrap();
        let r = 3.0;
        let x = bilinear_a(&a, &b, s0(), r, RadialCut::EtaS);
        let y = bilinear_a(&b, &a, s0(), r, RadialCut::EtaS);
        assert!((x + y).norm() <= 1e-14 * x.norm());
        assert!(bilinear_a(&a, &a, s0(), r, RadialCut::EtaS).norm() < 1e-14);
    }

    #[test]
    fn surface_form_matches_full_quadrature() {
        // independent route: Cartesian evaluation, trapezoid in φ, radial differences
        let cone = ConeSpec::new(FRAC_PI_3).unwrap();
        let sp = neumann_spectrum(&cone, 3.0, 3).unwrap();
        let a = pair_expansion(&cone, &sp, 2, 2, 1).unwrap();
        let b = pair_expansion(&cone, &sp, -2, 2, 0).unwrap();
        let (s, r) = (s0(), 5.0);
        let fast = bilinear_a(&a, &b, s, r, RadialCut::None);
        let nphi = 12;
        let mut acc = C64::new(0.0, 0.0);
        for (t, w) in cap_rule(&cone, r * s.norm().sqrt()) {
            for kf in 0..nphi {
                let phi = 2.0 * PI * (kf as f64 + 0.3) / nphi as f64;
                let at = |e: &Expansion, rr: f64| e.evaluate(&SpatialPoint::new(rr, t, phi), s);
                let h = 1e-3 * r;
                let d = |e: &Expansion| {
                    let v = |o: f64| at(e, r + o * h).0;
                    let (p2, p1, m1, m2) = (v(2.0), v(1.0), v(-1.0), v(-2.0));
                    [0, 1, 2].map(|i| (-p2[i] + 8.0 * p1[i] - 8.0 * m1[i] + m2[i]) / (12.0 * h))
                };
                let ((u1, p1), (u2, p2)) = (at(&a, r), at(&b, r));
                let (d1, d2) = (d(&a), d(&b));
                let (er, _, _) = spherical_basis(t, phi);
                let dot = |x: &[C64; 3], y: &[C64; 3]| x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
                let ur = |u: &[C64; 3]| u[0] * er[0] + u[1] * er[1] + u[2] * er[2];
                let val = dot(&u2, &d1) - dot(&u1, &d2) + p2 * ur(&u1) - p1 * ur(&u2);
                acc += val * w * (2.0 * PI / nphi as f64);
            }
        }
        acc *= r * r;
        assert!((fast - acc).norm() <= 1e-9 * acc.norm().max(1e-3), "{fast} vs {acc}");
    }

    #[test]
    fn biorthogonality_on_hemisphere() {
        let (c, sp) = hemi();
        let s = s0();
        let radii = [2.0, 4.0, 8.0, 16.0];
        for (i, l, j, k, diag) in [(1, 1, 1, 1, true), (2, 1, 2, 1, true), (2, 2, 2, 2, true), (2, 2, 2, 1, false), (2, 1, 1, 1, false)] {
            let rep = biorthogonality_check(&c, &sp, (i, l), (j, k), s, &radii, 1.0, None).unwrap();
            let mu = sp.get(j as i32).unwrap().mu;
            let want = if diag { -(2.0 * mu + 1.0) / s } else { C64::new(0.0, 0.0) };
            assert!((rep.limit - want).norm() <= 1e-6, "{i}{l}{j}{k}: {}", rep.limit);
            assert!(rep.series_mismatch < 1e-9);
            assert!(rep.divergent_defect < 1e-9);
            if diag {
                assert!(rep.leading_spread <= 1e-6);
            }
        }
        let far = biorthogonality_check(&c, &sp, (1, 1), (1, 1), s, &[16.0, 32.0, 64.0, 128.0], 1.0, None).unwrap();
        assert!((far.layer_exponent.unwrap() - far.predicted_layer_exponent).abs() < 0.1);
        assert!(biorthogonality_check(&c, &sp, (1, 1), (2, 1), s, &radii, 1.0, None).is_err());
    }

    #[test]
    fn decaying_pairs_have_zero_form() {
        let (c, sp) = hemi();
        let a = pair_expansion(&c, &sp, -2, 1, 0).unwrap();
        let b = pair_expansion(&c, &sp, -2, 1, 1).unwrap();
        let ser = interior_series(&a, &b, s0());
        assert!(ser.constant().norm() < 1e-14 && ser.divergent_defect() < 1e-14);
        assert!(ser.terms.iter().all(|(p, _)| *p < 0.0));
    }

    #[test]
    fn depths() {
        assert_eq!(dual_depth(0.0, 1.0), 0);
        assert_eq!(dual_depth(1.0, 1.0), 1);
        assert_eq!(dual_depth(1.468, 1.0), 1);
        assert_eq!(dual_depth(0.7, 1.0), 0);
        assert_eq!(seed_depth(0.0, 1.0), 0);
        assert_eq!(seed_depth(0.0, 1.6), 1);
    }

    #[test]
    fn manufactured_data_match_differences() {
        let cone = ConeSpec::new(FRAC_PI_3).unwrap();
        let sp = neumann_spectrum(&cone, 3.0, 3).unwrap();
        let spec = ManufactureSpec {
            terms: vec![
                seed(2, 3.0, 1),
                DataTerm::Bump { center: [0.3, 0.2, 6.0], radius: 0.8, velocity: [0.5, -1.0, 0.25], pressure: 0.7 },
            ],
            r_max: 50.0,
        };
        let s = s0();
        let d = manufacture(&cone, &sp, &spec, s).unwrap();
        let h = 1e-3;
        for x in [SpatialPoint::new(4.5, 0.4, 0.3), SpatialPoint::new(6.0, 0.15, 1.0), SpatialPoint::new(9.0, 0.6, 2.0)] {
            let c = x.cartesian();
            let at = |dir: usize, o: f64| {
                let mut y = c;
                y[dir] += o * h;
                d.solution(&SpatialPoint::from_cartesian(y))
            };
            let (u0, _) = d.solution(&x);
            let mut f = u0.map(|v| v * s);
            let mut div = C64::new(0.0, 0.0);
            for dir in 0..3 {
                let (p2, p1, m1, m2) = (at(dir, 2.0), at(dir, 1.0), at(dir, -1.0), at(dir, -2.0));
                for i in 0..3 {
                    let lap = (-p2.0[i] + 16.0 * p1.0[i] - 30.0 * u0[i] + 16.0 * m1.0[i] - m2.0[i]) / (12.0 * h * h);
                    f[i] -= lap;
                }
                f[dir] += (-p2.1 + 8.0 * p1.1 - 8.0 * m1.1 + m2.1) / (12.0 * h);
                div += (-p2.0[dir] + 8.0 * p1.0[dir] - 8.0 * m1.0[dir] + m2.0[dir]) / (12.0 * h);
            }
            let (fs, gs) = d.data(&x);
            let scale = fs.iter().map(|z| z.norm()).fold(1e-3, f64::max);
            for i in 0..3 {
                assert!((fs[i] - f[i]).norm() < 1e-5 * scale, "{:?} {:?}", fs, f);
            }
            assert!((gs + div).norm() < 1e-5 * scale);
        }
    }

    #[test]
    fn divergence_integral_equals_outer_flux() {
        let (c, sp) = hemi();
        let s = s0();
        let spec = ManufactureSpec { terms: vec![seed(1, 4.0, 1)], r_max: 40.0 };
        let d = manufacture(&c, &sp, &spec, s).unwrap();
        let r = d.r_max;
        let e = pair_expansion(&c, &sp, -1, 1, 1).unwrap();
        let flux: C64 = cap_rule(&c, r * s.norm().sqrt())
            .into_iter()
            .map(|(t, w)| e.eval_pattern(&e.sample(t), r, s).vector[0] * w * 2.0 * PI)
            .sum::<C64>()
            * r
            * r;
        assert!((d.integral_g() + flux).norm() < 1e-10 * flux.norm());
    }

    #[test]
    fn constant_dual_recovers_seed() {
        let (c, sp) = hemi();
        let spec = ManufactureSpec { terms: vec![seed(1, 4.0, 3)], r_max: 200.0 };
        let d = manufacture(&c, &sp, &spec, s0()).unwrap();
        let dual = DualSingularPair::new(&c, &sp, 1, 1, 1.0, None).unwrap();
        assert!(dual.exact && dual.expansion.is_none());
        let got = d.coefficient(&dual);
        assert!((got.value - 1.0).norm() < 1e-8, "{}", got.value);
        assert_eq!(got.error_bar, 0.0);
    }

    #[test]
    fn source_with_unit_mass() {
        let (c, sp) = hemi();
        let s = s0();
        let spec = ManufactureSpec {
            terms: vec![DataTerm::Source { center: [0.5, -0.3, 3.0], radius: 1.0, mass: 1.0 }],
            r_max: 20.0,
        };
        let d = manufacture(&c, &sp, &spec, s).unwrap();
        assert!((d.integral_g() - 1.0).norm() < 1e-12);
        let dual = DualSingularPair::new(&c, &sp, 1, 1, 1.0, None).unwrap();
        let want = -s / (2.0 * PI).sqrt();
        assert!((d.coefficient(&dual).value - want).norm() < 1e-12);
        assert!(!d.has_solution());
    }

    #[test]
    fn smooth_part_alone_gives_small_coefficients() {
        let cone = ConeSpec::new(FRAC_PI_3).unwrap();
        let sp = neumann_spectrum(&cone, 3.0, 3).unwrap();
        // bump on the axis, away from the collar where the truncated dual has its residual
        let spec = ManufactureSpec {
            terms: vec![DataTerm::Bump { center: [0.2, 0.1, 8.0], radius: 1.5, velocity: [1.0, 0.5, -0.3], pressure: 0.4 }],
            r_max: 40.0,
        };
        let d = manufacture(&cone, &sp, &spec, s0()).unwrap();
        for (j, k) in [(1, 1), (2, 1), (2, 2)] {
            let dual = DualSingularPair::new(&cone, &sp, j, k, 1.0, None).unwrap();
            let c = d.coefficient(&dual);
            assert!(c.value.norm() < 1e-9, "{j},{k}: {}", c.value);
        }
    }

    #[test]
    fn truncation_error_decays_at_envelope_rate() {
        let cone = ConeSpec::new(FRAC_PI_3).unwrap();
        let sp = neumann_spectrum(&cone, 3.0, 3).unwrap();
        let s = s0();
        let dual = DualSingularPair::new(&cone, &sp, 2, 1, 1.0, Some(0)).unwrap();
        let err = |rho: f64| {
            let spec = ManufactureSpec { terms: vec![seed(2, rho, 2)], r_max: 20.0 * rho };
            let d = manufacture(&cone, &sp, &spec, s).unwrap();
            (d.coefficient(&dual).value - 1.0).norm()
        };
        let rate = (err(32.0) / err(16.0)).log2();
        assert!((rate - dual.envelope_exponent().unwrap()).abs() < 0.2, "{rate}");
    }

    #[test]
    fn linearity_in_the_data() {
        let cone = ConeSpec::new(FRAC_PI_3).unwrap();
        let sp = neumann_spectrum(&cone, 3.0, 3).unwrap();
        let s = s0();
        let a = DataTerm::Seed { j: 2, k: 1, coefficient: C64::new(0.5, -0.25), rho: 4.0, depth: 1 };
        let b = DataTerm::Bump { center: [1.0, 0.5, 7.0], radius: 1.0, velocity: [0.3, 0.1, 0.2], pressure: -1.0 };
        let mk = |t: Vec<DataTerm>| manufacture(&cone, &sp, &ManufactureSpec { terms: t, r_max: 30.0 }, s).unwrap();
        let dual = DualSingularPair::new(&cone, &sp, 2, 1, 1.0, None).unwrap();
        let both = mk(vec![a.clone(), b.clone()]).coefficient(&dual).value;
        let sum = mk(vec![a]).coefficient(&dual).value + mk(vec![b]).coefficient(&dual).value;
        assert!((both - sum).norm() < 1e-12 * both.norm());
    }

    #[test]
    fn homogeneity_under_rescaling() {
        let cone = ConeSpec::new(FRAC_PI_3).unwrap();
        let sp = neumann_spectrum(&cone, 3.0, 3).unwrap();
        let mu = sp.get(2).unwrap().mu;
        let s = C64::from_polar(4.0, 0.4);
        let sh = s / s.norm();
        let spec = |c: C64| ManufactureSpec {
            terms: vec![DataTerm::Seed { j: 2, k: 1, coefficient: c, rho: 4.0, depth: 1 }],
            r_max: 60.0,
        };
        let dual = DualSingularPair::new(&cone, &sp, 2, 1, 1.0, None).unwrap();
        let c_s = manufacture(&cone, &sp, &spec(C64::new(1.0, 0.0)), s).unwrap().coefficient(&dual).value;
        // rescaled data are the seed with coefficient |s|^{μ/2} at s/|s|
        let lifted = C64::new(s.norm().powf(mu / 2.0), 0.0);
        let c_h = manufacture(&cone, &sp, &spec(lifted), sh).unwrap().coefficient(&dual).value;
        let rhs = c_h * s.norm().powf(-mu / 2.0);
        assert!((c_s - rhs).norm() <= 1e-8 * c_s.norm(), "{c_s} vs {rhs}");
    }

    #[test]
    fn coefficient_sets_follow_j_gamma() {
        let (c, sp) = hemi();
        assert_eq!(j_gamma(&sp, 1.2, false), vec![1]);
        assert_eq!(j_gamma(&sp, 1.6, false), vec![1, 2]);
        assert!(j_gamma(&sp, 1.2, true).is_empty());
        let spec = ManufactureSpec { terms: vec![seed(1, 4.0, 1)], r_max: 40.0 };
        let d = manufacture(&c, &sp, &spec, s0()).unwrap();
        let (set, _) = decompose(&d, 1.2, false, 1.0, None).unwrap();
        assert_eq!(set.entries.len(), 1);
        assert!(decompose(&d, 1.5, false, 1.0, None).is_err());
        assert!(decompose(&d, 1.2, true, 1.0, None).is_err());
        // zero-mean data: the m = 1 seed, γ below μ₂ + 1/2 leaves no terms
        let z = manufacture(&c, &sp, &ManufactureSpec { terms: vec![seed(2, 4.0, 1)], r_max: 40.0 }, s0()).unwrap();
        let (set, _) = decompose(&z, 1.2, true, 1.0, None).unwrap();
        assert!(set.entries.is_empty());
    }

    #[test]
    fn far_zone_point_estimates() {
        let (c, sp) = hemi();
        let spec = ManufactureSpec { terms: vec![seed(1, 2.0, 2)], r_max: 400.0 };
        let d = manufacture(&c, &sp, &spec, s0()).unwrap();
        let rep = point_estimate_check(&d, 0.0, 5.0, 1.0, 0, (20.0, 80.0)).unwrap();
        assert!((rep.far_fitted[2] - rep.far_predicted[2]).abs() < 0.1, "{:?}", rep.far_fitted);
        for i in 0..4 {
            assert!(rep.far_fitted[i] <= rep.far_predicted[i] + 0.1);
        }
        assert!(rep.near_velocity.is_none());
    }
}
