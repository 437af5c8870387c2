//! Singular solutions of the resolvent Stokes system near the vertex.
//!
//! An expansion is stored as
//! `U = −s⁻¹∇P_int − χ(ν/r) e^{−ν√s} W`, `P = P_int − χ(ν/r) e^{−ν√s} Q`.
//! `P_int` is a sum of harmonic atoms `s^a r^{μ−b} (log r)^k ψ(θ) cos mφ`;
//! `W` and `Q` are sums of collar atoms `s^a r^{μ−b} (log r)^k (ν√s)^i F(θ)`.
//! Exponents are exact; angular factors are numeric (a Chebyshev–Lobatto grid
//! over the collar for `W`, `Q`, pole-regular profiles on the cap for `ψ`).
//!
//! The layer factor is conjugated through the operators:
//! `(s−Δ)(Eh) = E·M(h)`, `∇(Eq) = E·G(q)`, `∇·(Eh) = E·D(h)` with `E = e^{−ν√s}`,
//! `M(h) = −Δh + 2√s(∇ν·∇)h + √s Δν h`, `G(q) = ∇q − √s q∇ν`, `D(h) = ∇·h − √s ∇ν·h`.
//! In the symbolic calculus `t = ν√s` is an independent variable with
//! `∇t = √s∇ν`, so terms produced by differentiating `t^i` keep their level `b`
//! while all other derivatives raise it. The residual of an expansion of depth
//! `N` is `χE·f + ring terms` with every atom of `f` at level `b ≥ N+2`.
//!
//! Vector fields follow the azimuthal pattern `(cos, cos, sin)·mφ` in the
//! `(e_r, e_θ, e_φ)` components; sine-parity profiles are handled by rotating
//! the azimuth by `π/(2m)`.

use crate::cheb::ChebGrid;
use crate::error::{Error, Result};
use crate::geometry::{ddeta, deta, eta, spherical_basis, ConeSpec, SpatialPoint};
use crate::neumann::{
    beltrami_collocation, build_profile, neumann_row_factor, neumann_spectrum, roots_for_m, AngularProfile,
    Parity, PoleRegular, ProfileValues, PROFILE_DEGREE, SCAN_STEP,
};
use crate::poly::boundary_polynomials;
use crate::quad::{composite_gl, geometric_breaks, gl, ksum};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

/// Polynomial degree of the collar grid.
pub const COLLAR_DEGREE: usize = 32;
/// `|λ(λ+1) − M| < RESONANCE_TOL` is treated as a resonance.
pub const RESONANCE_TOL: f64 = 1e-8;
pub const MAX_DEPTH: usize = 8;
/// Largest admissible relative size of the cancelled leading residual.
pub const CANCEL_TOL: f64 = 1e-8;
/// Atoms below this fraction of the leading layer atom are rounding noise.
pub const DROP_REL: f64 = 1e-9;

/// Exponents of an atom: `s^{a2/2} r^{μ−b} (log r)^k (ν√s)^i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Key {
    pub a2: i32,
    pub b: i32,
    pub k: u32,
    pub i: u32,
}

impl Key {
    pub fn new(a2: i32, b: i32, k: u32, i: u32) -> Self {
        Key { a2, b, k, i }
    }

    pub fn s_power(&self) -> f64 {
        self.a2 as f64 / 2.0
    }
}

/// Scalar collar field: angular values on the collar nodes per exponent key.
pub type Field = BTreeMap<Key, Vec<f64>>;
/// Vector collar field in `(r, θ, φ)` components.
pub type VField = [Field; 3];

pub fn vzero() -> VField {
    [Field::new(), Field::new(), Field::new()]
}

fn acc(f: &mut Field, key: Key, c: f64, v: &[f64]) {
    if c == 0.0 {
        return;
    }
    let e = f.entry(key).or_insert_with(|| vec![0.0; v.len()]);
    for (a, b) in e.iter_mut().zip(v) {
        *a += c * b;
    }
}

fn acc_mul(f: &mut Field, key: Key, c: f64, v: &[f64], w: &[f64]) {
    if c == 0.0 {
        return;
    }
    let e = f.entry(key).or_insert_with(|| vec![0.0; v.len()]);
    for ((a, b), x) in e.iter_mut().zip(v).zip(w) {
        *a += c * b * x;
    }
}

/// `out += c·w·f` with `b += rshift`, `a2 += sshift`.
fn put(out: &mut Field, c: f64, f: &Field, w: Option<&[f64]>, rshift: i32, sshift: i32) {
    for (key, v) in f {
        let k2 = Key { a2: key.a2 + sshift, b: key.b + rshift, ..*key };
        match w {
            None => acc(out, k2, c, v),
            Some(w) => acc_mul(out, k2, c, v, w),
        }
    }
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

pub fn field_sup(f: &Field) -> f64 {
    f.values().fold(0.0, |a, v| a.max(sup(v)))
}

fn vfield_sup(f: &VField) -> f64 {
    f.iter().map(field_sup).fold(0.0, f64::max)
}

fn level(f: &Field, b: i32) -> Field {
    f.iter().filter(|(k, _)| k.b == b).map(|(k, v)| (*k, v.clone())).collect()
}

/// Collar grid with the geometric factors needed by the operators.
#[derive(Debug, Clone)]
pub struct Collar {
    pub grid: ChebGrid,
    pub mu: f64,
    pub m: f64,
    pub g: Vec<f64>,
    pub dg: Vec<f64>,
    ddg: Vec<f64>,
    cot: Vec<f64>,
    inv_sin: Vec<f64>,
    inv_sin2: Vec<f64>,
    cos_over_sin2: Vec<f64>,
    /// `r·Δν`.
    lap_nu: Vec<f64>,
}

impl Collar {
    pub fn new(cone: &ConeSpec, m: usize, mu: f64, degree: usize) -> Self {
        let grid = ChebGrid::new(cone.collar_start(), cone.half_angle, degree);
        let map = |f: &dyn Fn(f64) -> f64| grid.nodes.iter().map(|&t| f(t)).collect::<Vec<_>>();
        let t0 = cone.half_angle;
        Collar {
            mu,
            m: m as f64,
            g: map(&|t| (t0 - t).sin()),
            dg: map(&|t| -(t0 - t).cos()),
            ddg: map(&|t| -(t0 - t).sin()),
            cot: map(&|t| t.cos() / t.sin()),
            inv_sin: map(&|t| 1.0 / t.sin()),
            inv_sin2: map(&|t| 1.0 / (t.sin() * t.sin())),
            cos_over_sin2: map(&|t| t.cos() / (t.sin() * t.sin())),
            lap_nu: map(&|t| -t0.cos() / t.sin()),
            grid,
        }
    }

    pub fn len(&self) -> usize {
        self.grid.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.nodes.is_empty()
    }

    fn theta_deriv(&self, v: &[f64]) -> Vec<f64> {
        self.grid.diff(v)
    }

    /// Exact `∂_r`, with `∂_r t = g√s`.
    pub fn dr(&self, f: &Field) -> Field {
        let mut out = Field::new();
        for (key, v) in f {
            let beta = self.mu - key.b as f64;
            acc(&mut out, Key { b: key.b + 1, ..*key }, beta, v);
            if key.k > 0 {
                acc(&mut out, Key { b: key.b + 1, k: key.k - 1, ..*key }, key.k as f64, v);
            }
            if key.i > 0 {
                acc_mul(&mut out, Key { a2: key.a2 + 1, i: key.i - 1, ..*key }, key.i as f64, v, &self.g);
            }
        }
        out
    }

    /// `∂_θ`, with `∂_θ t = r√s g'`.
    pub fn dth(&self, f: &Field) -> Field {
        let mut out = Field::new();
        for (key, v) in f {
            acc(&mut out, *key, 1.0, &self.theta_deriv(v));
            if key.i > 0 {
                let k2 = Key { a2: key.a2 + 1, b: key.b - 1, i: key.i - 1, ..*key };
                acc_mul(&mut out, k2, key.i as f64, v, &self.dg);
            }
        }
        out
    }

    /// Scalar Laplacian of a field with azimuthal factor `cos mφ` or `sin mφ`.
    pub fn lap(&self, f: &Field) -> Field {
        let fr = self.dr(f);
        let frr = self.dr(&fr);
        let ft = self.dth(f);
        let ftt = self.dth(&ft);
        let mut out = frr;
        put(&mut out, 2.0, &fr, None, 1, 0);
        put(&mut out, 1.0, &ftt, None, 2, 0);
        put(&mut out, 1.0, &ft, Some(&self.cot), 2, 0);
        put(&mut out, -self.m * self.m, f, Some(&self.inv_sin2), 2, 0);
        out
    }

    pub fn vlap(&self, h: &VField) -> VField {
        let m = self.m;
        let mut r = self.lap(&h[0]);
        put(&mut r, -2.0, &h[0], None, 2, 0);
        put(&mut r, -2.0, &self.dth(&h[1]), None, 2, 0);
        put(&mut r, -2.0, &h[1], Some(&self.cot), 2, 0);
        put(&mut r, -2.0 * m, &h[2], Some(&self.inv_sin), 2, 0);
        let mut t = self.lap(&h[1]);
        put(&mut t, -1.0, &h[1], Some(&self.inv_sin2), 2, 0);
        put(&mut t, 2.0, &self.dth(&h[0]), None, 2, 0);
        put(&mut t, -2.0 * m, &h[2], Some(&self.cos_over_sin2), 2, 0);
        let mut p = self.lap(&h[2]);
        put(&mut p, -1.0, &h[2], Some(&self.inv_sin2), 2, 0);
        put(&mut p, -2.0 * m, &h[0], Some(&self.inv_sin), 2, 0);
        put(&mut p, -2.0 * m, &h[1], Some(&self.cos_over_sin2), 2, 0);
        [r, t, p]
    }

    pub fn div(&self, h: &VField) -> Field {
        let mut out = self.dr(&h[0]);
        put(&mut out, 2.0, &h[0], None, 1, 0);
        put(&mut out, 1.0, &self.dth(&h[1]), None, 1, 0);
        put(&mut out, 1.0, &h[1], Some(&self.cot), 1, 0);
        put(&mut out, self.m, &h[2], Some(&self.inv_sin), 1, 0);
        out
    }

    pub fn grad(&self, q: &Field) -> VField {
        let mut t = Field::new();
        put(&mut t, 1.0, &self.dth(q), None, 1, 0);
        let mut p = Field::new();
        put(&mut p, -self.m, q, Some(&self.inv_sin), 1, 0);
        [self.dr(q), t, p]
    }

    /// `(∇ν·∇)h` with `∇ν = g e_r + g' e_θ`.
    fn dirder(&self, h: &VField) -> VField {
        let mut out = vzero();
        for c in 0..3 {
            put(&mut out[c], 1.0, &self.dr(&h[c]), Some(&self.g), 0, 0);
            put(&mut out[c], 1.0, &self.dth(&h[c]), Some(&self.dg), 1, 0);
        }
        put(&mut out[0], -1.0, &h[1], Some(&self.dg), 1, 0);
        put(&mut out[1], 1.0, &h[0], Some(&self.dg), 1, 0);
        out
    }

    pub fn op_m(&self, h: &VField) -> VField {
        let l = self.vlap(h);
        let dd = self.dirder(h);
        let mut out = vzero();
        for c in 0..3 {
            put(&mut out[c], -1.0, &l[c], None, 0, 0);
            put(&mut out[c], 2.0, &dd[c], None, 0, 1);
            put(&mut out[c], 1.0, &h[c], Some(&self.lap_nu), 1, 1);
        }
        out
    }

    pub fn op_g(&self, q: &Field) -> VField {
        let mut out = self.grad(q);
        put(&mut out[0], -1.0, q, Some(&self.g), 0, 1);
        put(&mut out[1], -1.0, q, Some(&self.dg), 0, 1);
        out
    }

    pub fn op_d(&self, h: &VField) -> Field {
        let mut out = self.div(h);
        put(&mut out, -1.0, &h[0], Some(&self.g), 0, 1);
        put(&mut out, -1.0, &h[1], Some(&self.dg), 0, 1);
        out
    }

    /// `(v·∇ν, v − (v·∇ν)∇ν)` nodewise.
    fn split(&self, fr: &[f64], ft: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = fr.len();
        let mut vn = vec![0.0; n];
        let mut tr = vec![0.0; n];
        let mut tt = vec![0.0; n];
        for j in 0..n {
            vn[j] = self.g[j] * fr[j] + self.dg[j] * ft[j];
            tr[j] = fr[j] - vn[j] * self.g[j];
            tt[j] = ft[j] - vn[j] * self.dg[j];
        }
        (vn, tr, tt)
    }

    /// Ring terms: coefficients of `χ'(g)` and `χ''(g)` in the momentum residual
    /// and of `χ'(g)` in the divergence residual, for layer parts `(h, q)`.
    pub fn ring(&self, h: &VField, q: &Field) -> (VField, VField, Field) {
        let w1: Vec<f64> = (0..self.len()).map(|j| self.ddg[j] + self.cot[j] * self.dg[j]).collect();
        let dg2: Vec<f64> = self.dg.iter().map(|x| x * x).collect();
        let mut a1 = vzero();
        let mut a2 = vzero();
        for c in 0..3 {
            put(&mut a1[c], 1.0, &h[c], Some(&w1), 2, 0);
            put(&mut a1[c], 2.0, &self.dth(&h[c]), Some(&self.dg), 2, 0);
            put(&mut a1[c], -2.0, &h[c], Some(&dg2), 1, 1);
            put(&mut a2[c], 1.0, &h[c], Some(&dg2), 2, 0);
        }
        put(&mut a1[0], -2.0, &h[1], Some(&self.dg), 2, 0);
        put(&mut a1[1], 2.0, &h[0], Some(&self.dg), 2, 0);
        put(&mut a1[1], -1.0, q, Some(&self.dg), 1, 0);
        let mut b1 = Field::new();
        put(&mut b1, -1.0, &h[1], Some(&self.dg), 1, 0);
        (a1, a2, b1)
    }
}

/// Boundary-layer corrector for collar data `f` (momentum) and `g` (divergence).
#[derive(Debug, Clone)]
pub struct LayerCorrection {
    pub w: VField,
    pub q: Field,
}

/// `w = s⁻¹P₂(t)f_τ + s^{−1/2}P₁(t) g∇ν`, `q = s^{−1/2}P₁(t) f_ν + P₃(t) g`,
/// applied atom by atom with the polynomials of degree `i`.
/// With `E = e^{−ν√s}` the leading parts of `M(w)+G(q)` and `D(w)` reproduce `f` and `g`.
pub fn layer_corrector(collar: &Collar, f: &VField, g: &Field) -> Result<LayerCorrection> {
    let mut levels = BTreeSet::new();
    f.iter().chain(std::iter::once(g)).for_each(|fl| fl.keys().for_each(|k| {
        levels.insert(k.b);
    }));
    if levels.len() > 1 {
        return Err(Error::contract("layer data must be homogeneous (a single r-exponent)"));
    }
    let n = collar.len();
    let zero = vec![0.0; n];
    let mut keys = BTreeSet::new();
    f.iter().for_each(|fl| keys.extend(fl.keys().copied()));
    let mut w = vzero();
    let mut q = Field::new();
    for key in keys {
        let fr = f[0].get(&key).unwrap_or(&zero);
        let ft = f[1].get(&key).unwrap_or(&zero);
        let fp = f[2].get(&key).unwrap_or(&zero);
        let (vn, tr, tt) = collar.split(fr, ft);
        let polys = boundary_polynomials(key.i as usize)?;
        for (j, c) in polys.p2.to_f64().into_iter().enumerate() {
            let k2 = Key { a2: key.a2 - 2, i: j as u32, ..key };
            acc(&mut w[0], k2, c, &tr);
            acc(&mut w[1], k2, c, &tt);
            acc(&mut w[2], k2, c, fp);
        }
        for (j, c) in polys.p1.to_f64().into_iter().enumerate() {
            acc(&mut q, Key { a2: key.a2 - 1, i: j as u32, ..key }, c, &vn);
        }
    }
    for (key, gv) in g {
        let polys = boundary_polynomials(key.i as usize)?;
        for (j, c) in polys.p1.to_f64().into_iter().enumerate() {
            let k2 = Key { a2: key.a2 - 1, i: j as u32, ..*key };
            acc_mul(&mut w[0], k2, c, gv, &collar.g);
            acc_mul(&mut w[1], k2, c, gv, &collar.dg);
        }
        for (j, c) in polys.p3.to_f64().into_iter().enumerate() {
            acc(&mut q, Key { i: j as u32, ..*key }, c, gv);
        }
    }
    Ok(LayerCorrection { w, q })
}

/// Remainders `f − (M(w)+G(q))` and `g − D(w)` of a layer correction.
pub fn corrector_remainders(collar: &Collar, f: &VField, g: &Field, c: &LayerCorrection) -> (VField, Field) {
    let mw = collar.op_m(&c.w);
    let gq = collar.op_g(&c.q);
    let mut r1 = f.clone();
    for k in 0..3 {
        put(&mut r1[k], -1.0, &mw[k], None, 0, 0);
        put(&mut r1[k], -1.0, &gq[k], None, 0, 0);
    }
    let mut r2 = g.clone();
    put(&mut r2, -1.0, &collar.op_d(&c.w), None, 0, 0);
    (r1, r2)
}

/// Resonance met by a Neumann lift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonanceRecord {
    pub lambda: f64,
    pub m: usize,
    pub eigenvalue: f64,
    /// Whether the solvability condition forced a higher log power.
    pub log_raised: bool,
}

/// Solution of one angular Neumann chain.
#[derive(Debug, Clone)]
pub struct LiftResult {
    /// `(k, ψ_k)` for the terms `r^λ (log r)^k ψ_k(θ)`.
    pub terms: Vec<(u32, PoleRegular)>,
    pub resonance: Option<ResonanceRecord>,
    /// Max collocation residual relative to the data.
    pub residual: f64,
}

/// Harmonic `p' = Σ_k r^λ (log r)^k ψ_k(θ) cos mφ` with `(−δ − λ(λ+1))` acting on
/// the chain equal to `rhs_k` and `∂_θψ_k(θ0) = flux_k`.
///
/// `rhs` values are given as `Q`-factors (`ψ = sin^mθ Q(cos θ)`) on the profile grid.
pub fn neumann_lift(
    cone: &ConeSpec,
    m: usize,
    lam: f64,
    flux: &BTreeMap<u32, f64>,
    rhs: &BTreeMap<u32, Vec<f64>>,
) -> Result<LiftResult> {
    let theta0 = cone.half_angle;
    let x0 = theta0.cos();
    let grid = ChebGrid::new(x0, 1.0, PROFILE_DEGREE);
    let n = grid.n + 1;
    let big = lam * (lam + 1.0);
    let (a, bc) = beltrami_collocation(m, &grid);
    let mut sys = a.clone();
    for i in 0..n {
        sys[(i, i)] += big;
    }
    for j in 0..n {
        sys[(0, j)] = bc[j];
    }
    let row_factor = neumann_row_factor(m, x0);
    let kmax = flux.keys().chain(rhs.keys()).copied().max().unwrap_or(0);
    let zero = vec![0.0; n];

    // resonance against order-m eigenvalues
    let mu_max = lam.max(-1.0 - lam) + 1.0;
    let (roots, _) = roots_for_m(theta0, m, mu_max.max(0.5), SCAN_STEP)?;
    let res_mu = roots.into_iter().find(|mu| (mu * (mu + 1.0) - big).abs() < RESONANCE_TOL);

    // ∫ Q_a Q_b (1−x²)^m dx as a row acting on nodal values
    let ortho = |p: &[f64]| -> Vec<f64> {
        let (xs, ws) = gl(x0, 1.0, 64);
        let mut row = vec![0.0; n];
        for (&x, &w) in xs.iter().zip(&ws) {
            let ir = grid.interp_row(x);
            let pv: f64 = ir.iter().zip(p).map(|(a, b)| a * b).sum();
            let wt = w * (1.0 - x * x).powi(m as i32) * pv;
            for j in 0..n {
                row[j] += wt * ir[j];
            }
        }
        row
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let data_scale = flux.values().fold(0.0f64, |a, v| a.max(v.abs())).max(rhs.values().fold(0.0, |a, v| a.max(sup(v))));
    let mut residual: f64 = 0.0;
    let mut qs: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let rhs_vec = |k: u32, q1: &[f64], q2: &[f64]| -> DVector<f64> {
        let r = rhs.get(&k).map(|v| v.as_slice()).unwrap_or(&zero);
        let kf = k as f64;
        let mut h = DVector::zeros(n);
        for i in 0..n {
            h[i] = -r[i] - (2.0 * lam + 1.0) * (kf + 1.0) * q1[i] - (kf + 2.0) * (kf + 1.0) * q2[i];
        }
        h[0] = flux.get(&k).copied().unwrap_or(0.0) / row_factor;
        h
    };
    let mut record = None;
    match res_mu {
        None => {
            let lu = sys.clone().lu();
            for k in (0..=kmax).rev() {
                let q1 = qs.get(&(k + 1)).cloned().unwrap_or_else(|| zero.clone());
                let q2 = qs.get(&(k + 2)).cloned().unwrap_or_else(|| zero.clone());
                let h = rhs_vec(k, &q1, &q2);
                let sol = lu.solve(&h).ok_or_else(|| Error::numeric("singular angular Neumann system"))?;
                residual = residual.max((&sys * &sol - &h).amax());
                qs.insert(k, sol.as_slice().to_vec());
            }
        }
        Some(mu_r) => {
            let p = build_profile(mu_r, m, Parity::Cos, theta0)?.shape;
            let pn2 = p.inner(&p);
            let p_at = p.q[0] * (1.0 - x0 * x0).powf(m as f64 / 2.0);
            let orow = ortho(&p.q);
            let sin0 = theta0.sin();
            // α_{k+1} from solvability at level k; φ_k ⟂ P from the bordered system
            let mut alpha: BTreeMap<u32, f64> = BTreeMap::new();
            let mut phis: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
            let mut aug = DMatrix::zeros(n + 1, n);
            aug.view_mut((0, 0), (n, n)).copy_from(&sys);
            for j in 0..n {
                aug[(n, j)] = orow[j];
            }
            let svd = aug.clone().svd(true, true);
            for k in (0..=kmax).rev() {
                let kf = k as f64;
                let ck = flux.get(&k).copied().unwrap_or(0.0);
                let rk = rhs.get(&k).map(|v| dot(&orow, v)).unwrap_or(0.0);
                let a2 = alpha.get(&(k + 2)).copied().unwrap_or(0.0);
                let a1 = -(sin0 * p_at * ck + rk + (kf + 2.0) * (kf + 1.0) * a2 * pn2)
                    / ((2.0 * lam + 1.0) * (kf + 1.0) * pn2);
                alpha.insert(k + 1, a1);
                let full = |j: u32| -> Vec<f64> {
                    let a = alpha.get(&j).copied().unwrap_or(0.0);
                    let ph = phis.get(&j).cloned().unwrap_or_else(|| zero.clone());
                    (0..n).map(|i| a * p.q[i] + ph[i]).collect()
                };
                let (q1, q2) = (full(k + 1), full(k + 2));
                let h = rhs_vec(k, &q1, &q2);
                let mut ha = DVector::zeros(n + 1);
                ha.rows_mut(0, n).copy_from(&h);
                let sol = svd.solve(&ha, 1e-12).map_err(|e| Error::numeric(e.to_string()))?;
                let res = (&aug * &sol - &ha).amax();
                if res > 1e-6 * data_scale.max(1.0) {
                    return Err(Error::numeric(format!(
                        "unresolved resonance at λ = {lam}: bordered system defect {res:.3e}"
                    )));
                }
                residual = residual.max(res);
                phis.insert(k, sol.as_slice().to_vec());
            }
            for k in 0..=kmax + 1 {
                let a = if k == 0 { 0.0 } else { alpha.get(&k).copied().unwrap_or(0.0) };
                let ph = phis.get(&k).cloned().unwrap_or_else(|| zero.clone());
                qs.insert(k, (0..n).map(|i| a * p.q[i] + ph[i]).collect());
            }
            let raised = alpha.get(&(kmax + 1)).is_some_and(|a| a.abs() > 1e-12 * data_scale.max(1e-300));
            record = Some(ResonanceRecord { lambda: lam, m, eigenvalue: mu_r, log_raised: raised });
        }
    }
    let terms = qs
        .into_iter()
        .filter(|(_, q)| sup(q) > 1e-14 * data_scale.max(1e-300))
        .map(|(k, q)| (k, PoleRegular::new(m, x0, q)))
        .collect();
    Ok(LiftResult { terms, resonance: record, residual: residual / data_scale.max(1e-300) })
}

/// Harmonic pressure atom `s^{a2/2} r^{μ−b} (log r)^k ψ(θ) cos mφ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteriorAtom {
    pub key: Key,
    pub psi: PoleRegular,
}

/// Collar atom with one (scalar) or three (vector) component value lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollarAtom {
    pub key: Key,
    pub values: Vec<Vec<f64>>,
}

fn to_atoms_v(f: &VField, n: usize) -> Vec<CollarAtom> {
    let mut keys = BTreeSet::new();
    f.iter().for_each(|c| keys.extend(c.keys().copied()));
    let zero = vec![0.0; n];
    keys.into_iter()
        .map(|key| CollarAtom { key, values: (0..3).map(|c| f[c].get(&key).unwrap_or(&zero).clone()).collect() })
        .collect()
}

fn to_atoms_s(f: &Field) -> Vec<CollarAtom> {
    f.iter().map(|(k, v)| CollarAtom { key: *k, values: vec![v.clone()] }).collect()
}

fn from_atoms_v(a: &[CollarAtom]) -> VField {
    let mut f = vzero();
    for at in a {
        for c in 0..3 {
            f[c].insert(at.key, at.values[c].clone());
        }
    }
    f
}

fn from_atoms_s(a: &[CollarAtom]) -> Field {
    a.iter().map(|at| (at.key, at.values[0].clone())).collect()
}

/// Flattened atom description in the ledger format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularAtom {
    /// `velocity`, `pressure`, `momentum_residual`, …
    pub role: String,
    pub s_power: f64,
    pub r_power: f64,
    pub log_power: u32,
    pub nu_power: Option<u32>,
    pub has_exp_decay: bool,
    pub chi_wrapped: bool,
    /// Max modulus of the angular factor.
    pub magnitude: f64,
}

/// Singular expansion `(U_N, P_N)` for one eigenfunction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Expansion {
    pub cone: ConeSpec,
    pub mu: f64,
    pub index: i32,
    pub m: usize,
    pub parity: Parity,
    pub depth: usize,
    /// Number of Neumann eigenvalues (either branch, any order) among `μ−1, …, μ−N`.
    pub log_budget: usize,
    /// Largest log power actually present.
    pub realized_log_power: u32,
    pub collar_degree: usize,
    pub interior: Vec<InteriorAtom>,
    pub velocity_layer: Vec<CollarAtom>,
    pub pressure_layer: Vec<CollarAtom>,
    /// `f` in `(s−Δ)U+∇P = χE f + ring`.
    pub momentum_residual: Vec<CollarAtom>,
    /// `g` in `∇·U = χE g + ring`.
    pub divergence_residual: Vec<CollarAtom>,
    pub ring_d1: Vec<CollarAtom>,
    pub ring_d2: Vec<CollarAtom>,
    pub ring_div: Vec<CollarAtom>,
    /// Largest relative leading residual left after each cancellation.
    pub cancellation_defect: f64,
    pub lift_residual: f64,
    pub resonances: Vec<ResonanceRecord>,
}

struct Build<'a> {
    collar: &'a Collar,
    pint: Vec<InteriorAtom>,
    w: VField,
    q: Field,
    rm: VField,
    rd: Field,
}

impl Build<'_> {
    fn prune(&mut self, floor: f64) {
        let keep = |_: &Key, v: &mut Vec<f64>| sup(v) > floor;
        for c in 0..3 {
            self.rm[c].retain(keep);
            self.w[c].retain(keep);
        }
        self.rd.retain(keep);
        self.q.retain(keep);
    }

    fn add_layer(&mut self, dw: &VField, dq: &Field) {
        let c = self.collar;
        let mw = c.op_m(dw);
        let gq = c.op_g(dq);
        for k in 0..3 {
            put(&mut self.rm[k], -1.0, &mw[k], None, 0, 0);
            put(&mut self.rm[k], -1.0, &gq[k], None, 0, 0);
            put(&mut self.w[k], 1.0, &dw[k], None, 0, 0);
        }
        put(&mut self.rd, -1.0, &c.op_d(dw), None, 0, 0);
        put(&mut self.q, 1.0, dq, None, 0, 0);
    }

    /// Adds harmonic atoms and the tangential layer `s⁻¹E(−∇p)_τ`.
    fn add_interior(&mut self, atoms: Vec<InteriorAtom>) {
        let c = self.collar;
        let mut dw = vzero();
        for at in &atoms {
            let pv: Vec<ProfileValues> = c.grid.nodes.iter().map(|&t| at.psi.eval(t)).collect();
            let v: Vec<f64> = pv.iter().map(|p| p.v).collect();
            let d1: Vec<f64> = pv.iter().map(|p| p.d1).collect();
            let os: Vec<f64> = pv.iter().map(|p| p.over_sin).collect();
            let beta = c.mu - at.key.b as f64;
            let key = Key { a2: at.key.a2 - 2, b: at.key.b + 1, k: at.key.k, i: 0 };
            let neg = |x: &[f64], s: f64| x.iter().map(|a| s * a).collect::<Vec<_>>();
            let (vr, vt) = (neg(&v, -beta), neg(&d1, -1.0));
            let (_, tr, tt) = c.split(&vr, &vt);
            acc(&mut dw[0], key, 1.0, &tr);
            acc(&mut dw[1], key, 1.0, &tt);
            acc(&mut dw[2], key, c.m, &os);
            if at.key.k > 0 {
                let kl = Key { k: at.key.k - 1, ..key };
                let vr2 = neg(&v, -(at.key.k as f64));
                let (_, tr2, tt2) = c.split(&vr2, &vec![0.0; v.len()]);
                acc(&mut dw[0], kl, 1.0, &tr2);
                acc(&mut dw[1], kl, 1.0, &tt2);
            }
        }
        self.add_layer(&dw, &Field::new());
        self.pint.extend(atoms);
    }
}

/// Depth-0 pair `p₀ = r^μ φ`, `u₀ = s⁻¹v⁽⁰⁾ − χ s⁻¹e^{−ν√s} v_τ⁽⁰⁾`.
pub fn build_p0_u0(cone: &ConeSpec, mu: f64, index: i32, profile: &AngularProfile) -> Result<Expansion> {
    build_un_pn(cone, mu, index, profile, 0)
}

/// Recursive expansion of depth `N`: every residual atom sits at level `b ≥ N+2`.
pub fn build_un_pn(cone: &ConeSpec, mu: f64, index: i32, profile: &AngularProfile, depth: usize) -> Result<Expansion> {
    if depth > MAX_DEPTH {
        return Err(Error::domain(format!("depth {depth} exceeds {MAX_DEPTH}")));
    }
    let m = profile.m;
    let collar = Collar::new(cone, m, mu, COLLAR_DEGREE);
    let n = collar.len();
    let mut st = Build { collar: &collar, pint: vec![], w: vzero(), q: Field::new(), rm: vzero(), rd: Field::new() };
    let p0 = InteriorAtom { key: Key::new(0, 0, 0, 0), psi: profile.shape.clone() };
    let mut defect: f64 = 0.0;
    let mut lift_res: f64 = 0.0;
    let mut resonances = Vec::new();
    let degenerate = mu.abs() < 1e-12;
    if degenerate {
        st.pint.push(p0);
    } else {
        st.add_interior(vec![p0]);
        let floor = DROP_REL * vfield_sup(&st.w);
        st.prune(floor);
        for step in 0..depth {
            let lvl = step as i32 + 2;
            let f: VField = [0, 1, 2].map(|c| level(&st.rm[c], lvl));
            let g = level(&st.rd, lvl);
            let scale = vfield_sup(&f).max(field_sup(&g));
            let corr = layer_corrector(&collar, &f, &g)?;
            st.add_layer(&corr.w, &corr.q);
            // normal boundary values of the corrector fix the Neumann data of the lift
            let last = n - 1;
            let mut data: BTreeMap<i32, BTreeMap<u32, f64>> = BTreeMap::new();
            let mut keys = BTreeSet::new();
            corr.w.iter().for_each(|c| keys.extend(c.keys().copied().filter(|k| k.i == 0)));
            for key in keys {
                let wr = corr.w[0].get(&key).map_or(0.0, |v| v[last]);
                let wt = corr.w[1].get(&key).map_or(0.0, |v| v[last]);
                let wn = collar.g[last] * wr + collar.dg[last] * wt;
                *data.entry(key.a2 + 2).or_default().entry(key.k).or_insert(0.0) += wn;
            }
            let lam = mu - (lvl - 1) as f64;
            let mut new_atoms = Vec::new();
            for (a2, flux) in data {
                let lift = neumann_lift(cone, m, lam, &flux, &BTreeMap::new())?;
                lift_res = lift_res.max(lift.residual);
                if let Some(r) = lift.resonance {
                    resonances.push(r);
                }
                for (k, psi) in lift.terms {
                    new_atoms.push(InteriorAtom { key: Key::new(a2, lvl - 1, k, 0), psi });
                }
            }
            st.add_interior(new_atoms);
            // the leading level is now cancelled up to rounding
            let mut rem: f64 = 0.0;
            for c in 0..3 {
                rem = rem.max(field_sup(&level(&st.rm[c], lvl)));
                st.rm[c].retain(|k, _| k.b > lvl);
            }
            rem = rem.max(field_sup(&level(&st.rd, lvl)));
            st.rd.retain(|k, _| k.b > lvl);
            st.prune(floor);
            if scale > 0.0 {
                defect = defect.max(rem / scale);
            }
        }
    }
    if defect > CANCEL_TOL {
        return Err(Error::numeric(format!("leading residual not cancelled (relative {defect:.3e})")));
    }
    let (a1, a2, b1) = collar.ring(&st.w, &st.q);
    let realized = st
        .pint
        .iter()
        .map(|a| a.key.k)
        .chain(st.w.iter().flat_map(|c| c.keys().map(|k| k.k)))
        .max()
        .unwrap_or(0);
    let log_budget = if depth == 0 {
        0
    } else {
        let vals: Vec<f64> = (1..=depth).map(|j| mu - j as f64).collect();
        let mu_max = vals.iter().fold(0.0f64, |a, v| a.max(v.abs())) + 1.0;
        let spec = neumann_spectrum(cone, mu_max, mu_max.ceil() as usize + 2)?;
        spec.count_in(&vals, 1e-6)
    };
    Ok(Expansion {
        cone: *cone,
        mu,
        index,
        m,
        parity: profile.parity,
        depth,
        log_budget,
        realized_log_power: realized,
        collar_degree: COLLAR_DEGREE,
        interior: st.pint,
        velocity_layer: to_atoms_v(&st.w, n),
        pressure_layer: to_atoms_s(&st.q),
        momentum_residual: to_atoms_v(&st.rm, n),
        divergence_residual: to_atoms_s(&st.rd),
        ring_d1: to_atoms_v(&a1, n),
        ring_d2: to_atoms_v(&a2, n),
        ring_div: to_atoms_s(&b1),
        cancellation_defect: defect,
        lift_residual: lift_res,
        resonances,
    })
}

/// Angular data at one polar angle, reused across radii.
pub struct AngularSample {
    pub theta: f64,
    g: f64,
    in_collar: bool,
    chi: f64,
    dchi: f64,
    ddchi: f64,
    row: Vec<f64>,
    interior: Vec<ProfileValues>,
}

/// Pattern coefficients: vector `(r, θ, φ)` with factors `(cos, cos, sin)·mφ`, scalars with `cos mφ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatternValue {
    pub vector: [C64; 3],
    pub scalar: C64,
}

/// Symbolic residual split into the structured collar part and the ring part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymbolicResidual {
    pub structured: PatternValue,
    pub ring: PatternValue,
}

impl SymbolicResidual {
    pub fn total(&self) -> PatternValue {
        let v = [0, 1, 2].map(|c| self.structured.vector[c] + self.ring.vector[c]);
        PatternValue { vector: v, scalar: self.structured.scalar + self.ring.scalar }
    }
}

impl Expansion {
    /// Rebuilds profile caches after deserialisation.
    pub fn prepare(&mut self) {
        for a in &mut self.interior {
            a.psi.prepare();
        }
    }

    pub fn collar_grid(&self) -> ChebGrid {
        ChebGrid::new(self.cone.collar_start(), self.cone.half_angle, self.collar_degree)
    }

    /// Multiplies every coefficient by `c`.
    pub fn scaled(&self, c: f64) -> Expansion {
        let mut e = self.clone();
        for a in &mut e.interior {
            a.psi = a.psi.scaled(c);
        }
        for list in [
            &mut e.velocity_layer,
            &mut e.pressure_layer,
            &mut e.momentum_residual,
            &mut e.divergence_residual,
            &mut e.ring_d1,
            &mut e.ring_d2,
            &mut e.ring_div,
        ] {
            for a in list.iter_mut() {
                for v in &mut a.values {
                    v.iter_mut().for_each(|x| *x *= c);
                }
            }
        }
        e
    }

    pub fn sample(&self, theta: f64) -> AngularSample {
        let g = (self.cone.half_angle - theta).sin();
        let in_collar = g < self.cone.layer_width;
        let row = if in_collar { self.collar_grid().interp_row(theta) } else { vec![] };
        AngularSample {
            theta,
            g,
            in_collar,
            chi: self.cone.chi(g),
            dchi: self.cone.dchi(g),
            ddchi: self.cone.ddchi(g),
            row,
            interior: self.interior.iter().map(|a| a.psi.eval(theta)).collect(),
        }
    }

    fn prefactor(&self, key: &Key, r: f64, sq: C64, t: C64) -> C64 {
        let l = r.ln();
        sq.powi(key.a2) * r.powf(self.mu - key.b as f64) * l.powi(key.k as i32) * t.powi(key.i as i32)
    }

    fn collar_sum(&self, atoms: &[CollarAtom], comp: usize, a: &AngularSample, r: f64, sq: C64) -> C64 {
        let t = sq * (r * a.g);
        atoms
            .iter()
            .map(|at| {
                let v: f64 = a.row.iter().zip(&at.values[comp]).map(|(x, y)| x * y).sum();
                self.prefactor(&at.key, r, sq, t) * v
            })
            .sum()
    }

    /// Velocity and pressure pattern coefficients at `(r, θ)`.
    pub fn eval_pattern(&self, a: &AngularSample, r: f64, s: C64) -> PatternValue {
        let sq = s.sqrt();
        let l = r.ln();
        let mf = self.m as f64;
        let mut u = [C64::new(0.0, 0.0); 3];
        let mut p = C64::new(0.0, 0.0);
        for (at, pv) in self.interior.iter().zip(&a.interior) {
            let beta = self.mu - at.key.b as f64;
            let k = at.key.k as i32;
            let lk = l.powi(k);
            let lk1 = if k > 0 { k as f64 * l.powi(k - 1) } else { 0.0 };
            let pre = sq.powi(at.key.a2) * r.powf(beta - 1.0);
            p += pre * r * lk * pv.v;
            let gr = pre * (beta * lk + lk1) * pv.v;
            let gt = pre * lk * pv.d1;
            let gp = -pre * lk * mf * pv.over_sin;
            u[0] -= gr / s;
            u[1] -= gt / s;
            u[2] -= gp / s;
        }
        if a.in_collar && a.chi != 0.0 {
            let e = (-sq * (r * a.g)).exp() * a.chi;
            for (c, uc) in u.iter_mut().enumerate() {
                *uc -= e * self.collar_sum(&self.velocity_layer, c, a, r, sq);
            }
            p -= e * self.collar_sum(&self.pressure_layer, 0, a, r, sq);
        }
        PatternValue { vector: u, scalar: p }
    }

    /// Pattern angle: sine-parity profiles are cosine profiles rotated by `π/(2m)`.
    fn pattern_phi(&self, phi: f64) -> f64 {
        match self.parity {
            Parity::Sin if self.m > 0 => phi - PI / (2.0 * self.m as f64),
            _ => phi,
        }
    }

    fn to_cartesian(&self, v: &PatternValue, theta: f64, phi: f64) -> ([C64; 3], C64) {
        let pp = self.pattern_phi(phi);
        let mf = self.m as f64;
        let (cm, sm) = ((mf * pp).cos(), (mf * pp).sin());
        let (er, et, ep) = spherical_basis(theta, phi);
        let comps = [v.vector[0] * cm, v.vector[1] * cm, v.vector[2] * sm];
        let cart = [0, 1, 2].map(|i| comps[0] * er[i] + comps[1] * et[i] + comps[2] * ep[i]);
        (cart, v.scalar * cm)
    }

    /// `(U, P)` at a point, velocity in Cartesian components.
    pub fn evaluate(&self, x: &SpatialPoint, s: C64) -> ([C64; 3], C64) {
        let a = self.sample(x.theta);
        self.to_cartesian(&self.eval_pattern(&a, x.r, s), x.theta, x.phi)
    }

    /// Symbolic residual `((s−Δ)U+∇P, ∇·U)` at `(r, θ)` as pattern coefficients.
    pub fn residual_pattern(&self, a: &AngularSample, r: f64, s: C64) -> SymbolicResidual {
        let z = C64::new(0.0, 0.0);
        let mut st = PatternValue { vector: [z; 3], scalar: z };
        let mut ring = st;
        if a.in_collar {
            let sq = s.sqrt();
            let e = (-sq * (r * a.g)).exp();
            for c in 0..3 {
                if a.chi != 0.0 {
                    st.vector[c] = e * a.chi * self.collar_sum(&self.momentum_residual, c, a, r, sq);
                }
                if a.dchi != 0.0 || a.ddchi != 0.0 {
                    ring.vector[c] = e
                        * (a.dchi * self.collar_sum(&self.ring_d1, c, a, r, sq)
                            + a.ddchi * self.collar_sum(&self.ring_d2, c, a, r, sq));
                }
            }
            if a.chi != 0.0 {
                st.scalar = e * a.chi * self.collar_sum(&self.divergence_residual, 0, a, r, sq);
            }
            if a.dchi != 0.0 {
                ring.scalar = e * a.dchi * self.collar_sum(&self.ring_div, 0, a, r, sq);
            }
        }
        SymbolicResidual { structured: st, ring }
    }

    /// Symbolic residual at a point, Cartesian momentum components.
    pub fn residual_symbolic(&self, x: &SpatialPoint, s: C64) -> ([C64; 3], C64) {
        let a = self.sample(x.theta);
        self.to_cartesian(&self.residual_pattern(&a, x.r, s).total(), x.theta, x.phi)
    }

    /// Residual by fourth-order centred differences in Cartesian coordinates.
    ///
    /// Stencils reaching outside the cone use the analytic continuation of the
    /// atoms and are reported as flagged.
    pub fn residual_fd(&self, x: &SpatialPoint, s: C64, h: f64) -> FdResidual {
        let xc = x.cartesian();
        let at = |d: [f64; 3]| {
            let y = SpatialPoint::from_cartesian([xc[0] + d[0], xc[1] + d[1], xc[2] + d[2]]);
            let flag = y.theta > self.cone.half_angle;
            (self.evaluate(&y, s), flag)
        };
        let ((u0, _), _) = at([0.0; 3]);
        let mut lap = [C64::new(0.0, 0.0); 3];
        let mut gp = [C64::new(0.0, 0.0); 3];
        let mut div = C64::new(0.0, 0.0);
        let mut flagged = false;
        for ax in 0..3 {
            let mut f = Vec::new();
            for &o in &[2.0, 1.0, -1.0, -2.0] {
                let mut d = [0.0; 3];
                d[ax] = o * h;
                let (v, fl) = at(d);
                flagged |= fl;
                f.push(v);
            }
            for c in 0..3 {
                lap[c] += (-f[0].0[c] + 16.0 * f[1].0[c] - 30.0 * u0[c] + 16.0 * f[2].0[c] - f[3].0[c]) / (12.0 * h * h);
            }
            gp[ax] = (-f[0].1 + 8.0 * f[1].1 - 8.0 * f[2].1 + f[3].1) / (12.0 * h);
            div += (-f[0].0[ax] + 8.0 * f[1].0[ax] - 8.0 * f[2].0[ax] + f[3].0[ax]) / (12.0 * h);
        }
        let momentum = [0, 1, 2].map(|c| s * u0[c] - lap[c] + gp[c]);
        FdResidual { momentum, divergence: div, flagged }
    }

    /// Pointwise envelope `max_{θ,φ} |(s−Δ)U+∇P| + |s|^{1/2}|∇·U|` at radius `r`,
    /// for the structured part and for the full residual.
    pub fn residual_envelope(&self, s: C64, r: f64, n_theta: usize) -> (f64, f64) {
        let dc = self.cone.layer_width;
        let mut best = (0.0f64, 0.0f64);
        for j in 0..=n_theta {
            // denser near the boundary, where the layer lives
            let g = dc * (j as f64 / n_theta as f64).powi(2);
            let th = self.cone.half_angle - g.asin();
            let a = self.sample(th);
            let res = self.residual_pattern(&a, r, s);
            let env = |v: &PatternValue| {
                let (a, b, c) = (v.vector[0].norm_sqr(), v.vector[1].norm_sqr(), v.vector[2].norm_sqr());
                let vm = if self.m == 0 { (a + b).sqrt() } else { (a + b).max(c).sqrt() };
                vm + s.norm().sqrt() * v.scalar.norm()
            };
            best.0 = best.0.max(env(&res.structured));
            best.1 = best.1.max(env(&res.total()));
        }
        best
    }

    /// Log–log slope of the envelope over `r ∈ [r_lo, r_hi]·|s|^{−1/2}`.
    pub fn envelope_exponent(&self, s: C64, r_lo: f64, r_hi: f64, n_r: usize, full: bool) -> f64 {
        let sc = 1.0 / s.norm().sqrt();
        let pts: Vec<(f64, f64)> = (0..n_r)
            .map(|i| {
                let r = sc * r_lo * (r_hi / r_lo).powf(i as f64 / (n_r - 1) as f64);
                let (a, b) = self.residual_envelope(s, r, 200);
                (r.ln(), if full { b } else { a }.ln())
            })
            .collect();
        fit_slope(&pts)
    }

    /// Atom listing in the ledger format.
    pub fn ledger(&self) -> Vec<SingularAtom> {
        let mut out = Vec::new();
        for a in &self.interior {
            out.push(SingularAtom {
                role: "pressure_interior".into(),
                s_power: a.key.s_power(),
                r_power: self.mu - a.key.b as f64,
                log_power: a.key.k,
                nu_power: None,
                has_exp_decay: false,
                chi_wrapped: false,
                magnitude: sup(&a.psi.q),
            });
        }
        let lists: [(&str, &Vec<CollarAtom>); 7] = [
            ("velocity_layer", &self.velocity_layer),
            ("pressure_layer", &self.pressure_layer),
            ("momentum_residual", &self.momentum_residual),
            ("divergence_residual", &self.divergence_residual),
            ("ring_momentum_d1", &self.ring_d1),
            ("ring_momentum_d2", &self.ring_d2),
            ("ring_divergence", &self.ring_div),
        ];
        for (role, list) in lists {
            for a in list {
                out.push(SingularAtom {
                    role: role.into(),
                    s_power: a.key.s_power(),
                    r_power: self.mu - a.key.b as f64,
                    log_power: a.key.k,
                    nu_power: Some(a.key.i),
                    has_exp_decay: true,
                    chi_wrapped: true,
                    magnitude: a.values.iter().map(|v| sup(v)).fold(0.0, f64::max),
                });
            }
        }
        out
    }

    /// Smallest level `b` among residual atoms.
    pub fn min_residual_level(&self) -> Option<i32> {
        self.momentum_residual.iter().chain(&self.divergence_residual).map(|a| a.key.b).min()
    }

    /// Collar fields for symbolic manipulation.
    pub fn layer_fields(&self) -> (VField, Field) {
        (from_atoms_v(&self.velocity_layer), from_atoms_s(&self.pressure_layer))
    }

    pub fn residual_fields(&self) -> (VField, Field) {
        (from_atoms_v(&self.momentum_residual), from_atoms_s(&self.divergence_residual))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdResidual {
    pub momentum: [C64; 3],
    pub divergence: C64,
    pub flagged: bool,
}

/// Least-squares slope of `(x, y)` pairs.
pub fn fit_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Norms of the `η_s`-cut residual at one `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualNormSample {
    pub s_re: f64,
    pub s_im: f64,
    /// `‖(s−Δ)(η_sU)+∇(η_sP)‖²_{V_β^0}`.
    pub force: f64,
    /// `‖∇·(η_sU)‖²_{V_β^1}`.
    pub div_v1: Option<f64>,
    /// `|s|²‖∇·(η_sU)‖²_{V_{β+1}^0}`, an upper bound for the dual term.
    pub div_dual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualNormReport {
    pub beta: f64,
    pub mu: f64,
    pub depth: usize,
    pub log_budget: usize,
    pub predicted_exponent: f64,
    pub samples: Vec<ResidualNormSample>,
    pub force_exponent: Option<f64>,
    pub div_exponent: Option<f64>,
}

impl Expansion {
    /// Pattern coefficients of `(s−Δ)(η_sU)+∇(η_sP)` and of `∇·(η_sU)`.
    fn cut_residual(&self, a: &AngularSample, r: f64, s: C64) -> PatternValue {
        let sa = s.norm();
        let x = sa * r * r;
        let (e1, e2) = (deta(x), ddeta(x));
        let er = e1 * 2.0 * sa * r;
        let err = e2 * 4.0 * sa * sa * r * r + e1 * 2.0 * sa;
        self.cut_fields(a, r, s, (eta(x), er, err + 2.0 * er / r)).1
    }

    /// For a radial cut `c` with jet `(c, c', Δc)`: the pattern of `(cU, cP)` and of
    /// `((s−Δ)(cU)+∇(cP), ∇·(cU))`. `∂_rU` is taken by fourth-order differences.
    pub fn cut_fields(&self, a: &AngularSample, r: f64, s: C64, jet: (f64, f64, f64)) -> (PatternValue, PatternValue) {
        let (c0, cr, lap_c) = jet;
        let u = self.eval_pattern(a, r, s);
        let mut out = self.residual_pattern(a, r, s).total();
        out.vector.iter_mut().for_each(|v| *v *= c0);
        out.scalar *= c0;
        if cr != 0.0 || lap_c != 0.0 {
            let h = 1e-3 * r;
            let f = |d: f64| self.eval_pattern(a, r + d, s).vector;
            let (p2, p1, m1, m2) = (f(2.0 * h), f(h), f(-h), f(-2.0 * h));
            for c in 0..3 {
                let dru = (-p2[c] + 8.0 * p1[c] - 8.0 * m1[c] + m2[c]) / (12.0 * h);
                out.vector[c] += -2.0 * cr * dru - lap_c * u.vector[c];
            }
            out.vector[0] += cr * u.scalar;
            out.scalar += cr * u.vector[0];
        }
        let cut = PatternValue { vector: u.vector.map(|v| v * c0), scalar: u.scalar * c0 };
        (cut, out)
    }

    /// Weighted norms of the `η_s`-cut residual and the fitted `|s|`-exponents.
    pub fn residual_norm_bounds(&self, s_dir: C64, beta: f64, s_abs: &[f64]) -> Result<ResidualNormReport> {
        let nf = self.depth as f64;
        if beta + self.mu >= nf + 1.0 {
            return Err(Error::domain(format!(
                "the force bound needs β+μ < N+1 (β+μ = {}, N = {})",
                beta + self.mu,
                self.depth
            )));
        }
        if s_dir.re < 0.0 || s_dir.norm() == 0.0 {
            return Err(Error::domain("s must satisfy Re s ≥ 0, s ≠ 0"));
        }
        let with_div = beta + self.mu < nf + 0.5;
        let dir = s_dir / s_dir.norm();
        let mut samples = Vec::new();
        for &sa in s_abs {
            let s = dir * sa;
            // μ = 0: (0, const) solves the system exactly and is not cut
            let (f, dv, dd) = if self.mu.abs() < 1e-12 {
                (0.0, with_div.then_some(0.0), with_div.then_some(0.0))
            } else {
                self.norm_integrals(s, beta, with_div)
            };
            samples.push(ResidualNormSample { s_re: s.re, s_im: s.im, force: f, div_v1: dv, div_dual: dd });
        }
        let fit = |sel: &dyn Fn(&ResidualNormSample) -> Option<f64>| -> Option<f64> {
            let pts: Vec<(f64, f64)> = samples
                .iter()
                .filter_map(|c| sel(c).filter(|v| *v > 0.0).map(|v| ((c.s_re.hypot(c.s_im)).ln(), v.ln())))
                .collect();
            (pts.len() >= 2 && pts.len() == samples.len()).then(|| fit_slope(&pts))
        };
        let force_exponent = fit(&|c| Some(c.force));
        let div_exponent = if with_div { fit(&|c| Some(c.div_v1? + c.div_dual?)) } else { None };
        Ok(ResidualNormReport {
            beta,
            mu: self.mu,
            depth: self.depth,
            log_budget: self.log_budget,
            predicted_exponent: -beta - self.mu - 0.5,
            samples,
            force_exponent,
            div_exponent,
        })
    }

    fn norm_integrals(&self, s: C64, beta: f64, with_div: bool) -> (f64, Option<f64>, Option<f64>) {
        let sa = s.norm();
        let sc = 1.0 / sa.sqrt();
        let r_lo = sc / 2f64.sqrt();
        let mut rb = vec![r_lo, r_lo + 0.25 * (sc - r_lo), r_lo + 0.5 * (sc - r_lo), r_lo + 0.75 * (sc - r_lo)];
        rb.extend(geometric_breaks(sc, 1e4 * sc, 28));
        let (rs, rw) = composite_gl(&rb, 6);
        let t0 = self.cone.half_angle;
        let dc = self.cone.layer_width;
        // θ nodes as (θ, weight in sin θ dθ)
        let mut th: Vec<(f64, f64)> = Vec::new();
        let (xi, wi) = composite_gl(&[0.0, 0.25, 0.5, 0.75, 1.0].map(|f| f * self.cone.collar_start()), 6);
        th.extend(xi.iter().zip(&wi).map(|(&t, &w)| (t, w * t.sin())));
        let mut gb = vec![0.0];
        gb.extend(geometric_breaks(dc * 1e-7, dc / 2.0, 24));
        gb.push(0.75 * dc);
        gb.push(dc);
        let (gs, gw) = composite_gl(&gb, 6);
        th.extend(gs.iter().zip(&gw).map(|(&g, &w)| {
            let t = t0 - g.asin();
            (t, w / (1.0 - g * g).sqrt() * t.sin())
        }));
        let (cphi, sphi) = if self.m == 0 { (2.0 * PI, 0.0) } else { (PI, PI) };
        let mf = self.m as f64;
        let mut force = Vec::new();
        let mut dv1 = Vec::new();
        let mut ddual = Vec::new();
        for &(t, wt) in &th {
            let interior = t < self.cone.collar_start();
            let a = self.sample(t);
            let ht = 1e-4 * t0.min(PI - t0);
            let nb: Vec<AngularSample> =
                if with_div { [2.0, 1.0, -1.0, -2.0].iter().map(|o| self.sample(t + o * ht)).collect() } else { vec![] };
            for (&r, &wr) in rs.iter().zip(&rw) {
                if interior && r >= sc {
                    continue;
                }
                let w = wr * r * r * wt;
                let v = self.cut_residual(&a, r, s);
                let fv = (v.vector[0].norm_sqr() + v.vector[1].norm_sqr()) * cphi + v.vector[2].norm_sqr() * sphi;
                force.push(w * r.powf(2.0 * beta) * fv);
                if with_div {
                    let d = v.scalar;
                    let h = 1e-3 * r;
                    let dr = (-self.cut_residual(&a, r + 2.0 * h, s).scalar + 8.0 * self.cut_residual(&a, r + h, s).scalar
                        - 8.0 * self.cut_residual(&a, r - h, s).scalar
                        + self.cut_residual(&a, r - 2.0 * h, s).scalar)
                        / (12.0 * h);
                    let dvals: Vec<C64> = nb.iter().map(|b| self.cut_residual(b, r, s).scalar).collect();
                    let dt = (-dvals[0] + 8.0 * dvals[1] - 8.0 * dvals[2] + dvals[3]) / (12.0 * ht) / r;
                    let dp = mf * d / (r * t.sin());
                    let grad2 = (dr.norm_sqr() + dt.norm_sqr()) * cphi + dp.norm_sqr() * sphi;
                    let d2 = d.norm_sqr() * cphi;
                    dv1.push(w * (r.powf(2.0 * beta) * grad2 + r.powf(2.0 * beta - 2.0) * d2));
                    ddual.push(w * sa * sa * r.powf(2.0 * beta + 2.0) * d2);
                }
            }
        }
        let f = ksum(force);
        if with_div {
            (f, Some(ksum(dv1)), Some(ksum(ddual)))
        } else {
            (f, None, None)
        }
    }
}

/// `|s|^{1/2} r ∫_Ω χ(ν/r)² e^{−ν Re√s} dω`; bounded in `(r, s)`.
pub fn ineq_ratio(cone: &ConeSpec, r: f64, s: C64) -> f64 {
    let dc = cone.layer_width;
    let t0 = cone.half_angle;
    let mut gb = vec![0.0];
    gb.extend(geometric_breaks(dc * 1e-8, dc, 30));
    let (gs, gw) = composite_gl(&gb, 8);
    let re = s.sqrt().re;
    let val: f64 = gs
        .iter()
        .zip(&gw)
        .map(|(&g, &w)| {
            let t = t0 - g.asin();
            let c = cone.chi(g);
            w / (1.0 - g * g).sqrt() * t.sin() * c * c * (-r * g * re).exp()
        })
        .sum();
    2.0 * PI * val * s.norm().sqrt() * r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neumann::build_profile;

    fn hemi(mu: f64, m: usize, depth: usize) -> Expansion {
        let cone = ConeSpec::hemisphere();
        let p = build_profile(mu, m, Parity::Cos, cone.half_angle).unwrap();
        build_un_pn(&cone, mu, 1, &p, depth).unwrap()
    }

    fn narrow(depth: usize) -> Expansion {
        let cone = ConeSpec::new(1.1).unwrap();
        let spec = neumann_spectrum(&cone, 3.0, 3).unwrap();
        let e = spec.get(2).unwrap();
        let m = e.m_list[0];
        let p = build_profile(e.mu, m, Parity::Cos, cone.half_angle).unwrap();
        build_un_pn(&cone, e.mu, 2, &p, depth).unwrap()
    }

    #[test]
    fn boundary_trace_vanishes() {
        let s = C64::new(0.7, 1.3);
        for &(mu, m) in &[(0.0, 0), (1.0, 1)] {
            for depth in 0..=2 {
                let e = hemi(mu, m, depth);
                let mut worst: f64 = 0.0;
                for i in 0..20 {
                    let x = SpatialPoint::new(0.05 + 0.3 * i as f64, PI / 2.0, 0.31 * i as f64);
                    let (u, _) = e.evaluate(&x, s);
                    worst = worst.max(u.iter().map(|z| z.norm()).fold(0.0, f64::max));
                }
                assert!(worst < 1e-10, "μ={mu} N={depth}: {worst:e}");
            }
        }
    }

    #[test]
    fn residual_levels_and_fd_agreement() {
        let s = C64::new(1.0, 0.5);
        for depth in 0..=2 {
            let e = narrow(depth);
            println!("μ = {}, m = {}", e.mu, e.m);
            assert!(e.min_residual_level().is_none_or(|b| b >= depth as i32 + 2));
            assert!(e.cancellation_defect < 1e-9, "{}", e.cancellation_defect);
            for &(r, g) in &[(1.5, 0.1), (3.0, 0.05), (2.0, 0.3), (2.0, 0.45)] {
                let x = SpatialPoint::new(r, e.cone.half_angle - f64::asin(g), 0.4);
                let (ms, ds) = e.residual_symbolic(&x, s);
                let fd = e.residual_fd(&x, s, 2e-3);
                let scale = e.evaluate(&x, s).0.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-3);
                for c in 0..3 {
                    assert!((ms[c] - fd.momentum[c]).norm() < 1e-5 * scale * 100.0, "N={depth} r={r} g={g} c={c}: {} vs {}", ms[c], fd.momentum[c]);
                }
                assert!((ds - fd.divergence).norm() < 1e-5 * scale * 10.0);
            }
        }
    }

    #[test]
    fn residual_vanishes_outside_collar() {
        let e = hemi(1.0, 1, 1);
        let s = C64::new(2.0, 0.0);
        let dc = e.cone.layer_width;
        let x = SpatialPoint::new(1.0, PI / 2.0 - (1.2 * dc).asin(), 0.2);
        let (m, d) = e.residual_symbolic(&x, s);
        assert!(m.iter().all(|z| z.norm() == 0.0) && d.norm() == 0.0);
        // ring part vanishes for 2ν < δ r
        let a = e.sample(PI / 2.0 - (0.3 * dc).asin());
        let rp = e.residual_pattern(&a, 1.0, s);
        assert!(rp.ring.vector.iter().all(|z| z.norm() == 0.0) && rp.ring.scalar.norm() == 0.0);
    }

    #[test]
    fn scaling_identity() {
        let e = narrow(2);
        let s = C64::new(3.0, 4.0);
        let sa = s.norm();
        for &(r, t) in &[(0.5, 1.0), (1.7, 1.05), (2.5, 0.3)] {
            let x = SpatialPoint::new(r, t, 0.7);
            let (u1, p1) = e.evaluate(&x, s);
            let (u2, p2) = e.evaluate(&x.scaled(sa.sqrt()), s / sa);
            let f = sa.powf(-(e.mu + 1.0) / 2.0);
            let un = u1.iter().map(|z| z.norm()).fold(0.0, f64::max);
            for c in 0..3 {
                assert!((u1[c] - f * u2[c]).norm() <= 1e-10 * un);
            }
            assert!((p1 - sa.powf(-e.mu / 2.0) * p2).norm() <= 1e-10 * p1.norm());
        }
    }

    #[test]
    fn degenerate_mu_zero() {
        let e = hemi(0.0, 0, 2);
        let (u, p) = e.evaluate(&SpatialPoint::new(1.3, 0.8, 0.0), C64::new(1.0, 1.0));
        assert!(u.iter().all(|z| z.norm() == 0.0));
        let area = 2.0 * PI;
        assert!((p.re - area.powf(-0.5)).abs() < 1e-10);
    }

    #[test]
    fn corrector_remainders_are_lower_order() {
        let cone = ConeSpec::new(1.1).unwrap();
        let c = Collar::new(&cone, 1, 0.8, COLLAR_DEGREE);
        let n = c.len();
        let vals: Vec<f64> = c.grid.nodes.iter().map(|t| (2.0 * t).sin()).collect();
        let mut f = vzero();
        f[0].insert(Key::new(1, 0, 0, 1), vals.clone());
        f[1].insert(Key::new(1, 0, 0, 1), vec![1.0; n]);
        let mut g = Field::new();
        g.insert(Key::new(1, 0, 0, 0), vals);
        let corr = layer_corrector(&c, &f, &g).unwrap();
        let (r1, r2) = corrector_remainders(&c, &f, &g, &corr);
        let lvl: BTreeSet<i32> = r1.iter().flat_map(|x| x.keys().map(|k| k.b)).chain(r2.keys().map(|k| k.b)).collect();
        let lead = r1.iter().map(|x| field_sup(&level(x, 0))).fold(field_sup(&level(&r2, 0)), f64::max);
        assert!(lead < 1e-11, "{lead}");
        assert!(lvl.iter().all(|&b| (0..=2).contains(&b)));
        // non-homogeneous input is rejected
        let mut bad = f.clone();
        bad[2].insert(Key::new(1, 1, 0, 0), vec![1.0; n]);
        assert!(layer_corrector(&c, &bad, &g).is_err());
    }

    #[test]
    fn lift_resonance_at_constant() {
        // hemisphere, m = 0, λ = 0: the constant is resonant; flux forces a log
        let cone = ConeSpec::hemisphere();
        let mut flux = BTreeMap::new();
        flux.insert(0, 0.3);
        let r = neumann_lift(&cone, 0, 0.0, &flux, &BTreeMap::new()).unwrap();
        let rec = r.resonance.unwrap();
        assert!(rec.log_raised && rec.eigenvalue.abs() < 1e-12);
        // solvability: 0 = sinθ0·1·c + (2λ+1)·α₁·‖1‖² ⇒ α₁ = −c
        let one = r.terms.iter().find(|(k, _)| *k == 1).unwrap();
        assert!((one.1.q[10] + 0.3).abs() < 1e-9, "{}", one.1.q[10]);
        // a flux with no projection on the constant does not raise the log power
        let mut rhs = BTreeMap::new();
        let grid = ChebGrid::new(0.0, 1.0, PROFILE_DEGREE);
        // ∫_0^1 h dx = −c·sinθ0 balances the flux
        rhs.insert(0, grid.nodes.iter().map(|_| -0.3).collect::<Vec<_>>());
        let r = neumann_lift(&cone, 0, 0.0, &flux, &rhs).unwrap();
        assert!(!r.resonance.unwrap().log_raised);
        assert!(r.terms.iter().all(|(k, _)| *k == 0));
    }

    #[test]
    fn lift_non_resonant_self_check() {
        let cone = ConeSpec::new(1.0).unwrap();
        let mut flux = BTreeMap::new();
        flux.insert(0, 1.0);
        flux.insert(1, -0.5);
        let r = neumann_lift(&cone, 1, 0.37, &flux, &BTreeMap::new()).unwrap();
        assert!(r.resonance.is_none());
        assert!(r.residual < 1e-10);
        for (k, psi) in &r.terms {
            let d = psi.eval(1.0).d1;
            assert!((d - flux[k]).abs() < 1e-9, "k={k}: {d}");
        }
    }

    #[test]
    fn ineq_bounded() {
        let cone = ConeSpec::new(1.2).unwrap();
        for &r in &[0.5, 1.0, 10.0] {
            for &s in &[C64::new(1.0, 0.0), C64::new(0.0, 50.0), C64::new(400.0, 10.0)] {
                assert!(ineq_ratio(&cone, r, s) < 4.0 * PI);
            }
        }
    }

    #[test]
    fn envelope_slope_far_field() {
        let s = C64::new(1.0, 0.0);
        for depth in 0..=2 {
            let e = narrow(depth);
            let k = e.envelope_exponent(s, 10.0, 100.0, 10, false);
            assert!((k - (e.mu - depth as f64 - 2.0)).abs() < 0.1, "N={depth}: {k}");
        }
    }

    #[test]
    fn residual_norm_exponent_hemisphere() {
        let e = hemi(1.0, 1, 1);
        let rep = e.residual_norm_bounds(C64::new(1.0, 0.0), 0.0, &[1.0, 4.0, 16.0]).unwrap();
        let k = rep.force_exponent.unwrap();
        assert!((k + 1.5).abs() < 0.1, "{k}");
        assert!(e.residual_norm_bounds(C64::new(1.0, 0.0), 1.0, &[1.0]).is_err());
        let z = hemi(0.0, 0, 1).residual_norm_bounds(C64::new(1.0, 0.0), 0.0, &[1.0, 4.0]).unwrap();
        assert!(z.samples.iter().all(|c| c.force == 0.0));
    }
}
