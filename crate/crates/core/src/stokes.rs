//! Stokes operator pencil of the cone and the weight classifier.
//!
//! For `u = r^λ U(ω)`, `p = r^{λ−1} P(ω)` the Stokes system becomes a
//! quadratic pencil `T(λ) = A0 + λA1 + λ²A2` acting on `(U, P)` with `U = 0`
//! on the cap boundary. Each azimuthal order `m` decouples. Angular factors
//! are expanded in even or odd Chebyshev polynomials of `θ/θ0`, the parity
//! fixed by regularity at the pole, and collocated at the positive half of a
//! Gauss–Lobatto set.

use crate::cheb::cheb_basis;
use crate::error::{Error, Result};
use crate::geometry::ConeSpec;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};

type C64 = Complex64;

/// Value and first two θ-derivatives of an angular factor.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Jet {
    pub fn new(v: f64, d1: f64, d2: f64) -> Self {
        Jet { v, d1, d2 }
    }
}

/// Coefficients of `λ⁰, λ¹, λ²` in the four symbol rows (r, θ, φ momentum, divergence)
/// for angular factors `U_r cos mφ`, `U_θ cos mφ`, `U_φ sin mφ`, `P cos mφ`.
pub fn symbol(m: usize, th: f64, ur: Jet, ut: Jet, uf: Jet, p: Jet) -> [[f64; 3]; 4] {
    let mf = m as f64;
    let (s, c) = th.sin_cos();
    let cot = c / s;
    let s2 = s * s;
    let delta = |f: Jet| f.d2 + cot * f.d1 - mf * mf * f.v / s2;
    [
        [
            -delta(ur) + 2.0 * ur.v + 2.0 * (ut.d1 + cot * ut.v) + 2.0 * mf * uf.v / s - p.v,
            -ur.v + p.v,
            -ur.v,
        ],
        [
            -delta(ut) + ut.v / s2 - 2.0 * ur.d1 + 2.0 * mf * c * uf.v / s2 + p.d1,
            -ut.v,
            -ut.v,
        ],
        [
            -delta(uf) + uf.v / s2 + 2.0 * mf * ur.v / s + 2.0 * mf * c * ut.v / s2 - mf * p.v / s,
            -uf.v,
            -uf.v,
        ],
        [2.0 * ur.v + ut.d1 + cot * ut.v + mf * uf.v / s, ur.v, 0.0],
    ]
}

/// Collocation matrices of one azimuthal order.
#[derive(Debug, Clone)]
pub struct PencilMatrices {
    pub m: usize,
    pub k: usize,
    pub theta0: f64,
    pub a: [DMatrix<f64>; 3],
}

impl PencilMatrices {
    /// Assemble with `k` velocity modes per component and `k − 1` pressure modes.
    pub fn assemble(theta0: f64, m: usize, k: usize) -> Result<Self> {
        if k < 3 {
            return Err(Error::domain("pencil resolution must be at least 3"));
        }
        let n = 4 * k - 1;
        let mut a = [DMatrix::zeros(n, n), DMatrix::zeros(n, n), DMatrix::zeros(n, n)];
        // scalar parity of U_r and P; U_θ, U_φ take the opposite one
        let ps = m % 2;
        let pv = 1 - ps;
        let deg = 2 * k + 1;
        let jets = |xi: f64, parity: usize, count: usize| -> Vec<Jet> {
            let (t, d1, d2) = cheb_basis(deg, xi);
            (0..count)
                .map(|j| {
                    let q = 2 * j + parity;
                    Jet::new(t[q], d1[q] / theta0, d2[q] / (theta0 * theta0))
                })
                .collect()
        };
        let col = |comp: usize, j: usize| comp * k + j;
        let z = Jet::default();
        for i in 1..k {
            let xi = (i as f64 * PI / (2 * k) as f64).cos();
            let th = xi * theta0;
            let js = jets(xi, ps, k);
            let jv = jets(xi, pv, k);
            let rows = [i - 1, k - 1 + i - 1, 2 * (k - 1) + i - 1, 3 * (k - 1) + i - 1];
            for j in 0..k {
                let cols = [
                    (col(0, j), symbol(m, th, js[j], z, z, z)),
                    (col(1, j), symbol(m, th, z, jv[j], z, z)),
                    (col(2, j), symbol(m, th, z, z, jv[j], z)),
                ];
                for (c, sym) in cols {
                    for (e, &r) in rows.iter().enumerate() {
                        for pw in 0..3 {
                            a[pw][(r, c)] = sym[e][pw];
                        }
                    }
                }
            }
            for j in 0..k - 1 {
                let sym = symbol(m, th, z, z, z, js[j]);
                for (e, &r) in rows.iter().enumerate() {
                    for pw in 0..3 {
                        a[pw][(r, 3 * k + j)] = sym[e][pw];
                    }
                }
            }
        }
        // Dirichlet rows at θ = θ0 where every T_q equals 1
        for comp in 0..3 {
            let r = 4 * (k - 1) + comp;
            for j in 0..k {
                a[0][(r, col(comp, j))] = 1.0;
            }
        }
        // row equilibration (eigenvalues are unchanged)
        for r in 0..n {
            let w = (0..3).map(|p| a[p].row(r).amax()).fold(0.0, f64::max);
            if w > 0.0 {
                for p in a.iter_mut() {
                    p.row_mut(r).scale_mut(1.0 / w);
                }
            }
        }
        Ok(PencilMatrices { m, k, theta0, a })
    }

    pub fn dim(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn eval(&self, lam: C64) -> DMatrix<C64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| {
            C64::from(self.a[0][(i, j)]) + lam * self.a[1][(i, j)] + lam * lam * self.a[2][(i, j)]
        })
    }

    pub fn eval_real(&self, lam: f64) -> DMatrix<f64> {
        &self.a[0] + &self.a[1] * lam + &self.a[2] * (lam * lam)
    }

    pub fn deriv(&self, lam: C64) -> DMatrix<C64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| C64::from(self.a[1][(i, j)]) + lam * 2.0 * self.a[2][(i, j)])
    }

    /// `(log|det T(λ)|, arg det T(λ))`.
    pub fn logdet(&self, lam: C64) -> (f64, f64) {
        let lu = self.eval(lam).lu();
        let u = lu.u();
        let mut mag = 0.0;
        let mut arg = 0.0;
        for i in 0..u.nrows() {
            let d = u[(i, i)];
            mag += d.norm().ln();
            arg += d.arg();
        }
        let sign: f64 = lu.p().determinant();
        if sign < 0.0 {
            arg += PI;
        }
        (mag, arg)
    }

    /// `tr(T(λ)⁻¹ T'(λ)) = (log det T)'`.
    pub fn log_derivative(&self, lam: C64) -> Option<C64> {
        let lu = self.eval(lam).lu();
        let x = lu.solve(&self.deriv(lam))?;
        Some(x.diagonal().sum())
    }

    /// Newton iteration on `log det`, with step scaled by the multiplicity.
    pub fn newton(&self, start: C64, mult: usize, tol: f64) -> Option<C64> {
        let mut lam = start;
        for _ in 0..60 {
            // an exactly singular T(λ) means λ is already a root
            let Some(ld) = self.log_derivative(lam) else { return Some(lam) };
            if !ld.is_finite() {
                return Some(lam);
            }
            if ld.norm() == 0.0 {
                return None;
            }
            let step = -(mult as f64) / ld;
            lam += step;
            if step.norm() < tol {
                return Some(lam);
            }
        }
        None
    }

    /// Zero count and centroid of the zeros inside the circle `|λ − c| = ρ`,
    /// by the trapezoidal rule on `(log det T)'`.
    pub fn cluster(&self, c: C64, rho: f64) -> Option<(f64, C64)> {
        let n = 48;
        let mut i0 = C64::new(0.0, 0.0);
        let mut i1 = C64::new(0.0, 0.0);
        for q in 0..n {
            let e = C64::from_polar(rho, 2.0 * PI * q as f64 / n as f64);
            let ld = self.log_derivative(c + e)?;
            i0 += ld * e;
            i1 += ld * e * (c + e);
        }
        let count = i0 / n as f64;
        if count.im.abs() > 1e-3 {
            return None;
        }
        Some((count.re, i1 / n as f64 / count.re))
    }

    /// Refine a zero cluster of known size: Newton, then the contour centroid.
    pub fn refine(&self, start: C64, mult: usize) -> Option<C64> {
        let z = self.newton(start, mult, 1e-13);
        if mult == 1 {
            return z;
        }
        let z = z.unwrap_or(start);
        for rho in [1e-2, 3e-3, 3e-2] {
            let mut c = z;
            let mut ok = false;
            // re-centre so the contour stays far from the cluster
            for _ in 0..3 {
                match self.cluster(c, rho) {
                    Some((cnt, centroid)) if (cnt - mult as f64).abs() < 1e-3 => {
                        c = centroid;
                        ok = true;
                    }
                    _ => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                return Some(c);
            }
        }
        None
    }

    /// Singular values of `T(λ)` for real `λ`, descending.
    pub fn singular_values(&self, lam: f64) -> Vec<f64> {
        let mut sv: Vec<f64> = self.eval_real(lam).singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        sv
    }

    /// Null vector of `T(λ)` for real `λ` (right singular vector of the smallest singular value).
    pub fn null_vector(&self, lam: f64) -> DVector<f64> {
        let svd = self.eval_real(lam).svd(false, true);
        let vt = svd.v_t.expect("requested V^T");
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        vt.row(imin).transpose()
    }
}

/// Number of zeros of `det T` inside a rectangle, from the argument principle.
/// `None` when a zero sits too close to the contour to resolve the phase.
pub fn winding_number(pm: &PencilMatrices, re: (f64, f64), im: (f64, f64)) -> Option<i64> {
    let corners = [
        C64::new(re.0, im.0),
        C64::new(re.1, im.0),
        C64::new(re.1, im.1),
        C64::new(re.0, im.1),
    ];
    let mut total = 0.0;
    for e in 0..4 {
        let (a, b) = (corners[e], corners[(e + 1) % 4]);
        let pieces = 24;
        let mut prev = pm.logdet(a);
        for q in 1..=pieces {
            let z0 = a + (b - a) * ((q - 1) as f64 / pieces as f64);
            let z1 = a + (b - a) * (q as f64 / pieces as f64);
            let next = pm.logdet(z1);
            total += phase_increment(pm, z0, z1, prev, next, 0)?;
            prev = next;
        }
    }
    let w = total / (2.0 * PI);
    if (w - w.round()).abs() > 0.1 {
        return None;
    }
    Some(w.round() as i64)
}

fn wrap(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y + 2.0 * PI
    } else {
        y
    }
}

fn phase_increment(pm: &PencilMatrices, z0: C64, z1: C64, f0: (f64, f64), f1: (f64, f64), depth: usize) -> Option<f64> {
    let d = wrap(f1.1 - f0.1);
    if d.abs() < 0.5 {
        return Some(d);
    }
    if depth > 18 {
        return None;
    }
    let zm = 0.5 * (z0 + z1);
    let fm = pm.logdet(zm);
    Some(phase_increment(pm, z0, zm, f0, fm, depth + 1)? + phase_increment(pm, zm, z1, fm, f1, depth + 1)?)
}

/// Pencil eigenvalue of one azimuthal order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PencilRoot {
    pub lambda: C64,
    pub m: usize,
    /// Zeros of `det T_m` counted by the argument principle.
    pub winding: usize,
    /// Multiplicity in the full problem (`m ≥ 1` carries a cosine and a sine copy).
    pub multiplicity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PencilSpectrum {
    pub theta0: f64,
    pub strip: (f64, f64),
    pub im_max: f64,
    pub roots: Vec<PencilRoot>,
    /// Boxes `[re0, re1, im0, im1]` where the count could not be resolved.
    pub undecided: Vec<[f64; 4]>,
    /// Largest distance from `−1 − λ` to the nearest computed root, over roots whose mirror lies in the strip.
    pub mirror_error: f64,
}

const SPLIT: f64 = 0.4871;
const EDGE_PAD: f64 = 0.0137;

fn search_box(pm: &PencilMatrices, re: (f64, f64), im: (f64, f64), roots: &mut Vec<(C64, usize)>, undecided: &mut Vec<[f64; 4]>) {
    let w = re.1 - re.0;
    let h = im.1 - im.0;
    let diam = w.max(h);
    let count = match winding_number(pm, re, im) {
        Some(c) if c < 0 => {
            undecided.push([re.0, re.1, im.0, im.1]);
            return;
        }
        Some(c) => c as usize,
        None => {
            if diam < 1e-4 {
                undecided.push([re.0, re.1, im.0, im.1]);
                return;
            }
            // shift the contour slightly by splitting off-centre
            split(pm, re, im, roots, undecided, 0.3817);
            return;
        }
    };
    if count == 0 {
        return;
    }
    if diam < 0.3 {
        let centre = C64::new(0.5 * (re.0 + re.1), 0.5 * (im.0 + im.1));
        if let Some(z) = pm.refine(centre, count) {
            let inside = z.re >= re.0 - 0.05 * w && z.re <= re.1 + 0.05 * w && z.im >= im.0 - 0.05 * h && z.im <= im.1 + 0.05 * h;
            if inside {
                roots.push((z, count));
                return;
            }
        }
        if diam < 1e-4 {
            roots.push((centre, count));
            return;
        }
    }
    split(pm, re, im, roots, undecided, SPLIT);
}

fn split(pm: &PencilMatrices, re: (f64, f64), im: (f64, f64), roots: &mut Vec<(C64, usize)>, undecided: &mut Vec<[f64; 4]>, f: f64) {
    if re.1 - re.0 >= im.1 - im.0 {
        let c = re.0 + f * (re.1 - re.0);
        search_box(pm, (re.0, c), im, roots, undecided);
        search_box(pm, (c, re.1), im, roots, undecided);
    } else {
        let c = im.0 + f * (im.1 - im.0);
        search_box(pm, re, (im.0, c), roots, undecided);
        search_box(pm, re, (c, im.1), roots, undecided);
    }
}

/// Roots of one azimuthal order in `[a, b] × [−im_max, im_max]`, confirmed on a finer grid.
pub fn roots_for_order(theta0: f64, m: usize, strip: (f64, f64), im_max: f64, resolution: usize) -> Result<(Vec<PencilRoot>, Vec<[f64; 4]>)> {
    let pm = PencilMatrices::assemble(theta0, m, resolution)?;
    let fine = PencilMatrices::assemble(theta0, m, resolution + 8)?;
    let mut raw = Vec::new();
    let mut undecided = Vec::new();
    search_box(&pm, (strip.0 - EDGE_PAD, strip.1 + EDGE_PAD), (-im_max, im_max), &mut raw, &mut undecided);
    let mut roots = Vec::new();
    for (z, count) in raw {
        // spurious collocation modes do not survive refinement
        let Some(zf) = fine.refine(z, count) else { continue };
        if (zf - z).norm() > 1e-6 * (1.0 + z.norm()) {
            continue;
        }
        let zf = if zf.im.abs() < 1e-8 { C64::new(zf.re, 0.0) } else { zf };
        if zf.re < strip.0 - 1e-6 || zf.re > strip.1 + 1e-6 {
            continue;
        }
        roots.push(PencilRoot { lambda: zf, m, winding: count, multiplicity: count * if m == 0 { 1 } else { 2 } });
    }
    Ok((roots, undecided))
}

/// Pencil eigenvalues with `a ≤ Re λ ≤ b`, `|Im λ| ≤ im_max`, orders `m ≤ m_max`.
pub fn discretized_pencil_spectrum(cone: &ConeSpec, strip: (f64, f64), m_max: usize, resolution: usize) -> Result<PencilSpectrum> {
    discretized_pencil_spectrum_im(cone, strip, 3.0, m_max, resolution)
}

pub fn discretized_pencil_spectrum_im(cone: &ConeSpec, strip: (f64, f64), im_max: f64, m_max: usize, resolution: usize) -> Result<PencilSpectrum> {
    if strip.1 > 4.0 || strip.0 >= strip.1 {
        return Err(Error::domain("strip must satisfy a < b ≤ 4"));
    }
    if !(3..=100).contains(&resolution) {
        return Err(Error::domain("resolution must lie in 3..=100 modes per component"));
    }
    let mut roots = Vec::new();
    let mut undecided = Vec::new();
    for m in 0..=m_max {
        let (r, u) = roots_for_order(cone.half_angle, m, strip, im_max, resolution)?;
        roots.extend(r);
        undecided.extend(u);
    }
    roots.sort_by(|a, b| {
        a.lambda.re.partial_cmp(&b.lambda.re).unwrap().then(a.lambda.im.partial_cmp(&b.lambda.im).unwrap()).then(a.m.cmp(&b.m))
    });
    let mut mirror_error: f64 = 0.0;
    for r in &roots {
        let mirror = -1.0 - r.lambda;
        if mirror.re < strip.0 || mirror.re > strip.1 {
            continue;
        }
        let d = roots.iter().filter(|q| q.m == r.m).map(|q| (q.lambda - mirror).norm()).fold(f64::INFINITY, f64::min);
        mirror_error = mirror_error.max(d);
    }
    Ok(PencilSpectrum { theta0: cone.half_angle, strip, im_max, roots, undecided, mirror_error })
}

/// Origin of pencil data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PencilSource {
    HalfSpaceCriterion,
    Discretized,
    UserSupplied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StokesPencilData {
    pub lambda1: f64,
    pub lambda1_simple: bool,
    pub re_lambda2: f64,
    pub source: PencilSource,
    /// 1 when `λ₁ = 1` carries a generalized eigenvector.
    pub d: u8,
}

impl StokesPencilData {
    pub fn new(lambda1: f64, lambda1_simple: bool, re_lambda2: f64, source: PencilSource, d: u8) -> Result<Self> {
        if !(lambda1 > 0.0 && lambda1 <= 1.0 + 1e-9) {
            return Err(Error::domain("λ₁ must lie in (0, 1]"));
        }
        if re_lambda2 <= lambda1 {
            return Err(Error::domain("Re λ₂ must exceed λ₁"));
        }
        if d > 1 || (d == 1 && (!is_one(lambda1) || lambda1_simple)) {
            return Err(Error::domain("d = 1 requires λ₁ = 1 with a generalized eigenvector"));
        }
        Ok(StokesPencilData { lambda1: lambda1.min(1.0), lambda1_simple, re_lambda2, source, d })
    }

    pub fn user(lambda1: f64, simple: bool, re_lambda2: f64) -> Result<Self> {
        Self::new(lambda1, simple, re_lambda2, PencilSource::UserSupplied, 0)
    }

    /// `λ₁ = 1` and simple: the sharper weight theory applies.
    pub fn special_case(&self) -> bool {
        is_one(self.lambda1) && self.lambda1_simple
    }
}

fn is_one(x: f64) -> bool {
    (x - 1.0).abs() < 1e-9
}

/// `λ₁ = 1`, simple, when the closed cap lies in a half-sphere; `Re λ₂` still to be supplied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfSpaceShortcut {
    pub lambda1: f64,
    pub lambda1_simple: bool,
}

impl HalfSpaceShortcut {
    pub fn with_re_lambda2(&self, re_lambda2: f64) -> Result<StokesPencilData> {
        StokesPencilData::new(self.lambda1, self.lambda1_simple, re_lambda2, PencilSource::HalfSpaceCriterion, 0)
    }
}

pub fn halfspace_shortcut(cone: &ConeSpec) -> Option<HalfSpaceShortcut> {
    (cone.half_angle <= FRAC_PI_2 + 1e-12).then_some(HalfSpaceShortcut { lambda1: 1.0, lambda1_simple: true })
}

/// Summary of `λ₁`, its multiplicity and `Re λ₂` from a computed spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PencilSummary {
    pub data: StokesPencilData,
    pub lambda1_multiplicity: usize,
    /// Smallest-singular-value count below threshold at `λ₁`, summed over orders.
    pub lambda1_nullity: usize,
}

/// Extract pencil data; `λ₁` is the root of smallest positive real part.
pub fn pencil_data(spec: &PencilSpectrum, resolution: usize) -> Result<PencilSummary> {
    let pos: Vec<&PencilRoot> = spec.roots.iter().filter(|r| r.lambda.re > 1e-9).collect();
    let l1 = pos.iter().map(|r| r.lambda.re).fold(f64::INFINITY, f64::min);
    if !l1.is_finite() {
        return Err(Error::numeric("no positive pencil eigenvalue in the strip"));
    }
    let group: Vec<&&PencilRoot> = pos.iter().filter(|r| (r.lambda.re - l1).abs() < 1e-6).collect();
    let mult: usize = group.iter().map(|r| r.multiplicity).sum();
    let re2 = pos.iter().map(|r| r.lambda.re).filter(|&x| x > l1 + 1e-6).fold(f64::INFINITY, f64::min);
    if !re2.is_finite() {
        return Err(Error::numeric("strip too narrow to contain λ₂"));
    }
    let mut nullity = 0;
    let mut jordan = false;
    for r in &group {
        let pm = PencilMatrices::assemble(spec.theta0, r.m, resolution)?;
        let sv = pm.singular_values(r.lambda.re);
        let nul = sv.iter().filter(|&&x| x < 1e-8 * sv[0]).count().max(1);
        nullity += nul * if r.m == 0 { 1 } else { 2 };
        if has_generalized_eigenvector(&pm, r.lambda.re) {
            jordan = true;
        }
    }
    let simple = mult == 1 && nullity == 1;
    let lambda1 = if (l1 - 1.0).abs() < 1e-6 { 1.0 } else { l1 };
    let d = u8::from(is_one(lambda1) && !simple && jordan);
    let data = StokesPencilData::new(lambda1, simple, re2, PencilSource::Discretized, d)?;
    Ok(PencilSummary { data, lambda1_multiplicity: mult, lambda1_nullity: nullity })
}

/// Jordan-chain test: is `T'(λ)φ` in the range of `T(λ)`?
pub fn has_generalized_eigenvector(pm: &PencilMatrices, lam: f64) -> bool {
    let phi = pm.null_vector(lam);
    let rhs = (&pm.a[1] + &pm.a[2] * (2.0 * lam)) * &phi;
    let t = pm.eval_real(lam);
    let svd = t.clone().svd(true, true);
    let Ok(x) = svd.solve(&rhs, 1e-10 * svd.singular_values.max()) else { return false };
    let res = (&t * x - &rhs).norm();
    res < 1e-8 * rhs.norm().max(1e-300)
}

/// Mapping property of the Stokes operator in weighted spaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightStatus {
    IsoOntoEX,
    IsoOntoEXTilde,
    NotFredholm,
    KernelNontrivial,
    CokernelNontrivial,
    CokernelConstantsOnly,
    OutsideTheory,
}

impl WeightStatus {
    pub fn label(&self) -> &'static str {
        match self {
            WeightStatus::IsoOntoEX => "IsoOntoE×X",
            WeightStatus::IsoOntoEXTilde => "IsoOntoE×X̃",
            WeightStatus::NotFredholm => "NotFredholm",
            WeightStatus::KernelNontrivial => "KernelNontrivial",
            WeightStatus::CokernelNontrivial => "CokernelNontrivial",
            WeightStatus::CokernelConstantsOnly => "CokernelConstantsOnly",
            WeightStatus::OutsideTheory => "OutsideTheory",
        }
    }

    pub fn is_iso(&self) -> bool {
        matches!(self, WeightStatus::IsoOntoEX | WeightStatus::IsoOntoEXTilde)
    }

    pub fn is_nontrivial(&self) -> bool {
        matches!(self, WeightStatus::KernelNontrivial | WeightStatus::CokernelNontrivial | WeightStatus::CokernelConstantsOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVerdict {
    pub beta: f64,
    pub status: WeightStatus,
    pub citation: String,
}

const PT_TOL: f64 = 1e-12;

/// Weights at which some pencil eigenvalue lies on the line `Re λ = ½ − β`
/// or some `μ_j` equals `−½ − β`.
pub fn fredholm_breakpoints(p: &StokesPencilData, mu2: f64) -> Vec<f64> {
    let l1 = p.lambda1;
    let r2 = p.re_lambda2;
    let mut v = vec![0.5 - l1, l1 + 1.5, 0.5 - r2, r2 + 1.5, -0.5, 0.5, mu2 + 0.5, -0.5 - mu2];
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup_by(|a, b| (*a - *b).abs() < PT_TOL);
    v
}

/// All interval endpoints used by the classifier (for sampling tests).
pub fn classifier_breakpoints(p: &StokesPencilData, mu2: f64) -> Vec<f64> {
    let r2 = p.re_lambda2;
    let mut v = fredholm_breakpoints(p, mu2);
    v.extend([2.5, -r2 + 0.5, -r2 - 1.5, mu2 + 2.5]);
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup_by(|a, b| (*a - *b).abs() < PT_TOL);
    v
}

/// Decide the mapping property of the Stokes operator on weight `β`.
pub fn classify_weight(beta: f64, p: &StokesPencilData, mu2: f64) -> WeightVerdict {
    let (status, citation) = classify(beta, p, mu2);
    WeightVerdict { beta, status, citation: citation.to_string() }
}

fn classify(b: f64, p: &StokesPencilData, mu2: f64) -> (WeightStatus, &'static str) {
    use WeightStatus::*;
    if fredholm_breakpoints(p, mu2).iter().any(|&x| (b - x).abs() < PT_TOL) {
        return (NotFredholm, "eigenvalue on weight line");
    }
    let l1 = p.lambda1;
    if !p.special_case() {
        if 0.5 - l1 < b && b < 0.5 {
            return (IsoOntoEX, "sharp interval below 1/2");
        }
        if 0.5 < b && b < (mu2 + 0.5).min(l1 + 1.5) {
            return (IsoOntoEXTilde, "interval above 1/2, zero-mean data");
        }
        return (OutsideTheory, "no statement");
    }
    let r2 = p.re_lambda2;
    if (-mu2 - 0.5).max(0.5 - r2) < b && b < 0.5 {
        return (IsoOntoEX, "lambda1=1 simple: extended lower interval");
    }
    if 0.5 < b && b < (mu2 + 0.5).min(2.5) {
        return (IsoOntoEXTilde, "lambda1=1 simple: zero-mean interval");
    }
    if mu2 > 2.0 && 2.5 < b && b < (mu2 + 0.5).min(r2 + 1.5) {
        return (IsoOntoEX, "lambda1=1 simple: interval above 5/2");
    }
    if mu2 > r2 - 1.0 && (-mu2 - 0.5).max(-r2 - 1.5) < b && b < -r2 + 0.5 {
        return (CokernelNontrivial, "lambda2 singular function below the interval");
    }
    if mu2 < r2 - 1.0 && -r2 + 0.5 < b && b < -mu2 - 0.5 {
        return (KernelNontrivial, "mu2 mode below the interval");
    }
    if mu2 < r2 + 1.0 && mu2 + 0.5 < b && b < (mu2 + 2.5).min(r2 + 1.5) {
        return (CokernelNontrivial, "nonconstant adjoint kernel above mu2+1/2");
    }
    if mu2 > r2 + 1.0 && r2 + 1.5 < b && b < mu2 + 0.5 {
        return (KernelNontrivial, "lambda2 mode above the interval");
    }
    (OutsideTheory, "no statement")
}

/// Whether regularity of a solution transfers from weight `β` to `γ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegularityShift {
    Transfers,
    TransfersUpToConstantPressure,
    NotCovered,
}

pub fn regularity_shift(beta: f64, gamma: f64, p: &StokesPencilData, mu2: f64, g_zero_mean: bool) -> RegularityShift {
    let l1 = p.lambda1;
    let both = |lo: f64, hi: f64| lo < beta && beta < hi && lo < gamma && gamma < hi;
    let near = |x: f64, y: f64| (x - y).abs() < PT_TOL;
    let hi = beta.max(gamma);
    let lo = beta.min(gamma);
    let general = both(0.5 - l1, 0.5 + mu2.min(l1 + 1.0))
        && !near(beta, 0.5)
        && !near(gamma, 0.5)
        && (hi <= 0.5 || g_zero_mean);
    if general {
        return RegularityShift::Transfers;
    }
    if p.special_case() {
        let r2 = p.re_lambda2;
        let excluded = [-0.5, 0.5, 2.5].iter().any(|&x| near(beta, x) || near(gamma, x));
        let ok = both(0.5 - r2.min(mu2 + 1.0), 0.5 + mu2.min(r2 + 1.0))
            && !excluded
            && (!(hi > 0.5 && lo < 2.5) || g_zero_mean);
        if ok {
            return if (beta + 0.5) * (gamma + 0.5) < 0.0 {
                RegularityShift::TransfersUpToConstantPressure
            } else {
                RegularityShift::Transfers
            };
        }
    }
    RegularityShift::NotCovered
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbol_annihilates_shear_flow() {
        // u = (x3, 0, 0) in the half-space: λ = 1, m = 1, p = 0
        for &th in &[0.3, 0.9, 1.4] {
            let (s, c) = f64::sin_cos(th);
            let ur = Jet::new(s * c, (2.0 * th).cos(), -2.0 * (2.0 * th).sin());
            let ut = Jet::new(c * c, -(2.0 * th).sin(), -2.0 * (2.0 * th).cos());
            let uf = Jet::new(-c, s, c);
            let sym = symbol(1, th, ur, ut, uf, Jet::default());
            for row in sym {
                assert!((row[0] + row[1] + row[2]).abs() < 1e-12, "{row:?}");
            }
        }
    }

    #[test]
    fn constant_pressure_mode() {
        let pm = PencilMatrices::assemble(PI / 3.0, 0, 12).unwrap();
        let sv = pm.singular_values(1.0);
        assert!(sv.last().unwrap() / sv[0] < 1e-12);
        let sv = pm.singular_values(0.7);
        assert!(sv.last().unwrap() / sv[0] > 1e-8);
    }

    #[test]
    fn classifier_examples() {
        let g = StokesPencilData::user(0.8, true, 1.5).unwrap();
        assert_eq!(classify_weight(0.0, &g, 0.9).status, WeightStatus::IsoOntoEX);
        let s = StokesPencilData::user(1.0, true, 2.0).unwrap();
        assert_eq!(classify_weight(0.5, &s, 1.0).status, WeightStatus::NotFredholm);
        assert_eq!(classify_weight(-1.0, &s, 1.0).status, WeightStatus::IsoOntoEX);
    }

    #[test]
    fn regularity_examples() {
        let s = StokesPencilData::user(1.0, true, 2.0).unwrap();
        assert_eq!(regularity_shift(0.3, 0.4, &s, 1.0, false), RegularityShift::Transfers);
        assert_eq!(regularity_shift(-1.0, 1.0, &s, 1.0, true), RegularityShift::TransfersUpToConstantPressure);
        assert_eq!(regularity_shift(0.3, 0.5, &s, 1.0, true), RegularityShift::NotCovered);
    }

    #[test]
    fn narrow_cone_strip() {
        let sp = discretized_pencil_spectrum(&ConeSpec::new(PI / 3.0).unwrap(), (-2.0, 1.0), 2, 12).unwrap();
        let got: Vec<f64> = sp.roots.iter().map(|r| r.lambda.re).collect();
        assert_eq!(got.len(), 2, "{got:?}");
        assert!((got[0] + 2.0).abs() < 1e-8 && (got[1] - 1.0).abs() < 1e-8);
        assert!(sp.undecided.is_empty() && sp.mirror_error < 1e-6);
    }

    #[test]
    fn shortcut_cases() {
        assert!(halfspace_shortcut(&ConeSpec::new(PI / 3.0).unwrap()).is_some());
        assert!(halfspace_shortcut(&ConeSpec::hemisphere()).is_some());
        assert!(halfspace_shortcut(&ConeSpec::new(2.0 * PI / 3.0).unwrap()).is_none());
    }
}
