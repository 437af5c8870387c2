//! Neumann Laplace–Beltrami spectrum of the circular cap.
//!
//! With `φ = sin^mθ · R(θ) · cos mφ` the eigen equation `−δφ = Λφ` becomes
//! `R'' + (2m+1) cot θ R' + (Λ − m(m+1)) R = 0`, regular at the pole with
//! `R(0) = 1`, and `Λ = μ(μ+1)`. Roots in `μ` of the Neumann condition are
//! found by shooting from a hypergeometric start value.

use crate::cheb::ChebGrid;
use crate::error::{Error, Result};
use crate::geometry::ConeSpec;
use crate::quad::gl;
use nalgebra::{DMatrix, DVector};
use ode_solvers::{Dop853, OutputType, System, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Pole offset where the series start value is handed to the integrator.
pub const THETA_START: f64 = 1e-4;
/// Default μ scan step.
pub const SCAN_STEP: f64 = 0.05;
/// Chebyshev degree used for stored profiles.
pub const PROFILE_DEGREE: usize = 48;

const RTOL: f64 = 1e-13;
const ATOL: f64 = 1e-15;

/// Azimuthal factor of an eigenfunction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Parity {
    Cos,
    Sin,
}

/// `R(θ)` near the pole from the Gauss hypergeometric series
/// `F(m−μ, m+μ+1; m+1; (1−cos θ)/2)` and its θ-derivative.
fn pole_series(mu: f64, m: usize, theta: f64) -> (f64, f64) {
    let z = 0.5 * (1.0 - theta.cos());
    let (a, b, c) = (m as f64 - mu, m as f64 + mu + 1.0, m as f64 + 1.0);
    let (mut term, mut f, mut fz) = (1.0, 1.0, 0.0);
    for n in 0..400 {
        let nf = n as f64;
        let ratio = (a + nf) * (b + nf) / ((c + nf) * (nf + 1.0));
        // d/dz of the next term z^{n+1}
        fz += term * ratio * (nf + 1.0);
        term *= ratio * z;
        f += term;
        if term.abs() < 1e-18 * f.abs() {
            break;
        }
    }
    (f, fz * 0.5 * theta.sin())
}

struct RadialOde {
    m: f64,
    lam: f64,
}

// θ is carried as a state so the system is autonomous: the DOP853 tableau
// shipped with ode_solvers 0.6 has a wrong last stage abscissa, which only
// matters when the right-hand side depends on the independent variable.
impl System<f64, Vector3<f64>> for RadialOde {
    fn system(&self, _t: f64, y: &Vector3<f64>, dy: &mut Vector3<f64>) {
        let cot = y[2].cos() / y[2].sin();
        dy[0] = y[1];
        dy[1] = -(2.0 * self.m + 1.0) * cot * y[1] - (self.lam - self.m * (self.m + 1.0)) * y[0];
        dy[2] = 1.0;
    }
}

/// Integrate `(R, R')` from the series start to `theta_end`.
fn integrate_r(mu: f64, m: usize, theta_end: f64) -> Result<(f64, f64)> {
    let (r0, dr0) = pole_series(mu, m, THETA_START);
    if theta_end <= THETA_START {
        return Ok(pole_series(mu, m, theta_end));
    }
    let sys = RadialOde { m: m as f64, lam: mu * (mu + 1.0) };
    let span = theta_end - THETA_START;
    let mut solver = Dop853::from_param(
        sys,
        THETA_START,
        theta_end,
        span,
        Vector3::new(r0, dr0, THETA_START),
        RTOL,
        ATOL,
        0.9,
        0.0,
        0.333,
        6.0,
        span,
        0.0,
        100_000,
        u32::MAX,
        OutputType::Sparse,
    );
    solver
        .integrate()
        .map_err(|e| Error::numeric(format!("shooting failed at μ={mu}, m={m}: {e:?}")))?;
    let y = solver.y_out().last().ok_or_else(|| Error::numeric("integrator produced no output"))?;
    Ok((y[0], y[1]))
}

/// Boundary value and θ-derivative of `ψ = sin^mθ·R(θ)` at `θ0`, normalised by `R(0) = 1`.
pub fn legendre_shoot(mu: f64, m: usize, theta0: f64) -> Result<(f64, f64)> {
    if mu < -0.5 {
        return Err(Error::domain("legendre_shoot expects μ ≥ −1/2"));
    }
    let (r, dr) = integrate_r(mu, m, theta0)?;
    let s = theta0.sin();
    let sm = s.powi(m as i32);
    let dpsi = if m == 0 { dr } else { sm * (m as f64 * theta0.cos() / s * r + dr) };
    Ok((sm * r, dpsi))
}

/// Scale-free Neumann function `m cos θ0 R + sin θ0 R'` whose zeros are the eigenvalues.
fn neumann_defect(mu: f64, m: usize, theta0: f64) -> Result<f64> {
    let (r, dr) = integrate_r(mu, m, theta0)?;
    Ok(m as f64 * theta0.cos() * r + theta0.sin() * dr)
}

/// Function of the form `sin^mθ · Q(cos θ)` with `Q` stored on a Chebyshev grid in `x = cos θ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoleRegular {
    pub m: usize,
    pub x0: f64,
    pub q: Vec<f64>,
    #[serde(skip)]
    cache: Option<Derivs>,
}

#[derive(Debug, Clone, PartialEq)]
struct Derivs {
    grid: ChebGrid,
    dq: Vec<f64>,
    ddq: Vec<f64>,
}

/// `(ψ, ψ', ψ'', ψ/sin θ)` at one angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileValues {
    pub v: f64,
    pub d1: f64,
    pub d2: f64,
    pub over_sin: f64,
}

impl PoleRegular {
    pub fn new(m: usize, x0: f64, q: Vec<f64>) -> Self {
        let mut p = PoleRegular { m, x0, q, cache: None };
        p.prepare();
        p
    }

    pub fn grid(&self) -> ChebGrid {
        ChebGrid::new(self.x0, 1.0, self.q.len() - 1)
    }

    /// Rebuild derivative caches (needed after deserialisation).
    pub fn prepare(&mut self) {
        let grid = self.grid();
        let dq = grid.diff(&self.q);
        let ddq = grid.diff(&dq);
        self.cache = Some(Derivs { grid, dq, ddq });
    }

    fn derivs(&self) -> &Derivs {
        self.cache.as_ref().expect("profile caches not prepared")
    }

    pub fn scaled(&self, a: f64) -> Self {
        PoleRegular::new(self.m, self.x0, self.q.iter().map(|v| v * a).collect())
    }

    /// `Q, Q', Q''` at `x`.
    pub fn q_at(&self, x: f64) -> (f64, f64, f64) {
        let d = self.derivs();
        let row = d.grid.interp_row(x);
        let dot = |v: &[f64]| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        (dot(&self.q), dot(&d.dq), dot(&d.ddq))
    }

    pub fn eval(&self, theta: f64) -> ProfileValues {
        let (s, c) = theta.sin_cos();
        let (q, dq, ddq) = self.q_at(c);
        let m = self.m as i32;
        let mf = self.m as f64;
        let pw = |k: i32| if k < 0 { 0.0 } else { s.powi(k) };
        let sm = pw(m);
        let s1 = if m >= 1 { mf * pw(m - 1) * c } else { 0.0 };
        let s2 = if m >= 2 { mf * (mf - 1.0) * pw(m - 2) * c * c } else { 0.0 } - mf * sm;
        let t1 = -s * dq;
        let t2 = s * s * ddq - c * dq;
        ProfileValues {
            v: sm * q,
            d1: s1 * q + sm * t1,
            d2: s2 * q + 2.0 * s1 * t1 + sm * t2,
            over_sin: if m >= 1 { pw(m - 1) * q } else { q / s },
        }
    }

    /// `∫_0^{θ0} ψ χ sin θ dθ` with another pole-regular function.
    pub fn inner(&self, other: &PoleRegular) -> f64 {
        let (xs, ws) = gl(self.x0, 1.0, 64);
        xs.iter()
            .zip(&ws)
            .map(|(&x, &w)| {
                let p = (1.0 - x * x).powi(self.m as i32 + other.m as i32);
                let (a, _, _) = self.q_at(x);
                let (b, _, _) = other.q_at(x);
                w * p.sqrt() * a * b
            })
            .sum()
    }
}

/// Orthonormal angular factor of an eigenfunction `ψ(θ)·{cos, sin}(mφ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngularProfile {
    pub m: usize,
    pub parity: Parity,
    pub mu: f64,
    pub shape: PoleRegular,
    /// Factor applied to the `R(0) = 1` solution to reach unit norm.
    pub normalization: f64,
}

impl AngularProfile {
    pub fn eval(&self, theta: f64) -> ProfileValues {
        self.shape.eval(theta)
    }

    /// Full eigenfunction value at `(θ, φ)`.
    pub fn value(&self, theta: f64, phi: f64) -> f64 {
        self.eval(theta).v * azimuth(self.m, self.parity, phi)
    }
}

/// `cos mφ` or `sin mφ`.
pub fn azimuth(m: usize, parity: Parity, phi: f64) -> f64 {
    match parity {
        Parity::Cos => (m as f64 * phi).cos(),
        Parity::Sin => (m as f64 * phi).sin(),
    }
}

/// `∫_0^{2π}` of the squared azimuthal factor.
pub fn azimuth_norm2(m: usize) -> f64 {
    if m == 0 {
        2.0 * PI
    } else {
        PI
    }
}

/// Sample `R` on the Chebyshev x-grid by integrating node to node.
fn sample_profile(mu: f64, m: usize, theta0: f64, degree: usize) -> Result<PoleRegular> {
    let x0 = theta0.cos();
    let grid = ChebGrid::new(x0, 1.0, degree);
    let mut q = vec![0.0; degree + 1];
    for (i, &x) in grid.nodes.iter().enumerate() {
        let th = x.clamp(-1.0, 1.0).acos();
        q[i] = if th <= THETA_START { pole_series(mu, m, th).0 } else { integrate_r(mu, m, th)?.0 };
    }
    Ok(PoleRegular::new(m, x0, q))
}

pub fn build_profile(mu: f64, m: usize, parity: Parity, theta0: f64) -> Result<AngularProfile> {
    if m == 0 && parity == Parity::Sin {
        return Err(Error::domain("m = 0 has no sine profile"));
    }
    let shape = sample_profile(mu, m, theta0, PROFILE_DEGREE)?;
    let n2 = shape.inner(&shape) * azimuth_norm2(m);
    let a = 1.0 / n2.sqrt();
    Ok(AngularProfile { m, parity, mu, shape: shape.scaled(a), normalization: a })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeumannEigenvalue {
    pub index: i32,
    pub mu: f64,
    pub beltrami_eigenvalue: f64,
    pub multiplicity: usize,
    pub m_list: Vec<usize>,
}

impl NeumannEigenvalue {
    /// Mirror record `μ_{−j} = −1 − μ_j`.
    pub fn negative_branch(&self) -> Result<NeumannEigenvalue> {
        if self.index < 1 {
            return Err(Error::domain("negative_branch expects j ≥ 1"));
        }
        Ok(NeumannEigenvalue { index: -self.index, mu: -1.0 - self.mu, ..self.clone() })
    }

    /// Profiles `φ_{j,k}` (cosine first, then sine, by increasing m).
    pub fn profiles(&self, theta0: f64) -> Result<Vec<AngularProfile>> {
        let mu = if self.mu < -0.5 { -1.0 - self.mu } else { self.mu };
        let mut out = Vec::new();
        for &m in &self.m_list {
            out.push(build_profile(mu, m, Parity::Cos, theta0)?);
            if m > 0 {
                out.push(build_profile(mu, m, Parity::Sin, theta0)?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeumannSpectrum {
    pub theta0: f64,
    pub eigenvalues: Vec<NeumannEigenvalue>,
    /// Roots per azimuthal order, index = m.
    pub by_m: Vec<Vec<f64>>,
    /// Near-tangencies in the scan that may hide a double root.
    pub flagged: Vec<(usize, f64)>,
}

impl NeumannSpectrum {
    /// Is `lam` (a Beltrami eigenvalue candidate) an eigenvalue of order `m`?
    pub fn is_eigen_for_m(&self, m: usize, beltrami: f64, tol: f64) -> Option<f64> {
        self.by_m.get(m)?.iter().copied().find(|mu| (mu * (mu + 1.0) - beltrami).abs() < tol)
    }

    pub fn get(&self, j: i32) -> Option<&NeumannEigenvalue> {
        self.eigenvalues.iter().find(|e| e.index == j)
    }

    /// Eigenvalues of both branches inside `[lo, hi]`.
    pub fn count_in(&self, vals: &[f64], tol: f64) -> usize {
        vals.iter()
            .filter(|&&v| {
                self.eigenvalues.iter().any(|e| (e.mu - v).abs() < tol || (-1.0 - e.mu - v).abs() < tol)
            })
            .count()
    }
}

fn bisect<F: Fn(f64) -> Result<f64>>(f: &F, mut a: f64, mut b: f64, mut fa: f64) -> Result<f64> {
    while b - a > 1e-12 {
        let c = 0.5 * (a + b);
        let fc = f(c)?;
        if fc == 0.0 {
            return Ok(c);
        }
        if (fc > 0.0) == (fa > 0.0) {
            a = c;
            fa = fc;
        } else {
            b = c;
        }
    }
    Ok(0.5 * (a + b))
}

/// Roots of the Neumann function for one azimuthal order in `[0, μ_max]`.
pub fn roots_for_m(theta0: f64, m: usize, mu_max: f64, step: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let f = |mu: f64| neumann_defect(mu, m, theta0);
    let mut roots = Vec::new();
    let mut flagged = Vec::new();
    if m == 0 {
        roots.push(0.0);
    }
    let offset = 0.5 * step;
    let n = ((mu_max - offset) / step).floor() as usize + 1;
    let grid: Vec<f64> = (0..=n).map(|k| offset + k as f64 * step).collect();
    let vals: Vec<f64> = grid.iter().map(|&mu| f(mu)).collect::<Result<_>>()?;
    for k in 0..grid.len() - 1 {
        let (a, b, fa, fb) = (grid[k], grid[k + 1], vals[k], vals[k + 1]);
        if a > mu_max {
            break;
        }
        if fa == 0.0 {
            roots.push(a);
        } else if fa * fb < 0.0 {
            let r = bisect(&f, a, b, fa)?;
            if r <= mu_max {
                roots.push(r);
            }
        } else if k > 0 && vals[k].abs() < vals[k - 1].abs() && vals[k].abs() < vals[k + 1].abs() {
            // local dip without sign change: possible double root inside the step
            let dip = vals[k].abs() / vals[k - 1].abs().max(vals[k + 1].abs());
            if dip < 1e-2 {
                flagged.push(a);
            }
        }
    }
    Ok((roots, flagged))
}

/// All Neumann eigenvalues `0 ≤ μ ≤ μ_max` with azimuthal orders `m ≤ m_max`.
pub fn neumann_spectrum(cone: &ConeSpec, mu_max: f64, m_max: usize) -> Result<NeumannSpectrum> {
    neumann_spectrum_with_step(cone, mu_max, m_max, SCAN_STEP)
}

pub fn neumann_spectrum_with_step(cone: &ConeSpec, mu_max: f64, m_max: usize, step: f64) -> Result<NeumannSpectrum> {
    if mu_max <= 0.0 {
        return Err(Error::domain("μ_max must be positive"));
    }
    let theta0 = cone.half_angle;
    let mut by_m = Vec::new();
    let mut flagged = Vec::new();
    let mut all: Vec<(f64, usize)> = Vec::new();
    for m in 0..=m_max {
        let (roots, fl) = roots_for_m(theta0, m, mu_max, step)?;
        flagged.extend(fl.into_iter().map(|mu| (m, mu)));
        all.extend(roots.iter().map(|&mu| (mu, m)));
        by_m.push(roots);
    }
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut eigenvalues: Vec<NeumannEigenvalue> = Vec::new();
    for (mu, m) in all {
        let mult = if m == 0 { 1 } else { 2 };
        match eigenvalues.last_mut() {
            Some(e) if (e.mu - mu).abs() < 1e-8 => {
                e.multiplicity += mult;
                e.m_list.push(m);
            }
            _ => {
                let index = eigenvalues.len() as i32 + 1;
                eigenvalues.push(NeumannEigenvalue {
                    index,
                    mu,
                    beltrami_eigenvalue: mu * (mu + 1.0),
                    multiplicity: mult,
                    m_list: vec![m],
                });
            }
        }
    }
    Ok(NeumannSpectrum { theta0, eigenvalues, by_m, flagged })
}

/// Collocation rows of `(1−x²)Q'' − 2(m+1)xQ' − m(m+1)Q` on the Lobatto grid in `x`,
/// and the Neumann row `(1−x0²)Q'(x0) − m x0 Q(x0)` (proportional to `ψ'(θ0)`).
pub fn beltrami_collocation(m: usize, grid: &ChebGrid) -> (DMatrix<f64>, DVector<f64>) {
    let d = grid.diff_matrix();
    let d2 = &d * &d;
    let n = grid.n + 1;
    let mf = m as f64;
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        let x = grid.nodes[i];
        for j in 0..n {
            a[(i, j)] = (1.0 - x * x) * d2[(i, j)] - 2.0 * (mf + 1.0) * x * d[(i, j)];
        }
        a[(i, i)] -= mf * (mf + 1.0);
    }
    let x0 = grid.nodes[0];
    let mut bc = DVector::zeros(n);
    for j in 0..n {
        bc[j] = (1.0 - x0 * x0) * d[(0, j)];
    }
    bc[0] -= mf * x0;
    (a, bc)
}

/// `ψ'(θ0) = −(1−x0²)^{(m−1)/2} · bc·Q`.
pub fn neumann_row_factor(m: usize, x0: f64) -> f64 {
    -(1.0 - x0 * x0).powf((m as f64 - 1.0) / 2.0)
}

/// Max-norm of `−δφ − Mφ` by second-order differences on a uniform θ-grid,
/// and `|∂φ/∂n|` at `θ0`.
///
/// Differences act on the pole-regular factor `R = ψ / sin^mθ`, where the
/// equation reads `R'' + (2m+1)cot θ R' + (M − m(m+1))R`; the residual is
/// mapped back to `φ` by the factor `sin^mθ`.
pub fn beltrami_residual(beltrami: f64, profile: &AngularProfile, nodes: usize) -> (f64, f64) {
    let theta0 = profile.shape.x0.acos();
    let h = theta0 / nodes as f64;
    let m = profile.m as f64;
    let r = |t: f64| profile.shape.q_at(t.cos()).0;
    let mut worst = 0.0f64;
    for i in 1..nodes {
        let t = i as f64 * h;
        let (rm, r0, rp) = (r(t - h), r(t), r(t + h));
        let d2 = (rp - 2.0 * r0 + rm) / (h * h);
        let d1 = (rp - rm) / (2.0 * h);
        let res = d2 + (2.0 * m + 1.0) * t.cos() / t.sin() * d1 + (beltrami - m * (m + 1.0)) * r0;
        worst = worst.max((t.sin().powi(profile.m as i32) * res).abs());
    }
    let flux = profile.eval(theta0).d1.abs();
    (worst, flux)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shoot_closed_forms() {
        let (_, d) = legendre_shoot(0.0, 0, 1.0).unwrap();
        assert!(d.abs() < 1e-12);
        let (_, d) = legendre_shoot(1.0, 1, PI / 2.0).unwrap();
        assert!(d.abs() < 1e-10);
        // ψ = sin θ cos θ for μ=2, m=1
        let (v, d) = legendre_shoot(2.0, 1, PI / 2.0).unwrap();
        assert!(v.abs() < 1e-10 && (d + 1.0).abs() < 1e-10);
        let (v, _) = legendre_shoot(2.0, 1, 0.7).unwrap();
        assert!((v - 0.7f64.sin() * 0.7f64.cos()).abs() < 1e-11);
    }

    #[test]
    fn hemisphere_spectrum() {
        let sp = neumann_spectrum(&ConeSpec::hemisphere(), 4.2, 5).unwrap();
        let mus: Vec<f64> = sp.eigenvalues.iter().map(|e| e.mu).collect();
        let mults: Vec<usize> = sp.eigenvalues.iter().map(|e| e.multiplicity).collect();
        assert_eq!(mults, vec![1, 2, 3, 4, 5]);
        for (k, mu) in mus.iter().enumerate() {
            assert!((mu - k as f64).abs() < 1e-9, "{mu}");
        }
        let neg = sp.eigenvalues[0].negative_branch().unwrap();
        assert_eq!(neg.mu, -1.0);
    }

    #[test]
    fn profiles_orthonormal_and_regular() {
        let cone = ConeSpec::new(1.1).unwrap();
        let sp = neumann_spectrum(&cone, 4.0, 3).unwrap();
        let mut profs = Vec::new();
        for e in &sp.eigenvalues {
            profs.extend(e.profiles(cone.half_angle).unwrap());
        }
        let grid = crate::quad::QuadratureGrid::cap(cone.half_angle, 60, 32);
        for a in &profs {
            for b in &profs {
                let g = grid.integrate_cap(|t, p| a.value(t, p) * b.value(t, p));
                let want = if std::ptr::eq(a, b) { 1.0 } else { 0.0 };
                assert!((g - want).abs() < 1e-8, "{} {} {}", a.mu, b.mu, g);
            }
            if a.m >= 1 {
                assert!(a.eval(0.0).v.abs() < 1e-15);
            }
        }
    }

    #[test]
    fn residual_second_order() {
        let cone = ConeSpec::new(1.0).unwrap();
        let sp = neumann_spectrum(&cone, 6.0, 1).unwrap();
        let e = &sp.eigenvalues[1];
        let p = &e.profiles(cone.half_angle).unwrap()[0];
        let (r1, flux) = beltrami_residual(e.beltrami_eigenvalue, p, 200);
        let (r2, _) = beltrami_residual(e.beltrami_eigenvalue, p, 400);
        let slope = (r1 / r2).log2();
        assert!(slope > 1.8 && slope < 2.2, "{slope}");
        assert!(flux < 1e-8);
        let hemi = neumann_spectrum(&ConeSpec::hemisphere(), 1.5, 1).unwrap();
        let p = &hemi.eigenvalues[1].profiles(PI / 2.0).unwrap()[0];
        assert!(beltrami_residual(2.0, p, 400).0 < 1e-6);
    }
}
