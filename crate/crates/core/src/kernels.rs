//! Time-domain kernels of the asymptotics at infinity.
//!
//! The cutoff `η_s` of the coefficient formula is replaced by `1 − ψ̃(s r²)`
//! with a mollifier `ψ` supported in `[0,1]` whose moments `1..N` vanish. This
//! makes every kernel analytic in `s`; the inversion runs along `Γ_{t,δ}`, an
//! arc of radius `1/t` joined to two rays at angle `±(π/2+δ)`.
//!
//! On the rays `ψ̃(s r²)` grows like `e^{r² sin δ |s|}`, so each kernel is
//! inverted in two parts. The interior part is a finite sum `Σ C_n s^{n/2}`;
//! its products with the shifts `ψ̃(s|x|²)`, `ψ̃(s|y|²)` are inverted in closed
//! form as fractional integrals of `ψ⁽ⁿ⁾`. The boundary-layer part decays like
//! `e^{−ν√s}`; it is inverted on the contour and then shifted by `ψ` in time.
//! For `t` beyond the shift support the full transform can be inverted on the
//! contour directly, which gives an independent route.
//!
//! Duals with `j ≥ 2` carry the factor `1 − ψ̃(s|y|²)` in place of `η_s`.

use crate::coeffs::{ball_rule, bump_jet, dual_depth, pair_expansion, pattern_to_cartesian};
use crate::error::{Error, Result};
use crate::geometry::{ConeSpec, SpatialPoint};
use crate::neumann::NeumannSpectrum;
use crate::quad::{composite_gl, gl};
use crate::singular::{fit_slope, AngularSample, Expansion};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::str::FromStr;
use std::sync::OnceLock;

/// Default tilt `δ` of the rays.
pub const DEFAULT_DELTA: f64 = 0.3;
/// Default bound on the truncated ray tail.
pub const DEFAULT_TAIL_TOL: f64 = 1e-13;
/// Largest admissible condition number of the moment system.
pub const MAX_CONDITION: f64 = 1e12;
/// Default number of vanishing moments.
pub const DEFAULT_MOMENTS: usize = 2;
/// Below `ν²/(4·EXP_FLOOR)` the layer part is below `e^{−EXP_FLOOR}` and set to zero.
const EXP_FLOOR: f64 = 45.0;
/// Panels of the outer `ψ` rule in double shifts.
const SHIFT_PANELS: usize = 8;
/// Chebyshev points in `log t'` for the layer inverse.
const LAYER_NODES: usize = 96;

fn zero() -> C64 {
    C64::new(0.0, 0.0)
}

/// `1/Γ(x)` for `x = two_x/2`; zero at the poles.
pub fn rgamma_half(two_x: i32) -> f64 {
    if two_x <= 0 && two_x % 2 == 0 {
        return 0.0;
    }
    // Γ(x) from Γ(1/2) or Γ(1) by the recurrence in both directions
    let (mut g, mut y) = if two_x % 2 == 0 { (1.0, 2) } else { (PI.sqrt(), 1) };
    while y < two_x {
        g *= y as f64 / 2.0;
        y += 2;
    }
    while y > two_x {
        y -= 2;
        g /= y as f64 / 2.0;
    }
    1.0 / g
}

/// `(B, B', B'')` for `B(t) = exp(−1/(t(1−t)))` on `(0,1)`.
fn bump_jet01(t: f64) -> [f64; 3] {
    let w = t * (1.0 - t);
    if !(w > 2e-3) {
        return [0.0; 3];
    }
    let b = (-1.0 / w).exp();
    let w1 = 1.0 - 2.0 * t;
    let h1 = w1 / (w * w);
    let h2 = (-2.0 * w - 2.0 * w1 * w1) / (w * w * w);
    [b, h1 * b, (h2 + h1 * h1) * b]
}

/// Composite Gauss rule on `[0,1]` resolving the bump.
fn unit_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let br: Vec<f64> = (0..=32).map(|i| i as f64 / 32.0).collect();
        composite_gl(&br, 16)
    })
}

/// `ψ = B·q` with `q` a polynomial of degree `N` in `2t−1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mollifier {
    pub moments: usize,
    /// Coefficients of `q` in powers of `2t−1`.
    pub coeffs: Vec<f64>,
    /// Condition number of the moment system.
    pub condition: f64,
    /// `M_k/k!` for the small-argument series of `1 − ψ̃`.
    #[serde(skip)]
    series: Vec<f64>,
}

impl Mollifier {
    pub fn new(n: usize) -> Result<Self> {
        if n > 12 {
            return Err(Error::domain(format!("N = {n} exceeds 12")));
        }
        let (ts, ws) = unit_rule();
        let mom: Vec<f64> = (0..=2 * n)
            .map(|k| ts.iter().zip(ws).map(|(&t, &w)| w * bump_jet01(t)[0] * (2.0 * t - 1.0).powi(k as i32)).sum())
            .collect();
        let g = DMatrix::from_fn(n + 1, n + 1, |i, l| mom[i + l]);
        // ∫ψ = 1 and ∫tʲψ = 0 give ∫(2t−1)ʲψ = (−1)ʲ
        let rhs = DVector::from_fn(n + 1, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        let sv = g.clone().singular_values();
        let condition = sv.max() / sv.min();
        if !(condition < MAX_CONDITION) {
            return Err(Error::numeric(format!("moment system condition {condition:.2e}; use a smaller N")));
        }
        let c = g.lu().solve(&rhs).ok_or_else(|| Error::numeric("singular moment system; use a smaller N"))?;
        let mut m = Mollifier { moments: n, coeffs: c.iter().copied().collect(), condition, series: Vec::new() };
        let mut fact = 1.0;
        m.series = (0..=SERIES_TERMS)
            .map(|k| {
                if k > 0 {
                    fact *= k as f64;
                }
                m.moment(k) / fact
            })
            .collect();
        Ok(m)
    }

    /// `(q, q', q'')` in the variable `t`.
    fn q_jet(&self, t: f64) -> [f64; 3] {
        let x = 2.0 * t - 1.0;
        let mut out = [0.0; 3];
        for (l, &c) in self.coeffs.iter().enumerate() {
            let lf = l as f64;
            out[0] += c * x.powi(l as i32);
            if l >= 1 {
                out[1] += 2.0 * lf * c * x.powi(l as i32 - 1);
            }
            if l >= 2 {
                out[2] += 4.0 * lf * (lf - 1.0) * c * x.powi(l as i32 - 2);
            }
        }
        out
    }

    /// `ψ⁽ⁿ⁾(t)` for `n ≤ 2`.
    pub fn deriv(&self, t: f64, n: usize) -> f64 {
        let b = bump_jet01(t);
        if b[0] == 0.0 {
            return 0.0;
        }
        let q = self.q_jet(t);
        match n {
            0 => b[0] * q[0],
            1 => b[1] * q[0] + b[0] * q[1],
            2 => b[2] * q[0] + 2.0 * b[1] * q[1] + b[0] * q[2],
            _ => panic!("ψ derivatives above order 2 are not provided"),
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        self.deriv(t, 0)
    }

    /// `∫₀¹ tʲψ(t) dt`.
    pub fn moment(&self, j: usize) -> f64 {
        let (ts, ws) = unit_rule();
        ts.iter().zip(ws).map(|(&t, &w)| w * t.powi(j as i32) * self.value(t)).sum()
    }

    /// `ψ̃⁽ʲ⁾(z) = ∫₀¹ (−t)ʲψ(t)e^{−zt} dt`, panels scaled with `|z|`.
    pub fn transform_deriv(&self, z: C64, j: usize) -> C64 {
        let panels = ((z.norm() / 3.0).ceil() as usize).clamp(32, 20000);
        let br: Vec<f64> = (0..=panels).map(|i| i as f64 / panels as f64).collect();
        let (ts, ws) = composite_gl(&br, 16);
        ts.iter()
            .zip(&ws)
            .map(|(&t, &w)| {
                let v = self.value(t);
                if v == 0.0 {
                    zero()
                } else {
                    (-z * t).exp() * (w * v * (-t).powi(j as i32))
                }
            })
            .sum()
    }

    pub fn transform(&self, z: C64) -> C64 {
        self.transform_deriv(z, 0)
    }

    /// `1 − ψ̃(z)`, summed from the moments for small `|z|` to avoid cancellation.
    pub fn cut(&self, z: C64) -> C64 {
        if z.norm() > 1.0 || self.series.is_empty() {
            return C64::new(1.0, 0.0) - self.transform(z);
        }
        let mut acc = zero();
        for k in (self.moments + 1..self.series.len()).rev() {
            acc = acc * (-z) + self.series[k];
        }
        -acc * (-z).powi(self.moments as i32 + 1)
    }
}

/// Piecewise description of `Γ_{t,δ}` truncated at `σ_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourSpec {
    pub t: f64,
    pub delta: f64,
    pub sigma_max: f64,
    /// Gauss nodes on each half of the arc.
    pub arc_nodes: usize,
    /// Ray panel length in units of `1/t`.
    pub ray_panel: f64,
    pub ray_nodes: usize,
}

impl ContourSpec {
    /// `σ_max` from `e^{−σ_max t sin δ} ≤ tol`.
    pub fn new(t: f64, delta: f64, tol: f64) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::domain(format!("t = {t} must be positive")));
        }
        if !(delta > 0.0 && delta <= 0.5) {
            return Err(Error::domain(format!("δ = {delta} must lie in (0, 0.5]")));
        }
        Ok(Self::with_decay_time(t, t, delta, tol))
    }

    pub fn default_for(t: f64) -> Result<Self> {
        Self::new(t, DEFAULT_DELTA, DEFAULT_TAIL_TOL)
    }

    /// Contour at `t` whose rays decay only with `e^{σ t_eff cos(π/2+δ)}`.
    fn with_decay_time(t: f64, t_eff: f64, delta: f64, tol: f64) -> Self {
        let sigma_max = ((1.0 / tol).ln() / (t_eff * delta.sin())).max(2.0 / t);
        ContourSpec { t, delta, sigma_max, arc_nodes: 24, ray_panel: 1.5, ray_nodes: 16 }
    }

    /// Bound on the dropped tail for `|F| ≤ f_max` beyond `σ_max`.
    pub fn tail_bound(&self, f_max: f64) -> f64 {
        let k = self.t * self.delta.sin();
        f_max * (-self.sigma_max * k).exp() / (PI * k)
    }

    fn refined(&self) -> Self {
        ContourSpec { arc_nodes: 2 * self.arc_nodes, ray_panel: self.ray_panel / 2.0, ..*self }
    }

    /// Nodes `(s, ds)` of the upper half, oriented along the contour.
    fn upper_nodes(&self) -> Vec<(C64, C64)> {
        let phi = PI / 2.0 + self.delta;
        let mut out = Vec::new();
        let (th, wt) = composite_gl(&[0.0, phi / 2.0, phi], self.arc_nodes / 2);
        for (&a, &w) in th.iter().zip(&wt) {
            let s = C64::from_polar(1.0 / self.t, a);
            out.push((s, C64::new(0.0, w) * s));
        }
        let u_hi = self.sigma_max * self.t;
        let panels = (((u_hi - 1.0) / self.ray_panel).ceil() as usize).max(1);
        let br: Vec<f64> = (0..=panels).map(|i| 1.0 + (u_hi - 1.0) * i as f64 / panels as f64).collect();
        let (us, wu) = composite_gl(&br, self.ray_nodes);
        let dir = C64::from_polar(1.0, phi);
        for (&u, &w) in us.iter().zip(&wu) {
            out.push((dir * (u / self.t), dir * (w / self.t)));
        }
        out
    }
}

/// `(1/2πi) ∫_Γ e^{st} F(s) ds` for a vector-valued `F`.
///
/// With `symmetric`, `F(s̄) = conj F(s)` is assumed and only the upper half is
/// used; the result is then real.
pub fn contour_invert<F: FnMut(C64) -> Vec<C64>>(mut f: F, dim: usize, spec: &ContourSpec, symmetric: bool) -> Vec<C64> {
    let mut up = vec![zero(); dim];
    let mut lo = vec![zero(); dim];
    for (s, ds) in spec.upper_nodes() {
        let e = (s * spec.t).exp();
        for (acc, v) in up.iter_mut().zip(f(s)) {
            *acc += e * v * ds;
        }
        if !symmetric {
            let (sc, dsc) = (s.conj(), ds.conj());
            let e = (sc * spec.t).exp();
            for (acc, v) in lo.iter_mut().zip(f(sc)) {
                *acc += e * v * dsc;
            }
        }
    }
    if symmetric {
        up.iter().map(|z| C64::new(z.im / PI, 0.0)).collect()
    } else {
        // the lower half runs in the opposite direction to its conjugate nodes
        let k = C64::new(0.0, 2.0 * PI);
        up.iter().zip(&lo).map(|(u, l)| (u - l) / k).collect()
    }
}

/// [`contour_invert`] with an error estimate from node doubling.
pub fn contour_invert_with_error<F: FnMut(C64) -> Vec<C64>>(
    mut f: F,
    dim: usize,
    spec: &ContourSpec,
    symmetric: bool,
) -> (Vec<C64>, f64) {
    let coarse = contour_invert(&mut f, dim, spec, symmetric);
    let fine = contour_invert(&mut f, dim, &spec.refined(), symmetric);
    let err = coarse.iter().zip(&fine).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    (fine, err)
}

/// `m`-fold time antiderivative of the inverse transform on `Re s = c`,
/// truncated at `|Im s| ≤ omega_max`; needs `m ≥ 1` and real-symmetric `F`.
pub fn vertical_invert<F: FnMut(C64) -> Vec<C64>>(
    mut f: F,
    dim: usize,
    t: f64,
    m: u32,
    c: f64,
    omega_max: f64,
) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::domain("the vertical line needs m ≥ 1 for absolute convergence"));
    }
    let panels = ((omega_max * t / (PI / 2.0)).ceil() as usize).max(8);
    let br: Vec<f64> = (0..=panels).map(|i| omega_max * i as f64 / panels as f64).collect();
    let (ws_, wts) = composite_gl(&br, 8);
    let mut acc = vec![0.0; dim];
    for (&w, &q) in ws_.iter().zip(&wts) {
        let s = C64::new(c, w);
        let e = (s * t).exp() * s.powi(-(m as i32));
        for (a, v) in acc.iter_mut().zip(f(s)) {
            *a += q * (e * v).re / PI;
        }
    }
    Ok(acc)
}

/// Kernel kinds; tensor shape `(rows, cols)` per kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum KernelKind {
    Ku,
    Hu,
    Kp,
    Hp,
}

impl KernelKind {
    pub const ALL: [KernelKind; 4] = [KernelKind::Ku, KernelKind::Hu, KernelKind::Kp, KernelKind::Hp];

    /// Velocity `u₀` on the `x` side.
    fn x_velocity(self) -> bool {
        matches!(self, KernelKind::Ku | KernelKind::Hu)
    }

    /// Velocity `V` on the `y` side.
    fn y_velocity(self) -> bool {
        matches!(self, KernelKind::Ku | KernelKind::Kp)
    }

    pub fn shape(self) -> (usize, usize) {
        (if self.x_velocity() { 3 } else { 1 }, if self.y_velocity() { 3 } else { 1 })
    }

    /// Power of `t` in the pointwise envelope at `|α| = |β| = 0`.
    pub fn t_exponent(self) -> f64 {
        match self {
            KernelKind::Ku => -1.5,
            KernelKind::Hu | KernelKind::Kp => -2.0,
            KernelKind::Hp => -2.5,
        }
    }

    /// Envelope powers `(x far, y far, y near)` at zero derivative order.
    pub fn envelope_powers(self, mu: f64, lambda1: f64) -> (f64, f64, f64) {
        let xf = if self.x_velocity() { -2.0 - mu } else { -1.0 - mu };
        let (yf, yn) = if self.y_velocity() { (mu - 1.0, lambda1) } else { (mu, lambda1 - 1.0) };
        (xf, yf, yn)
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Ku => "K_u",
            KernelKind::Hu => "H_u",
            KernelKind::Kp => "K_p",
            KernelKind::Hp => "H_p",
        }
    }
}

impl FromStr for KernelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "").as_str() {
            "ku" => Ok(KernelKind::Ku),
            "hu" => Ok(KernelKind::Hu),
            "kp" => Ok(KernelKind::Kp),
            "hp" => Ok(KernelKind::Hp),
            _ => Err(Error::domain(format!("unknown kernel kind `{s}`"))),
        }
    }
}

/// Expansion split into interior groups by `√s` power and the layer part.
#[derive(Debug, Clone)]
struct Split {
    groups: Vec<(i32, Expansion)>,
    layer: Option<Expansion>,
}

impl Split {
    fn new(e: &Expansion) -> Self {
        let mut by: BTreeMap<i32, Vec<_>> = BTreeMap::new();
        for a in &e.interior {
            by.entry(a.key.a2).or_default().push(a.clone());
        }
        let strip = |mut o: Expansion| {
            o.velocity_layer.clear();
            o.pressure_layer.clear();
            o.momentum_residual.clear();
            o.divergence_residual.clear();
            o.ring_d1.clear();
            o.ring_d2.clear();
            o.ring_div.clear();
            o
        };
        let groups = by
            .into_iter()
            .map(|(a2, atoms)| {
                let mut o = strip(e.clone());
                o.interior = atoms;
                (a2, o)
            })
            .collect();
        let has_layer = !e.velocity_layer.is_empty() || !e.pressure_layer.is_empty();
        let layer = has_layer.then(|| {
            let mut o = e.clone();
            o.interior.clear();
            o
        });
        Split { groups, layer }
    }
}

/// One side of a kernel at a fixed point.
struct Side {
    /// `√s` power → (velocity, pressure) coefficients.
    pow: BTreeMap<i32, ([f64; 3], f64)>,
    sample: Option<AngularSample>,
    x: SpatialPoint,
    nu: f64,
}

impl Side {
    fn new(split: &Split, cone: &ConeSpec, x: &SpatialPoint) -> Self {
        let one = C64::new(1.0, 0.0);
        let mut pow: BTreeMap<i32, ([f64; 3], f64)> = BTreeMap::new();
        for (a2, e) in &split.groups {
            let (u, p) = e.evaluate(x, one);
            // velocity −s⁻¹∇P carries √s^{a2−2}
            pow.entry(a2 - 2).or_insert(([0.0; 3], 0.0)).0 = u.map(|z| z.re);
            pow.entry(*a2).or_insert(([0.0; 3], 0.0)).1 += p.re;
        }
        let g = (cone.half_angle - x.theta).sin();
        let sample = match &split.layer {
            Some(l) if cone.chi(g) != 0.0 => Some(l.sample(x.theta)),
            _ => None,
        };
        Side { pow, sample, x: *x, nu: x.r * g }
    }

    fn interior(&self, s: C64) -> ([C64; 3], C64) {
        let sq = s.sqrt();
        let mut u = [zero(); 3];
        let mut p = zero();
        for (&n, (v, q)) in &self.pow {
            let f = sq.powi(n);
            for c in 0..3 {
                u[c] += f * v[c];
            }
            p += f * q;
        }
        (u, p)
    }

    fn layer(&self, split: &Split, s: C64) -> Option<([C64; 3], C64)> {
        let (l, a) = (split.layer.as_ref()?, self.sample.as_ref()?);
        let v = l.eval_pattern(a, self.x.r, s);
        Some(pattern_to_cartesian(l, &v, &self.x))
    }
}

fn comps(velocity: bool, v: &([C64; 3], C64)) -> Vec<C64> {
    if velocity {
        v.0.to_vec()
    } else {
        vec![v.1]
    }
}

fn outer(a: &[C64], b: &[C64]) -> Vec<C64> {
    a.iter().flat_map(|x| b.iter().map(move |y| x * y)).collect()
}

fn add_to(acc: &mut [C64], v: &[C64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

/// Kernels of one singular index `(j,k)`.
#[derive(Debug, Clone)]
pub struct KernelFamily {
    pub cone: ConeSpec,
    pub j: usize,
    pub k: usize,
    pub mu: f64,
    pub lambda1: f64,
    pub dual_depth: usize,
    /// `(V, Q) = (0, |Ω|^{−1/2})` for `μ = 0`.
    pub exact_dual: bool,
    pub mollifier: Mollifier,
    q_const: f64,
    primal: Split,
    dual: Option<Split>,
}

impl KernelFamily {
    pub fn new(cone: &ConeSpec, spec: &NeumannSpectrum, j: usize, k: usize, lambda1: f64, mollifier: Mollifier) -> Result<Self> {
        let ev = spec.get(j as i32).ok_or_else(|| Error::domain(format!("index {j} not in spectrum")))?;
        let mu = ev.mu;
        if mu < 0.0 {
            return Err(Error::domain("kernels need μ_j ≥ 0"));
        }
        let primal = Split::new(&pair_expansion(cone, spec, -(j as i32), k, 0)?);
        let exact = mu.abs() < 1e-12;
        let depth = if exact { 0 } else { dual_depth(mu, lambda1) };
        let dual = if exact { None } else { Some(Split::new(&pair_expansion(cone, spec, j as i32, k, depth)?)) };
        Ok(KernelFamily {
            cone: *cone,
            j,
            k,
            mu,
            lambda1,
            dual_depth: depth,
            exact_dual: exact,
            mollifier,
            q_const: cone.cap_area.powf(-0.5),
            primal,
            dual,
        })
    }

    /// Pointwise-envelope hypothesis `0 ≤ μ_j < min(λ₁, μ₂)+1`, `μ_j ≠ 1`.
    pub fn clean_hypothesis(&self, mu2: f64) -> bool {
        self.mu < self.lambda1.min(mu2) + 1.0 && (self.mu - 1.0).abs() > 1e-9
    }

    fn check_point(&self, x: &SpatialPoint) -> Result<()> {
        if !(x.r > 0.0 && x.theta >= 0.0 && x.theta < self.cone.half_angle) {
            return Err(Error::domain(format!("point (r={}, θ={}) is not inside the cone", x.r, x.theta)));
        }
        Ok(())
    }

    pub fn kernel(&self, kind: KernelKind, x: &SpatialPoint, y: &SpatialPoint) -> Result<KernelEvaluator<'_>> {
        self.check_point(x)?;
        self.check_point(y)?;
        let xs = Side::new(&self.primal, &self.cone, x);
        let ys = self.dual.as_ref().map(|d| Side::new(d, &self.cone, y));
        let factor = -1.0 / (1.0 + 2.0 * self.mu);
        let (xv, yv) = (kind.x_velocity(), kind.y_velocity());
        let (da, db) = kind.shape();
        let mut power: BTreeMap<i32, Vec<C64>> = BTreeMap::new();
        let ypow: Vec<(i32, ([f64; 3], f64))> = match &ys {
            Some(s) => s.pow.iter().map(|(k, v)| (*k, *v)).collect(),
            None => vec![(0, ([0.0; 3], self.q_const))],
        };
        for (p, av) in &xs.pow {
            let a = comps(xv, &(av.0.map(|z| C64::new(z, 0.0)), C64::new(av.1, 0.0)));
            for (q, bv) in &ypow {
                let b = comps(yv, &(bv.0.map(|z| C64::new(z, 0.0)), C64::new(bv.1, 0.0)));
                let o: Vec<C64> = outer(&a, &b).into_iter().map(|z| z * factor).collect();
                let e = power.entry(p + q + 2).or_insert_with(|| vec![zero(); da * db]);
                add_to(e, &o);
            }
        }
        power.retain(|_, v| v.iter().any(|z| z.norm() > 0.0));
        let mut nus = vec![];
        if xs.sample.is_some() {
            nus.push(xs.nu);
        }
        if let Some(s) = ys.as_ref().filter(|s| s.sample.is_some()) {
            nus.push(s.nu);
        }
        let t_floor = nus.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(KernelEvaluator {
            fam: self,
            kind,
            a: x.r * x.r,
            b: ys.as_ref().map(|_| y.r * y.r),
            xs,
            ys,
            factor,
            power,
            has_layer: !nus.is_empty(),
            t_floor: if nus.is_empty() { 0.0 } else { t_floor * t_floor / (4.0 * EXP_FLOOR) },
        })
    }
}

/// Inverse transform at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSample {
    pub kind: KernelKind,
    pub j: usize,
    pub k: usize,
    pub x: [f64; 3],
    pub y: [f64; 3],
    pub t: f64,
    /// Row-major tensor of shape [`KernelKind::shape`].
    pub value: Vec<f64>,
    pub error: f64,
}

impl KernelSample {
    pub fn norm(&self) -> f64 {
        self.value.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// One kernel at fixed `(x, y)`.
pub struct KernelEvaluator<'a> {
    fam: &'a KernelFamily,
    pub kind: KernelKind,
    xs: Side,
    ys: Option<Side>,
    /// `|x|²`, the support of the shift `ψ̃(s|x|²)`.
    pub a: f64,
    /// `|y|²` for truncated duals.
    pub b: Option<f64>,
    factor: f64,
    /// `√s` power → coefficient tensor of the interior part.
    power: BTreeMap<i32, Vec<C64>>,
    pub has_layer: bool,
    t_floor: f64,
}

impl KernelEvaluator<'_> {
    fn dims(&self) -> usize {
        let (a, b) = self.kind.shape();
        a * b
    }

    fn y_full(&self, s: C64) -> (([C64; 3], C64), Option<([C64; 3], C64)>) {
        match (&self.ys, &self.fam.dual) {
            (Some(side), Some(split)) => (side.interior(s), side.layer(split, s)),
            _ => (([zero(); 3], C64::new(self.fam.q_const, 0.0)), None),
        }
    }

    /// `−s/(1+2μ) A ⊗ B` without the cut factors, split into (interior, layer).
    fn product(&self, s: C64) -> (Vec<C64>, Vec<C64>) {
        let (xv, yv) = (self.kind.x_velocity(), self.kind.y_velocity());
        let ai = self.xs.interior(s);
        let al = self.xs.layer(&self.fam.primal, s);
        let (bi, bl) = self.y_full(s);
        let f = s * self.factor;
        let (a_int, b_int) = (comps(xv, &ai), comps(yv, &bi));
        let int: Vec<C64> = outer(&a_int, &b_int).into_iter().map(|z| z * f).collect();
        let mut lay = vec![zero(); self.dims()];
        let b_full: Vec<C64> = match &bl {
            Some(l) => b_int.iter().zip(comps(yv, l)).map(|(x, y)| x + y).collect(),
            None => b_int.clone(),
        };
        if let Some(l) = &al {
            add_to(&mut lay, &outer(&comps(xv, l), &b_full));
        }
        if let Some(l) = &bl {
            add_to(&mut lay, &outer(&a_int, &comps(yv, l)));
        }
        lay.iter_mut().for_each(|z| *z *= f);
        (int, lay)
    }

    /// Laplace-domain kernel `K̃(x,y,s)` including the cut factors.
    pub fn transform(&self, s: C64) -> Vec<C64> {
        let (int, lay) = self.product(s);
        let m = &self.fam.mollifier;
        let mut w = m.cut(s * self.a);
        if let Some(b) = self.b {
            w *= m.cut(s * b);
        }
        int.iter().zip(&lay).map(|(x, y)| (x + y) * w).collect()
    }

    /// Interior tensor coefficients keyed by the power of `√s`.
    pub fn power_coefficients(&self) -> Vec<(i32, Vec<f64>)> {
        self.power.iter().map(|(k, v)| (*k, v.iter().map(|z| z.re).collect())).collect()
    }

    /// `L⁻¹{s^α ψ̃(sa)}(t)` for `α = two_alpha/2`.
    fn shift1(&self, two_alpha: i32, a: f64, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let m = &self.fam.mollifier;
        let n = if two_alpha > 0 { (two_alpha + 1) / 2 } else { 0 };
        let two_beta = two_alpha - 2 * n;
        if two_beta == 0 {
            return a.powi(-(n as i32) - 1) * m.deriv(t / a, n as usize);
        }
        // a^{−n}/Γ(−β) ∫ (t−au)^e ψ⁽ⁿ⁾(u) du with t − au = v²
        let e2 = -two_beta - 2; // 2e
        let (v_lo, v_hi) = ((t - a).max(0.0).sqrt(), t.sqrt());
        let br: Vec<f64> = (0..=8).map(|i| v_lo + (v_hi - v_lo) * i as f64 / 8.0).collect();
        let (vs, ws) = composite_gl(&br, 16);
        let sum: f64 = vs
            .iter()
            .zip(&ws)
            .map(|(&v, &w)| {
                let u = (t - v * v) / a;
                w * v.powi(e2 + 1) * m.deriv(u, n as usize) * 2.0 / a
            })
            .sum();
        sum * a.powi(-(n as i32)) * rgamma_half(-two_beta)
    }

    /// `L⁻¹{s^α ψ̃(sa) ψ̃(sb)}(t)`.
    fn shift2(&self, two_alpha: i32, a: f64, b: f64, t: f64) -> f64 {
        let hi = (t / b).min(1.0);
        if hi <= 0.0 {
            return 0.0;
        }
        let br: Vec<f64> = (0..=SHIFT_PANELS).map(|i| hi * i as f64 / SHIFT_PANELS as f64).collect();
        let (vs, ws) = composite_gl(&br, 16);
        let m = &self.fam.mollifier;
        vs.iter().zip(&ws).map(|(&v, &w)| w * m.value(v) * self.shift1(two_alpha, a, t - b * v)).sum()
    }

    /// `L⁻¹{s^α W(s)}(t)` with `W` the product of the cut factors.
    fn cut_power(&self, two_alpha: i32, t: f64) -> f64 {
        let direct = if two_alpha >= 0 && two_alpha % 2 == 0 {
            0.0
        } else {
            t.powf(-(two_alpha as f64) / 2.0 - 1.0) * rgamma_half(-two_alpha)
        };
        let mut v = direct - self.shift1(two_alpha, self.a, t);
        if let Some(b) = self.b {
            v += -self.shift1(two_alpha, b, t) + self.shift2(two_alpha, self.a, b, t);
        }
        v
    }

    /// Layer inverse `g(t')` of `s^{−m}` times the uncut layer product.
    fn layer_inverse(&self, t: f64, m: u32) -> Vec<f64> {
        let spec = ContourSpec::with_decay_time(t, t, DEFAULT_DELTA, DEFAULT_TAIL_TOL);
        let f = |s: C64| {
            let w = s.powi(-(m as i32));
            self.product(s).1.into_iter().map(|z| z * w).collect()
        };
        contour_invert(f, self.dims(), &spec, true).iter().map(|z| z.re).collect()
    }

    /// Layer value with the time shifts of the cut factors.
    ///
    /// `g` is interpolated in `log t'` on Chebyshev points over `[t_floor, t]`;
    /// the error combines an off-node interpolation check with node doubling at `t`.
    fn layer_value(&self, t: f64, m: u32) -> (Vec<f64>, f64) {
        let d = self.dims();
        if t <= self.t_floor {
            return (vec![0.0; d], 0.0);
        }
        let (lo, hi) = (self.t_floor.ln(), t.ln());
        let nodes: Vec<f64> = (0..LAYER_NODES)
            .map(|i| 0.5 * (lo + hi) - 0.5 * (hi - lo) * (PI * i as f64 / (LAYER_NODES - 1) as f64).cos())
            .collect();
        let vals: Vec<Vec<f64>> = nodes.iter().map(|&x| self.layer_inverse(x.exp(), m)).collect();
        let g = |tp: f64| -> Vec<f64> {
            if tp <= self.t_floor {
                return vec![0.0; d];
            }
            barycentric(&nodes, &vals, tp.ln().min(hi), d)
        };
        let mid = (0.5 * (nodes[LAYER_NODES / 2] + nodes[LAYER_NODES / 2 + 1])).exp();
        let interp_err = g(mid).iter().zip(self.layer_inverse(mid, m)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let spec = ContourSpec::with_decay_time(t, t, DEFAULT_DELTA, DEFAULT_TAIL_TOL);
        let f = |s: C64| {
            let w = s.powi(-(m as i32));
            self.product(s).1.into_iter().map(|z| z * w).collect()
        };
        let (_, contour_err) = contour_invert_with_error(f, d, &spec, true);
        let mut out = vals[LAYER_NODES - 1].clone();
        let mol = &self.fam.mollifier;
        let rule = |c: f64, base: f64| -> (Vec<f64>, Vec<f64>) {
            let top = ((base - self.t_floor) / c).min(1.0);
            if top <= 0.0 {
                return (vec![], vec![]);
            }
            let br: Vec<f64> = (0..=SHIFT_PANELS).map(|i| top * i as f64 / SHIFT_PANELS as f64).collect();
            composite_gl(&br, 16)
        };
        let single = |c: f64, base: f64| -> Vec<f64> {
            let mut acc = vec![0.0; d];
            let (us, ws) = rule(c, base);
            for (&u, &w) in us.iter().zip(&ws) {
                let wt = w * mol.value(u);
                if wt != 0.0 {
                    acc.iter_mut().zip(g(base - c * u)).for_each(|(o, v)| *o += wt * v);
                }
            }
            acc
        };
        out.iter_mut().zip(single(self.a, t)).for_each(|(o, v)| *o -= v);
        if let Some(b) = self.b {
            out.iter_mut().zip(single(b, t)).for_each(|(o, v)| *o -= v);
            let (vs, wv) = rule(b, t);
            for (&v, &w) in vs.iter().zip(&wv) {
                let wt = w * mol.value(v);
                if wt != 0.0 {
                    out.iter_mut().zip(single(self.a, t - b * v)).for_each(|(o, x)| *o += wt * x);
                }
            }
        }
        (out, interp_err + contour_err)
    }

    /// `m`-fold time antiderivative of the kernel at `t` (`m = 0`: the kernel).
    pub fn evaluate(&self, t: f64, m: u32) -> Result<KernelSample> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::domain(format!("t = {t} must be positive")));
        }
        let mut value = vec![0.0; self.dims()];
        // rounding in the closed-form sum scales with the size of its terms
        let mut gross = 0.0f64;
        for (n, c) in &self.power {
            let w = self.cut_power(n - 2 * m as i32, t);
            value.iter_mut().zip(c).for_each(|(v, z)| *v += w * z.re);
            gross = gross.max(c.iter().map(|z| (w * z.re).abs()).fold(0.0, f64::max));
        }
        let mut error = 64.0 * f64::EPSILON * gross;
        if self.has_layer {
            let (l, e) = self.layer_value(t, m);
            value.iter_mut().zip(&l).for_each(|(v, x)| *v += x);
            error += e;
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite kernel value"));
        }
        Ok(KernelSample {
            kind: self.kind,
            j: self.fam.j,
            k: self.fam.k,
            x: self.xs.x.cartesian(),
            y: self.ys.as_ref().map_or([f64::NAN; 3], |s| s.x.cartesian()),
            t,
            value,
            error,
        })
    }

    /// Support of the time shifts, `|x|² + |y|²` or `|x|²`.
    pub fn shift_support(&self) -> f64 {
        self.a + self.b.unwrap_or(0.0)
    }

    /// Inverts the full transform on `Γ_{t,δ}`; valid for `t` beyond the shift support.
    pub fn evaluate_direct(&self, t: f64, delta: f64, tol: f64, symmetric: bool) -> Result<(Vec<C64>, ContourSpec)> {
        let t_eff = t - self.shift_support();
        if !(t_eff > 0.0) {
            return Err(Error::domain(format!("direct inversion needs t > {}", self.shift_support())));
        }
        let spec = ContourSpec::with_decay_time(t, t_eff, delta, tol);
        Ok((contour_invert(|s| self.transform(s), self.dims(), &spec, symmetric), spec))
    }
}

/// Barycentric interpolation on Chebyshev points of the second kind.
fn barycentric(nodes: &[f64], vals: &[Vec<f64>], x: f64, d: usize) -> Vec<f64> {
    let n = nodes.len();
    let mut num = vec![0.0; d];
    let mut den = 0.0;
    for (i, (&xi, v)) in nodes.iter().zip(vals).enumerate() {
        let dx = x - xi;
        if dx == 0.0 {
            return v.clone();
        }
        let mut w = if i % 2 == 0 { 1.0 } else { -1.0 };
        if i == 0 || i == n - 1 {
            w *= 0.5;
        }
        let c = w / dx;
        num.iter_mut().zip(v).for_each(|(a, b)| *a += c * b);
        den += c;
    }
    num.iter().map(|a| a / den).collect()
}

/// Exponent fits of the pointwise envelopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeRegime {
    pub x_ratio: f64,
    pub y_ratio: f64,
    /// `None` where the kernel vanishes identically.
    pub t_exponent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelEnvelopeReport {
    pub kind: KernelKind,
    pub j: usize,
    pub k: usize,
    pub mu: f64,
    pub predicted_t: f64,
    pub regimes: Vec<EnvelopeRegime>,
    pub worst_t_deviation: f64,
    /// Fitted and stated powers of `1+|x|/√t`, `1+|y|/√t`, `|y|/(|y|+√t)`.
    /// `None` where the kernel vanishes on the fit points.
    pub x_far: (Option<f64>, f64),
    pub y_far: (Option<f64>, f64),
    pub y_near: (Option<f64>, f64),
    /// False for `μ_j = 1` or `μ_j ≥ min(λ₁,μ₂)+1`: only the weaker log-loss envelope applies.
    pub clean_hypothesis: bool,
    pub passed: bool,
}

const SERIES_TERMS: usize = 30;
pub const ENVELOPE_TOL: f64 = 0.15;

/// Fits the envelope exponents at zero derivative order.
///
/// The `t` power is fitted at fixed `|x|/√t`, `|y|/√t` on the lattice
/// `ratios² × times`; the spatial powers are fitted at `t = 1` with the other
/// point at distance 1. Spatial powers are upper bounds and are checked one-sided.
pub fn kernel_envelope_check(
    fam: &KernelFamily,
    kind: KernelKind,
    mu2: f64,
    x_dir: (f64, f64),
    y_dir: (f64, f64),
    ratios: &[f64],
    times: &[f64],
) -> Result<KernelEnvelopeReport> {
    let norm = |x: f64, y: f64, t: f64| -> Result<f64> {
        let px = SpatialPoint::new(x, x_dir.0, x_dir.1);
        let py = SpatialPoint::new(y, y_dir.0, y_dir.1);
        Ok(fam.kernel(kind, &px, &py)?.evaluate(t, 0)?.norm())
    };
    let mut regimes = Vec::new();
    let predicted_t = kind.t_exponent();
    let mut worst: f64 = 0.0;
    for &xr in ratios {
        for &yr in ratios {
            let mut pts = Vec::new();
            for &t in times {
                let v = norm(xr * t.sqrt(), yr * t.sqrt(), t)?;
                if v > 0.0 {
                    pts.push((t.ln(), v.ln()));
                }
            }
            let e = (pts.len() == times.len()).then(|| fit_slope(&pts));
            if let Some(e) = e {
                worst = worst.max((e - predicted_t).abs());
            }
            regimes.push(EnvelopeRegime { x_ratio: xr, y_ratio: yr, t_exponent: e });
        }
    }
    let (xb, yfb, ynb) = kind.envelope_powers(fam.mu, fam.lambda1);
    let fit = |f: &dyn Fn(f64) -> Result<(f64, f64)>, zs: &[f64]| -> Result<Option<f64>> {
        let pts = zs.iter().map(|&z| f(z)).collect::<Result<Vec<_>>>()?;
        Ok(pts.iter().all(|p| p.1.is_finite()).then(|| fit_slope(&pts)))
    };
    let far = [8.0, 16.0, 32.0];
    let near = [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0];
    let x_far = fit(&|z| Ok(((1.0 + z).ln(), norm(z, 1.0, 1.0)?.ln())), &far)?;
    let y_far = fit(&|z| Ok(((1.0 + z).ln(), norm(1.0, z, 1.0)?.ln())), &far)?;
    let y_near = fit(&|z| Ok(((z / (1.0 + z)).ln(), norm(1.0, z, 1.0)?.ln())), &near)?;
    let passed = worst <= ENVELOPE_TOL
        && x_far.map_or(true, |e| e <= xb + ENVELOPE_TOL)
        && y_far.map_or(true, |e| e <= yfb + ENVELOPE_TOL)
        && y_near.map_or(true, |e| e >= ynb - ENVELOPE_TOL);
    Ok(KernelEnvelopeReport {
        kind,
        j: fam.j,
        k: fam.k,
        mu: fam.mu,
        predicted_t,
        regimes,
        worst_t_deviation: worst,
        x_far: (x_far, xb),
        y_far: (y_far, yfb),
        y_near: (y_near, ynb),
        clean_hypothesis: fam.clean_hypothesis(mu2),
        passed,
    })
}

/// Piecewise-linear time profile starting at `(0, 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeProfile {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl TimeProfile {
    /// Knots `τ_k` and slope jumps `c_k` with `h = Σ c_k (τ − τ_k)₊`.
    fn hinges(&self) -> Result<Vec<(f64, f64)>> {
        let (ts, vs) = (&self.times, &self.values);
        if ts.len() != vs.len() || ts.len() < 2 {
            return Err(Error::data("time profile needs at least two samples of equal length"));
        }
        if ts[0] != 0.0 || vs[0] != 0.0 {
            return Err(Error::data("time profile must start at (0, 0)"));
        }
        if ts.windows(2).any(|w| !(w[1] > w[0])) || vs.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("time samples must be increasing and finite"));
        }
        let mut prev = 0.0;
        let mut out = Vec::new();
        for i in 0..ts.len() - 1 {
            let slope = (vs[i + 1] - vs[i]) / (ts[i + 1] - ts[i]);
            out.push((ts[i], slope - prev));
            prev = slope;
        }
        Ok(out)
    }
}

/// `f = F(y)h(τ)`, `g = G(y)h(τ)` with `F = b·force`, `G = b·divergence`,
/// `b = (1 − |y−c|²/h²)⁴₊`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeDataTerm {
    pub center: [f64; 3],
    pub radius: f64,
    pub force: [f64; 3],
    pub divergence: f64,
    pub profile: TimeProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TimeData {
    pub terms: Vec<TimeDataTerm>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeTermKind {
    /// Velocity term `∫∫ K_u f + H_u g`.
    S,
    /// Pressure term `∫∫ K_p·f + H g`.
    T,
}

/// Kernel paired with `g` in the pressure term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PressureReading {
    #[default]
    Hp,
    /// The literal variant with `H_u`.
    Hu,
}

/// Spatial rule for the data bumps: Gauss in radius and polar angle, uniform in azimuth.
fn data_rule(c: [f64; 3], h: f64, n: usize) -> Vec<([f64; 3], f64)> {
    if n == 0 {
        return ball_rule(c, h);
    }
    let (rs, wr) = gl(0.0, h, n);
    let (ts, wt) = gl(0.0, PI, n);
    let nphi = 2 * n;
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

fn check_ball(cone: &ConeSpec, c: [f64; 3], h: f64) -> Result<()> {
    let p = SpatialPoint::from_cartesian(c);
    if !(h > 0.0 && p.r > h && p.theta + (h / p.r).asin() < cone.half_angle) {
        return Err(Error::domain("data ball must lie inside the cone away from the vertex"));
    }
    Ok(())
}

/// `S^{(j,k)}(x,t)` (3 components) or `T^{(j,k)}(x,t)` (1 component).
///
/// The convolution in `τ` is exact for piecewise-linear profiles: each hinge
/// `(τ−τ_k)₊` contributes the twice-integrated kernel at `t − τ_k`, which also
/// captures the instantaneous parts of the kernels at `t' = 0`. `nodes = 0`
/// selects the dense ball rule.
pub fn time_term(
    fam: &KernelFamily,
    which: TimeTermKind,
    x: &SpatialPoint,
    t: f64,
    data: &TimeData,
    reading: PressureReading,
    nodes: usize,
) -> Result<Vec<f64>> {
    let (kf, kg) = match (which, reading) {
        (TimeTermKind::S, _) => (KernelKind::Ku, KernelKind::Hu),
        (TimeTermKind::T, PressureReading::Hp) => (KernelKind::Kp, KernelKind::Hp),
        (TimeTermKind::T, PressureReading::Hu) => {
            return Err(Error::contract("H_u is vector-valued and cannot enter the scalar pressure term"))
        }
    };
    let dim = if which == TimeTermKind::S { 3 } else { 1 };
    let mut out = vec![0.0; dim];
    for term in &data.terms {
        check_ball(&fam.cone, term.center, term.radius)?;
        let hinges = term.profile.hinges()?;
        let horizon = *term.profile.times.last().unwrap_or(&0.0);
        if t > horizon {
            return Err(Error::domain(format!("t = {t} beyond the sampled horizon {horizon}")));
        }
        let use_g = term.divergence != 0.0;
        let use_f = term.force.iter().any(|v| *v != 0.0) && !(fam.exact_dual);
        for (yc, w) in data_rule(term.center, term.radius, nodes) {
            let b = bump_jet(yc, term.center, term.radius).0;
            if b == 0.0 {
                continue;
            }
            let y = SpatialPoint::from_cartesian(yc);
            let ef = if use_f { Some(fam.kernel(kf, x, &y)?) } else { None };
            let eg = if use_g { Some(fam.kernel(kg, x, &y)?) } else { None };
            for &(tk, ck) in hinges.iter().filter(|(tk, ck)| *tk < t && *ck != 0.0) {
                let wt = w * b * ck;
                if let Some(e) = &ef {
                    let r = e.evaluate(t - tk, 2)?.value;
                    for (i, o) in out.iter_mut().enumerate() {
                        *o += wt * (0..3).map(|c| r[i * 3 + c] * term.force[c]).sum::<f64>();
                    }
                }
                if let Some(e) = &eg {
                    let r = e.evaluate(t - tk, 2)?.value;
                    for (i, o) in out.iter_mut().enumerate() {
                        *o += wt * r[i] * term.divergence;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `∫ K(x,y,t) F(y) dy` for one spatial bump: the instantaneous response.
pub fn kernel_against_bump(fam: &KernelFamily, kind: KernelKind, x: &SpatialPoint, t: f64, term: &TimeDataTerm, nodes: usize) -> Result<Vec<f64>> {
    check_ball(&fam.cone, term.center, term.radius)?;
    let (ra, rb) = kind.shape();
    let mut out = vec![0.0; ra];
    for (yc, w) in data_rule(term.center, term.radius, nodes) {
        let b = bump_jet(yc, term.center, term.radius).0;
        if b == 0.0 {
            continue;
        }
        let y = SpatialPoint::from_cartesian(yc);
        let r = fam.kernel(kind, x, &y)?.evaluate(t, 0)?.value;
        let amp: Vec<f64> = if rb == 3 { term.force.to_vec() } else { vec![term.divergence] };
        for (i, o) in out.iter_mut().enumerate() {
            *o += w * b * (0..rb).map(|c| r[i * rb + c] * amp[c]).sum::<f64>();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neumann::neumann_spectrum;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_3};

    fn family(theta0: f64, j: usize) -> (KernelFamily, f64) {
        let cone = ConeSpec::new(theta0).unwrap();
        let sp = neumann_spectrum(&cone, 3.0, 3).unwrap();
        let fam = KernelFamily::new(&cone, &sp, j, 1, 1.0, Mollifier::new(DEFAULT_MOMENTS).unwrap()).unwrap();
        (fam, sp.get(2).unwrap().mu)
    }

    fn max_diff(a: &[f64], b: &[C64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y.re).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn reciprocal_gamma_at_half_integers() {
        let sp = PI.sqrt();
        assert!((rgamma_half(1) - 1.0 / sp).abs() < 1e-15);
        assert!((rgamma_half(-1) + 0.5 / sp).abs() < 1e-15);
        assert!((rgamma_half(3) - 2.0 / sp).abs() < 1e-15);
        assert!((rgamma_half(-3) - 0.75 / sp).abs() < 1e-15);
        assert!((rgamma_half(6) - 0.5).abs() < 1e-15);
        assert_eq!(rgamma_half(0), 0.0);
        assert_eq!(rgamma_half(-4), 0.0);
    }

    #[test]
    fn mollifier_moments() {
        for n in 0..=5 {
            let m = Mollifier::new(n).unwrap();
            assert!((m.moment(0) - 1.0).abs() < 1e-12, "N={n}");
            for j in 1..=n {
                assert!(m.moment(j).abs() < 1e-12, "N={n} j={j}: {}", m.moment(j));
            }
            let z = C64::new(0.0, 0.0);
            assert!((m.transform(z) - 1.0).norm() < 1e-12);
            for j in 1..=n {
                assert!(m.transform_deriv(z, j).norm() < 1e-12);
            }
        }
        assert!(Mollifier::new(13).is_err());
        let m = Mollifier::new(2).unwrap();
        for z in [C64::new(0.9, 0.1), C64::new(0.2, -0.6), C64::new(1e-3, 1e-3)] {
            let direct = C64::new(1.0, 0.0) - m.transform(z);
            assert!((m.cut(z) - direct).norm() < 1e-14);
        }
        let z = C64::new(1e-8, 0.0);
        assert!((m.cut(z) / z.powi(3) - m.moment(3) / 6.0).norm() < 1e-9);
    }

    #[test]
    fn mollifier_derivatives_match_differences() {
        let m = Mollifier::new(2).unwrap();
        let h = 1e-4;
        for t in [0.2, 0.45, 0.7] {
            let d1 = (m.value(t + h) - m.value(t - h)) / (2.0 * h);
            let d2 = (m.value(t + h) - 2.0 * m.value(t) + m.value(t - h)) / (h * h);
            assert!((d1 - m.deriv(t, 1)).abs() < 1e-6 * m.deriv(t, 1).abs().max(1.0));
            assert!((d2 - m.deriv(t, 2)).abs() < 1e-4 * m.deriv(t, 2).abs().max(1.0));
        }
    }

    #[test]
    fn transform_decays_faster_than_any_power() {
        let m = Mollifier::new(2).unwrap();
        for dir in [C64::new(1.0, 0.0), C64::new(0.0, 1.0), C64::from_polar(1.0, 1.0)] {
            for j in 0..=2 {
                let pts: Vec<(f64, f64)> =
                    [10.0, 100.0, 1000.0].iter().map(|&a: &f64| (a.ln(), m.transform_deriv(dir * a, j).norm().max(1e-300).ln())).collect();
                assert!(fit_slope(&pts) <= -3.0 + 0.1, "dir {dir} j {j}: {}", fit_slope(&pts));
            }
        }
    }

    #[test]
    fn known_pair_on_the_contour() {
        for sym in [true, false] {
            for i in 0..=40 {
                let t = 0.1 * 100f64.powf(i as f64 / 40.0);
                let spec = ContourSpec::default_for(t).unwrap();
                let v = contour_invert(|s| vec![1.0 / (s + 1.0)], 1, &spec, sym)[0];
                assert!((v - (-t).exp()).norm() <= 1e-10, "t={t}: {v}");
            }
        }
        // complex exponent, no reflection symmetry
        let a = C64::new(1.0, 0.5);
        for t in [0.1, 1.0, 10.0] {
            let spec = ContourSpec::default_for(t).unwrap();
            let v = contour_invert(|s| vec![1.0 / (s + a)], 1, &spec, false)[0];
            assert!((v - (-a * t).exp()).norm() <= 1e-10);
        }
    }

    #[test]
    fn truncation_within_tail_bound() {
        let t = 1.0;
        let mut spec = ContourSpec::new(t, DEFAULT_DELTA, 1e-4).unwrap();
        let f = |s: C64| vec![1.0 / (s + 1.0)];
        let short = contour_invert(f, 1, &spec, true)[0];
        let bound = spec.tail_bound(1.0 / spec.sigma_max);
        spec.sigma_max *= 2.0;
        let long = contour_invert(f, 1, &spec, true)[0];
        let diff = (short - long).norm();
        assert!(diff <= bound && diff > 0.0, "{diff} vs {bound}");
    }

    #[test]
    fn vertical_line_fallback() {
        let v = vertical_invert(|s| vec![1.0 / (s + 1.0)], 1, 1.0, 1, 0.5, 2e4).unwrap()[0];
        assert!((v - (1.0 - (-1.0f64).exp())).abs() < 1e-4, "{v}");
        assert!(vertical_invert(|s| vec![s], 1, 1.0, 0, 0.5, 10.0).is_err());
    }

    #[test]
    fn laplace_kernels_have_rank_one_and_vanish_at_the_vertex() {
        let (fam, _) = family(FRAC_PI_3, 2);
        let x = SpatialPoint::new(1.2, 0.4, 0.3);
        let y = SpatialPoint::new(0.7, 0.9, 2.0);
        let e = fam.kernel(KernelKind::Ku, &x, &y).unwrap();
        let k = e.transform(C64::new(0.8, 1.7));
        let scale = k.iter().map(|z| z.norm()).fold(0.0, f64::max);
        for (a, b) in [(0, 1), (1, 2), (0, 2)] {
            for (c, d) in [(0, 1), (1, 2)] {
                let minor = k[a * 3 + c] * k[b * 3 + d] - k[a * 3 + d] * k[b * 3 + c];
                assert!(minor.norm() < 1e-13 * scale * scale);
            }
        }
        let near = fam.kernel(KernelKind::Hp, &SpatialPoint::new(1e-3, 0.4, 0.3), &y).unwrap();
        let far = fam.kernel(KernelKind::Hp, &SpatialPoint::new(1.0, 0.4, 0.3), &y).unwrap();
        let s = C64::new(0.3, 0.2);
        // (1 − ψ̃(s r²)) = O((s r²)³) for N = 2
        let ratio = near.transform(s)[0].norm() / far.transform(s)[0].norm();
        assert!(ratio < 1e-6, "{ratio}");
    }

    #[test]
    fn constant_dual_kernels() {
        let (fam, _) = family(FRAC_PI_2, 1);
        assert!(fam.exact_dual);
        let x = SpatialPoint::new(1.1, 0.5, 0.4);
        let y = SpatialPoint::new(0.6, 0.3, 1.0);
        for kind in [KernelKind::Ku, KernelKind::Kp] {
            let e = fam.kernel(kind, &x, &y).unwrap();
            assert!(e.evaluate(0.4, 0).unwrap().value.iter().all(|v| *v == 0.0));
        }
        // H_p = p₀(x)|Ω|^{−1/2} a⁻² ψ'(t/a); ψ' by differences as the oracle
        let e = fam.kernel(KernelKind::Hp, &x, &y).unwrap();
        let cone = fam.cone;
        let sp = neumann_spectrum(&cone, 3.0, 3).unwrap();
        let p0 = pair_expansion(&cone, &sp, -1, 1, 0).unwrap().evaluate(&x, C64::new(1.0, 0.0)).1.re;
        let q = cone.cap_area.powf(-0.5);
        let a = x.r * x.r;
        let m = &fam.mollifier;
        let h = 1e-4;
        for f in [0.15, 0.4, 0.63, 0.9] {
            let t = f * a;
            let d = (8.0 * (m.value(f + h) - m.value(f - h)) - (m.value(f + 2.0 * h) - m.value(f - 2.0 * h))) / (12.0 * h);
            let want = p0 * q * d / (a * a);
            let got = e.evaluate(t, 0).unwrap().value[0];
            assert!((got - want).abs() <= 1e-8 * want.abs().max(1e-3), "{f}: {got} vs {want}");
        }
        assert_eq!(e.evaluate(1.5 * a, 0).unwrap().value[0], 0.0);
    }

    #[test]
    fn split_route_matches_direct_contour() {
        let (fam, _) = family(FRAC_PI_3, 2);
        let cases = [
            (SpatialPoint::new(1.0, 0.3, 0.2), SpatialPoint::new(0.8, 0.5, 1.1)),
            // x in the boundary layer
            (SpatialPoint::new(1.0, 0.95, 0.2), SpatialPoint::new(0.8, 0.5, 1.1)),
        ];
        for (x, y) in cases {
            for kind in KernelKind::ALL {
                let e = fam.kernel(kind, &x, &y).unwrap();
                let t = 1.2 * e.shift_support() + 0.5;
                let split = e.evaluate(t, 0).unwrap();
                let (direct, _) = e.evaluate_direct(t, DEFAULT_DELTA, 1e-13, true).unwrap();
                let scale = split.norm();
                // the closed-form part has an absolute floor near 1e-11
                assert!(max_diff(&split.value, &direct) <= 1e-8 * scale + 1e-10, "{kind:?} {}", max_diff(&split.value, &direct));
                assert!(split.error <= 1e-8 * scale.max(1e-12));
            }
        }
    }

    #[test]
    fn kernels_are_real() {
        let (fam, _) = family(FRAC_PI_3, 2);
        let x = SpatialPoint::new(0.9, 0.2, 0.7);
        let y = SpatialPoint::new(0.5, 0.6, 2.5);
        for kind in KernelKind::ALL {
            let e = fam.kernel(kind, &x, &y).unwrap();
            let (v, _) = e.evaluate_direct(2.0, DEFAULT_DELTA, 1e-13, false).unwrap();
            let scale = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
            assert!(v.iter().all(|z| z.im.abs() <= 1e-10 * scale.max(1e-300)));
        }
    }

    #[test]
    fn antiderivative_of_the_kernel() {
        // m = 1 gives ∫₀ᵗ K; its difference quotient must return the kernel
        let (fam, _) = family(FRAC_PI_3, 2);
        let e = fam.kernel(KernelKind::Ku, &SpatialPoint::new(0.9, 0.2, 0.7), &SpatialPoint::new(0.5, 0.6, 2.5)).unwrap();
        let h = 1e-3;
        let at = |t: f64| e.evaluate(t, 1).unwrap().value;
        for t in [0.2, 0.6, 1.3] {
            let k = e.evaluate(t, 0).unwrap().value;
            let (u1, d1, u2, d2) = (at(t + h), at(t - h), at(t + 2.0 * h), at(t - 2.0 * h));
            let scale = k.iter().map(|v| v.abs()).fold(0.0, f64::max);
            for i in 0..9 {
                let d = (8.0 * (u1[i] - d1[i]) - (u2[i] - d2[i])) / (12.0 * h);
                assert!((d - k[i]).abs() <= 1e-5 * scale, "t={t}: {d} vs {}", k[i]);
            }
        }
    }

    #[test]
    fn pointwise_envelopes() {
        let (fam, mu2) = family(FRAC_PI_3, 2);
        for kind in KernelKind::ALL {
            let r = kernel_envelope_check(&fam, kind, mu2, (0.3, 0.2), (0.5, 1.1), &[0.5, 1.0, 2.0], &[0.25, 1.0, 4.0]).unwrap();
            assert!(r.clean_hypothesis);
            assert!(r.passed, "{r:?}");
            assert!(r.worst_t_deviation <= ENVELOPE_TOL);
            assert!(r.regimes.iter().all(|g| g.t_exponent.is_some()));
        }
        let (hemi, mu2) = family(FRAC_PI_2, 2);
        assert!(!hemi.clean_hypothesis(mu2));
    }

    #[test]
    fn time_terms() {
        let (fam, _) = family(FRAC_PI_3, 1);
        let x = SpatialPoint::new(1.5, 0.2, 0.0);
        let base = TimeDataTerm {
            center: [0.0, 0.2, 1.8],
            radius: 0.3,
            force: [0.0; 3],
            divergence: 1.0,
            profile: TimeProfile { times: vec![0.0, 4.0], values: vec![0.0, 0.0] },
        };
        let zero = TimeData { terms: vec![base.clone()] };
        let v = time_term(&fam, TimeTermKind::S, &x, 2.0, &zero, PressureReading::Hp, 4).unwrap();
        assert!(v.iter().all(|c| *c == 0.0));
        assert!(time_term(&fam, TimeTermKind::S, &x, 5.0, &zero, PressureReading::Hp, 4).is_err());
        assert!(time_term(&fam, TimeTermKind::T, &x, 2.0, &zero, PressureReading::Hu, 4).is_err());

        // mollified impulse at τ = 0 converges to the kernel applied to the bump
        let t = 0.9;
        let impulse = |eps: f64| {
            let m = &fam.mollifier;
            let mut times: Vec<f64> = (0..=64).map(|i| eps * i as f64 / 64.0).collect();
            let mut values: Vec<f64> = times.iter().map(|&s| m.value(s / eps) / eps).collect();
            times.push(4.0);
            values.push(0.0);
            TimeData { terms: vec![TimeDataTerm { profile: TimeProfile { times, values }, ..base.clone() }] }
        };
        let limit = kernel_against_bump(&fam, KernelKind::Hu, &x, t, &base, 4).unwrap();
        let err = |eps: f64| {
            let v = time_term(&fam, TimeTermKind::S, &x, t, &impulse(eps), PressureReading::Hp, 4).unwrap();
            v.iter().zip(&limit).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let (e1, e2) = (err(0.08), err(0.04));
        assert!(e2 < e1 && e2 < 1e-2 * limit.iter().map(|v| v.abs()).fold(0.0, f64::max), "{e1} {e2}");

        // linearity in the data
        let d1 = impulse(0.05);
        let mut d2 = d1.clone();
        d2.terms[0].divergence = -2.5;
        let mut both = d1.clone();
        both.terms.extend(d2.terms.clone());
        let s1 = time_term(&fam, TimeTermKind::T, &x, t, &d1, PressureReading::Hp, 3).unwrap();
        let s2 = time_term(&fam, TimeTermKind::T, &x, t, &d2, PressureReading::Hp, 3).unwrap();
        let sb = time_term(&fam, TimeTermKind::T, &x, t, &both, PressureReading::Hp, 3).unwrap();
        assert!((sb[0] - s1[0] - s2[0]).abs() <= 1e-12 * sb[0].abs().max(1e-12));
    }

    #[test]
    fn kind_names_parse() {
        for k in KernelKind::ALL {
            assert_eq!(k.name().parse::<KernelKind>().unwrap(), k);
        }
        assert!("Kq".parse::<KernelKind>().is_err());
    }
}
