//! Acceptance checks shared by the test suite and the `verify` command.
//!
//! Each check compares the library against an independent route: exact
//! rational arithmetic, a dense collocation eigensolve, hand-derived tables,
//! closed-form transform pairs or exact scaling laws.

use crate::coeffs::*;
use crate::geometry::*;
use crate::kernels::*;
use crate::neumann::*;
use crate::poly::*;
use crate::singular::*;
use crate::stokes::*;
use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, FRAC_PI_3, PI};
use std::time::Instant;

/// Criteria that cannot be met as stated, with the reason.
pub const KNOWN_RED: &[(usize, &str)] = &[(
    6,
    "on r in [1, 10]/sqrt|s| all residual levels of order N+2 and above have comparable size, \
     so a single power is not yet visible; the fit matches mu-N-2 to 0.02 on [10, 100]/sqrt|s|",
)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub id: usize,
    pub name: String,
    pub passed: bool,
    /// Failure is documented and expected.
    pub known_red: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    /// Status other than the documented one.
    pub fn unexpected(&self) -> bool {
        self.passed == self.known_red
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn narrow() -> (ConeSpec, NeumannSpectrum) {
    let cone = ConeSpec::new(FRAC_PI_3).unwrap();
    let sp = neumann_spectrum(&cone, 3.0, 3).unwrap();
    (cone, sp)
}

fn hemi() -> (ConeSpec, NeumannSpectrum) {
    let cone = ConeSpec::hemisphere();
    let sp = neumann_spectrum(&cone, 3.0, 4).unwrap();
    (cone, sp)
}

fn c1_polynomials() -> Outcome {
    let mut bad = Vec::new();
    for k in 0..=10 {
        let b = boundary_polynomials(k).unwrap();
        if b.identity_defects().iter().any(|d| !d.0.is_empty()) {
            bad.push(k);
        }
    }
    outcome(bad.is_empty(), format!("k = 0..10 exact in rationals, failing k: {bad:?}"))
}

/// Chebyshev points and differentiation matrix on `[a, b]`.
fn cheb(a: f64, b: f64, n: usize) -> (Vec<f64>, DMatrix<f64>) {
    let t: Vec<f64> = (0..=n).map(|j| (PI * j as f64 / n as f64).cos()).collect();
    let c = |j: usize| if j == 0 || j == n { 2.0 } else { 1.0 } * if j % 2 == 0 { 1.0 } else { -1.0 };
    let mut d = DMatrix::zeros(n + 1, n + 1);
    for i in 0..=n {
        for j in 0..=n {
            if i != j {
                d[(i, j)] = c(i) / c(j) / (t[i] - t[j]);
            }
        }
    }
    for i in 0..=n {
        let s: f64 = (0..=n).filter(|&j| j != i).map(|j| d[(i, j)]).sum();
        d[(i, i)] = -s;
    }
    let h = 0.5 * (b - a);
    (t.iter().map(|x| a + h * (x + 1.0)).collect(), d / h)
}

/// Neumann eigenvalues of order `m` from a dense collocation of the equation
/// for `Q = ψ / sin^m θ` in `x = cos θ`, with the Neumann row eliminated.
fn dense_oracle(theta0: f64, m: usize, n: usize) -> Vec<f64> {
    let x0 = theta0.cos();
    let (x, d) = cheb(x0, 1.0, n);
    let d2 = &d * &d;
    let mf = m as f64;
    let mut a = DMatrix::zeros(n + 1, n + 1);
    for i in 0..=n {
        for j in 0..=n {
            a[(i, j)] = (1.0 - x[i] * x[i]) * d2[(i, j)] - 2.0 * (mf + 1.0) * x[i] * d[(i, j)];
        }
        a[(i, i)] -= mf * (mf + 1.0);
    }
    // ψ'(θ0) = 0 ⇔ (1−x0²)Q'(x0) − m x0 Q(x0) = 0; x0 is the last node
    let k = n;
    let mut bc: Vec<f64> = (0..=n).map(|j| (1.0 - x0 * x0) * d[(k, j)]).collect();
    bc[k] -= mf * x0;
    let keep: Vec<usize> = (0..=n).filter(|&j| j != k).collect();
    let red = DMatrix::from_fn(n, n, |i, j| {
        let (r, c) = (keep[i], keep[j]);
        a[(r, c)] - a[(r, k)] * bc[c] / bc[k]
    });
    let mut mus: Vec<f64> = red
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() < 1e-8 && -z.re > -0.25)
        .map(|z| 0.5 * (-1.0 + (1.0 - 4.0 * z.re).sqrt()))
        .collect();
    mus.sort_by(|a, b| a.partial_cmp(b).unwrap());
    mus
}

fn c2_hemisphere_spectrum() -> Outcome {
    let sp = neumann_spectrum(&ConeSpec::hemisphere(), 4.2, 6).unwrap();
    let got: Vec<(f64, usize)> = sp.eigenvalues.iter().filter(|e| e.mu <= 4.0 + 1e-6).map(|e| (e.mu, e.multiplicity)).collect();
    let mults: Vec<usize> = got.iter().map(|g| g.1).collect();
    let mut worst: f64 = 0.0;
    let mut oracle_mult = vec![0usize; 5];
    for m in 0..=6 {
        for mu in dense_oracle(FRAC_PI_2, m, 48) {
            if mu > 4.5 {
                continue;
            }
            let near = got.iter().map(|g| (g.0 - mu).abs()).fold(f64::INFINITY, f64::min);
            worst = worst.max(near);
            oracle_mult[mu.round() as usize] += if m == 0 { 1 } else { 2 };
        }
    }
    let first_exact = sp.eigenvalues[0].mu == 0.0 && sp.eigenvalues[0].index == 1;
    let neg = sp.eigenvalues[0].negative_branch().unwrap().mu == -1.0;
    // no eigenvalue of either branch strictly inside (−1, 0)
    let gap = sp.eigenvalues.iter().all(|e| e.mu >= 0.0 && -1.0 - e.mu <= -1.0);
    let pass = mults == vec![1, 2, 3, 4, 5] && oracle_mult == mults && worst <= 1e-8 && first_exact && neg && gap;
    outcome(pass, format!("multiplicities {mults:?}, oracle {oracle_mult:?}, max |μ − oracle| = {worst:.1e}, μ₁ = 0 exact: {first_exact}, gap: {}", gap && neg))
}

fn c3_pencil() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for th in [FRAC_PI_3, FRAC_PI_2] {
        let sp = discretized_pencil_spectrum(&ConeSpec::new(th).unwrap(), (-2.0, 1.0), 3, 12).unwrap();
        let re: Vec<f64> = sp.roots.iter().map(|r| r.lambda.re).collect();
        let has = |v: f64| sp.roots.iter().any(|r| (r.lambda - v).norm() <= 1e-4);
        let others = sp.roots.iter().filter(|r| (r.lambda + 2.0).norm() > 1e-4 && (r.lambda - 1.0).norm() > 1e-4).count();
        let ok = has(1.0) && has(-2.0) && others == 0 && sp.undecided.is_empty();
        pass &= ok;
        lines.push(format!("θ0 = {th:.4}: roots {re:?}, others {others}"));
    }
    outcome(pass, lines.join("; "))
}

fn c4_classifier() -> Outcome {
    use WeightStatus::*;
    let gen_a = StokesPencilData::user(0.8, true, 1.5).unwrap();
    let gen_b = StokesPencilData::user(0.6, true, 1.2).unwrap();
    let sp_a = StokesPencilData::user(1.0, true, 3.0).unwrap();
    let sp_b = StokesPencilData::user(1.0, true, 2.5).unwrap();
    let sp_c = StokesPencilData::user(1.0, true, 2.2).unwrap();
    let multi = StokesPencilData::user(1.0, false, 2.0).unwrap();
    // expected verdicts worked out by hand from the interval endpoints
    let table: Vec<(&StokesPencilData, f64, f64, WeightStatus)> = vec![
        // λ₁ = 0.8, μ₂ = 0.9: iso on (−0.3, 0.5), zero-mean iso on (0.5, 1.4)
        (&gen_a, 0.9, 0.0, IsoOntoEX),
        (&gen_a, 0.9, -0.2, IsoOntoEX),
        (&gen_a, 0.9, 0.49, IsoOntoEX),
        (&gen_a, 0.9, 0.5, NotFredholm),
        (&gen_a, 0.9, 0.6, IsoOntoEXTilde),
        (&gen_a, 0.9, 1.3, IsoOntoEXTilde),
        (&gen_a, 0.9, 1.5, OutsideTheory),
        (&gen_a, 0.9, -0.4, OutsideTheory),
        (&gen_a, 0.9, -0.3, NotFredholm),
        (&gen_a, 0.9, -0.5, NotFredholm),
        // λ₁ = 0.6, μ₂ = 2: upper end min(2.5, 2.1) = 2.1
        (&gen_b, 2.0, 2.0, IsoOntoEXTilde),
        (&gen_b, 2.0, 2.2, OutsideTheory),
        (&gen_b, 2.0, -0.05, IsoOntoEX),
        (&gen_b, 2.0, -0.15, OutsideTheory),
        // λ₁ = 1 simple, μ₂ = 2.5, Re λ₂ = 3
        (&sp_a, 2.5, 0.0, IsoOntoEX),
        (&sp_a, 2.5, -2.0, IsoOntoEX),
        (&sp_a, 2.5, -0.5, NotFredholm),
        (&sp_a, 2.5, 0.5, NotFredholm),
        (&sp_a, 2.5, 2.5, NotFredholm),
        (&sp_a, 2.5, 1.0, IsoOntoEXTilde),
        (&sp_a, 2.5, 2.7, IsoOntoEX),
        (&sp_a, 2.5, -2.7, CokernelNontrivial),
        (&sp_a, 2.5, 3.5, CokernelNontrivial),
        (&sp_a, 2.5, -2.5, NotFredholm),
        (&sp_a, 2.5, 5.0, OutsideTheory),
        (&sp_a, 2.5, -3.5, OutsideTheory),
        // λ₁ = 1 simple, μ₂ = 1, Re λ₂ = 2.5: kernel below, cokernel above
        (&sp_b, 1.0, -1.7, KernelNontrivial),
        (&sp_b, 1.0, -1.0, IsoOntoEX),
        (&sp_b, 1.0, 1.2, IsoOntoEXTilde),
        (&sp_b, 1.0, 2.0, CokernelNontrivial),
        (&sp_b, 1.0, 3.0, CokernelNontrivial),
        (&sp_b, 1.0, 2.5, NotFredholm),
        (&sp_b, 1.0, -2.2, OutsideTheory),
        // λ₁ = 1 simple, μ₂ = 4, Re λ₂ = 2.2: kernel above the upper interval
        (&sp_c, 4.0, 4.0, KernelNontrivial),
        (&sp_c, 4.0, 3.0, IsoOntoEX),
        (&sp_c, 4.0, -2.0, CokernelNontrivial),
        (&sp_c, 4.0, -1.0, IsoOntoEX),
        (&sp_c, 4.0, 3.7, NotFredholm),
        (&sp_c, 4.0, 2.0, IsoOntoEXTilde),
        // λ₁ = 1 not simple: only the general intervals apply
        (&multi, 2.5, 2.7, OutsideTheory),
    ];
    let wrong: Vec<String> = table
        .iter()
        .filter_map(|(p, mu2, b, want)| {
            let got = classify_weight(*b, p, *mu2).status;
            (got != *want).then(|| format!("β={b} μ₂={mu2}: {} ≠ {}", got.label(), want.label()))
        })
        .collect();
    outcome(table.len() == 40 && wrong.is_empty(), format!("{} cases, mismatches: {wrong:?}", table.len()))
}

fn c5_boundary_trace() -> Outcome {
    let cone = ConeSpec::hemisphere();
    let s = C64::new(0.7, 1.3);
    let mut worst: f64 = 0.0;
    for (mu, m) in [(0.0, 0), (1.0, 1)] {
        let p = build_profile(mu, m, Parity::Cos, cone.half_angle).unwrap();
        for depth in 0..=2 {
            let e = build_un_pn(&cone, mu, 1, &p, depth).unwrap();
            for i in 0..100 {
                let x = SpatialPoint::new(0.05 + 0.1 * i as f64, FRAC_PI_2, 0.37 * i as f64);
                let (u, _) = e.evaluate(&x, s);
                worst = worst.max(u.iter().map(|z| z.norm()).fold(0.0, f64::max));
            }
        }
    }
    outcome(worst <= 1e-10, format!("max |U_N| on the boundary = {worst:.1e}"))
}

fn c6_envelopes() -> Outcome {
    let (cone, sp) = narrow();
    let e2 = sp.get(2).unwrap();
    let p = build_profile(e2.mu, e2.m_list[0], Parity::Cos, cone.half_angle).unwrap();
    let s = C64::new(1.0, 0.0);
    let mut pass = true;
    let mut parts = Vec::new();
    for depth in 0..=2 {
        let e = build_un_pn(&cone, e2.mu, 2, &p, depth).unwrap();
        let want = e2.mu - depth as f64 - 2.0;
        let near = e.envelope_exponent(s, 1.0, 10.0, 10, false);
        let far = e.envelope_exponent(s, 10.0, 100.0, 10, false);
        pass &= (near - want).abs() <= 0.1;
        parts.push(format!("N={depth}: {near:.3} (want {want:.3}; on [10,100]: {far:.3})"));
    }
    let hp = build_profile(1.0, 1, Parity::Cos, FRAC_PI_2).unwrap();
    let h = build_un_pn(&ConeSpec::hemisphere(), 1.0, 1, &hp, 1).unwrap();
    let rep = h.residual_norm_bounds(s, 0.0, &[1.0, 4.0, 16.0]).unwrap();
    let k = rep.force_exponent.unwrap_or(f64::NAN);
    let want = -0.0 - 1.0 - 0.5;
    pass &= (k - want).abs() <= 0.1;
    parts.push(format!("|s|-exponent {k:.3} (want {want})"));
    outcome(pass, parts.join("; "))
}

fn c7_biorthogonality() -> Outcome {
    let (c, sp) = hemi();
    let s = C64::new(1.0, 0.5);
    let radii = [2.0, 4.0, 8.0, 16.0];
    let mut diag: f64 = 0.0;
    let mut cross: f64 = 0.0;
    for (i, l, j, k) in [(1, 1, 1, 1), (2, 1, 2, 1), (2, 2, 2, 2), (2, 2, 2, 1), (2, 1, 2, 2), (2, 1, 1, 1), (2, 2, 1, 1)] {
        let rep = biorthogonality_check(&c, &sp, (i, l), (j, k), s, &radii, 1.0, None).unwrap();
        if i == j && l == k {
            let mu = sp.get(j as i32).unwrap().mu;
            diag = diag.max((rep.limit + (2.0 * mu + 1.0) / s).norm());
        } else {
            cross = cross.max(rep.limit.norm());
        }
    }
    outcome(diag <= 1e-6 && cross <= 1e-4, format!("diagonal error {diag:.1e}, cross terms {cross:.1e}"))
}

fn c8_coefficients() -> Outcome {
    let s = C64::new(1.0, 0.5);
    let (c, sp) = hemi();
    let spec = ManufactureSpec {
        terms: vec![DataTerm::Seed { j: 1, k: 1, coefficient: C64::new(1.0, 0.0), rho: 4.0, depth: 3 }],
        r_max: 200.0,
    };
    let d = manufacture(&c, &sp, &spec, s).unwrap();
    let dual = DualSingularPair::new(&c, &sp, 1, 1, 1.0, None).unwrap();
    let e1 = (d.coefficient(&dual).value - 1.0).norm();

    let (cone, sp) = narrow();
    let dual = DualSingularPair::new(&cone, &sp, 2, 1, 1.0, Some(1)).unwrap();
    let err = |rho: f64| {
        let spec = ManufactureSpec {
            terms: vec![DataTerm::Seed { j: 2, k: 1, coefficient: C64::new(1.0, 0.0), rho, depth: 2 }],
            r_max: 25.0 * rho,
        };
        (manufacture(&cone, &sp, &spec, s).unwrap().coefficient(&dual).value - 1.0).norm()
    };
    let (a, b) = (err(32.0), err(64.0));
    let rate = (b / a).log2();
    let want = dual.envelope_exponent().unwrap();
    outcome(
        e1 <= 1e-8 && b < a && (rate - want).abs() <= 0.2,
        format!("c₁ error {e1:.1e}; c₂ errors {a:.2e} → {b:.2e}, rate {rate:.3} (want {want})"),
    )
}

fn c9_inversion() -> Outcome {
    let mut worst: f64 = 0.0;
    for i in 0..=60 {
        let t = 0.1 * 100f64.powf(i as f64 / 60.0);
        let spec = ContourSpec::default_for(t).unwrap();
        let v = contour_invert(|s| vec![1.0 / (s + 1.0)], 1, &spec, true)[0];
        worst = worst.max((v.re - (-t).exp()).abs());
    }
    let mut spec = ContourSpec::new(1.0, DEFAULT_DELTA, 1e-4).unwrap();
    let f = |s: C64| vec![1.0 / (s + 1.0)];
    let short = contour_invert(f, 1, &spec, true)[0];
    let bound = spec.tail_bound(1.0 / spec.sigma_max);
    spec.sigma_max *= 2.0;
    let diff = (contour_invert(f, 1, &spec, true)[0] - short).norm();
    outcome(worst <= 1e-10 && diff <= bound, format!("e^(−t) error {worst:.1e} on [0.1, 10]; truncation change {diff:.1e} ≤ bound {bound:.1e}"))
}

fn c10_kernel_envelopes() -> Outcome {
    let (cone, sp) = narrow();
    let fam = KernelFamily::new(&cone, &sp, 2, 1, 1.0, Mollifier::new(DEFAULT_MOMENTS).unwrap()).unwrap();
    let mu2 = sp.get(2).unwrap().mu;
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in KernelKind::ALL {
        let r = kernel_envelope_check(&fam, kind, mu2, (0.3, 0.2), (0.5, 1.1), &[0.5, 1.0, 2.0], &[0.25, 1.0, 4.0]).unwrap();
        let fitted = r.regimes.iter().filter_map(|g| g.t_exponent).fold(f64::NAN, |a, b| if a.is_nan() { b } else { a.min(b) });
        pass &= r.passed && r.worst_t_deviation <= 0.15 && r.regimes.iter().all(|g| g.t_exponent.is_some());
        parts.push(format!("{} {:.3} (want {})", kind.name(), fitted, r.predicted_t));
    }
    outcome(pass, parts.join(", "))
}

fn c11_scaling() -> Outcome {
    let (cone, sp) = narrow();
    let mu = sp.get(2).unwrap().mu;
    let s = C64::from_polar(4.0, 0.4);
    let sh = s / s.norm();
    let dual = DualSingularPair::new(&cone, &sp, 2, 1, 1.0, None).unwrap();
    let coef = |c: C64, z: C64| {
        let spec = ManufactureSpec { terms: vec![DataTerm::Seed { j: 2, k: 1, coefficient: c, rho: 4.0, depth: 1 }], r_max: 60.0 };
        manufacture(&cone, &sp, &spec, z).unwrap().coefficient(&dual).value
    };
    let c_s = coef(C64::new(1.0, 0.0), s);
    let c_h = coef(C64::new(s.norm().powf(mu / 2.0), 0.0), sh) * s.norm().powf(-mu / 2.0);
    let rel_c = (c_s - c_h).norm() / c_s.norm();

    let e2 = sp.get(2).unwrap();
    let p = build_profile(e2.mu, e2.m_list[0], Parity::Cos, cone.half_angle).unwrap();
    let e = build_un_pn(&cone, e2.mu, 2, &p, 2).unwrap();
    let z = C64::new(3.0, 4.0);
    let a = z.norm();
    let mut rel_u: f64 = 0.0;
    for (r, t) in [(0.5, 1.0), (1.7, 1.03), (2.5, 0.3), (0.9, 0.7)] {
        let x = SpatialPoint::new(r, t, 0.7);
        let (u1, p1) = e.evaluate(&x, z);
        let (u2, p2) = e.evaluate(&x.scaled(a.sqrt()), z / a);
        let f = a.powf(-(e.mu + 1.0) / 2.0);
        let un = u1.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for c in 0..3 {
            rel_u = rel_u.max((u1[c] - f * u2[c]).norm() / un);
        }
        rel_u = rel_u.max((p1 - a.powf(-e.mu / 2.0) * p2).norm() / p1.norm());
    }
    outcome(rel_c <= 1e-8 && rel_u <= 1e-8, format!("coefficient homogeneity {rel_c:.1e}, U_N rescaling {rel_u:.1e}"))
}


type Check = (&'static str, fn() -> Outcome);

const CHECKS: [Check; 11] = [
    ("boundary polynomial identities", c1_polynomials),
    ("hemisphere Neumann spectrum", c2_hemisphere_spectrum),
    ("Stokes pencil roots in [-2, 1]", c3_pencil),
    ("weight classifier table", c4_classifier),
    ("boundary trace of U_N", c5_boundary_trace),
    ("residual and norm exponents", c6_envelopes),
    ("biorthogonality limits", c7_biorthogonality),
    ("coefficient recovery", c8_coefficients),
    ("inverse Laplace machinery", c9_inversion),
    ("kernel t-exponents", c10_kernel_envelopes),
    ("scaling laws", c11_scaling),
];

pub fn check_count() -> usize {
    CHECKS.len()
}

/// Run check `id` (1-based).
pub fn run_check(id: usize) -> Option<CheckResult> {
    let (name, f) = CHECKS.get(id.checked_sub(1)?)?;
    let t0 = Instant::now();
    let o = f();
    Some(CheckResult {
        id,
        name: name.to_string(),
        passed: o.pass,
        known_red: KNOWN_RED.iter().any(|k| k.0 == id),
        detail: o.detail,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

pub fn run_all() -> Vec<CheckResult> {
    (1..=CHECKS.len()).filter_map(run_check).collect()
}
