//! Property tests for the structural invariants.

use conestokes::coeffs::*;
use conestokes::geometry::*;
use conestokes::kernels::*;
use conestokes::neumann::*;
use conestokes::poly::*;
use conestokes::singular::*;
use conestokes::stokes::*;
use num_complex::Complex64 as C64;
use proptest::prelude::*;
use std::f64::consts::FRAC_PI_3;
use std::sync::OnceLock;

fn narrow() -> &'static (ConeSpec, NeumannSpectrum) {
    static N: OnceLock<(ConeSpec, NeumannSpectrum)> = OnceLock::new();
    N.get_or_init(|| {
        let cone = ConeSpec::new(FRAC_PI_3).unwrap();
        let sp = neumann_spectrum(&cone, 3.0, 3).unwrap();
        (cone, sp)
    })
}

fn narrow_un(depth: usize) -> Expansion {
    let (cone, sp) = narrow();
    let e = sp.get(2).unwrap();
    let p = build_profile(e.mu, e.m_list[0], Parity::Cos, cone.half_angle).unwrap();
    build_un_pn(cone, e.mu, 2, &p, depth).unwrap()
}

fn pencil() -> impl Strategy<Value = (StokesPencilData, f64)> {
    prop_oneof![
        (0.05f64..0.95, 0.2f64..2.0, 0.1f64..4.0).prop_map(|(l1, gap, mu2)| (StokesPencilData::user(l1, true, l1 + gap).unwrap(), mu2)),
        (1.05f64..4.0, 0.1f64..5.0, any::<bool>()).prop_map(|(r2, mu2, simple)| (StokesPencilData::user(1.0, simple, r2).unwrap(), mu2)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn classifier_is_constant_between_breakpoints((p, mu2) in pencil(), f in 0.01f64..0.99, g in 0.01f64..0.99) {
        let mut bp = classifier_breakpoints(&p, mu2);
        bp.insert(0, bp[0] - 3.0);
        bp.push(bp[bp.len() - 1] + 3.0);
        for w in bp.windows(2) {
            let (a, b) = (w[0], w[1]);
            let s1 = classify_weight(a + f * (b - a), &p, mu2).status;
            let s2 = classify_weight(a + g * (b - a), &p, mu2).status;
            prop_assert_eq!(s1, s2, "interval ({}, {})", a, b);
            prop_assert!(s1 != WeightStatus::NotFredholm);
        }
        for x in fredholm_breakpoints(&p, mu2) {
            prop_assert_eq!(classify_weight(x, &p, mu2).status, WeightStatus::NotFredholm);
        }
    }

    #[test]
    fn classifier_verdicts_are_exclusive((p, mu2) in pencil(), beta in -6.0f64..6.0) {
        let v = classify_weight(beta, &p, mu2).status;
        prop_assert!(!(v.is_iso() && v.is_nontrivial()));
        prop_assert_eq!(v, classify_weight(beta, &p, mu2).status);
        if !p.special_case() {
            prop_assert!(!v.is_nontrivial());
        }
    }

    #[test]
    fn cutoff_depends_on_s_r_squared_only(r in 0.01f64..5.0, arg in -1.5f64..1.5, m in 0.01f64..50.0, k in 0.1f64..10.0) {
        let s = C64::from_polar(m, arg);
        let a = cutoff_eta_s(s, r);
        let b = cutoff_eta_s(C64::from_polar(m * k * k, -arg), r / k);
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn boundary_identities_exact(k in 0usize..=24) {
        let b = boundary_polynomials(k).unwrap();
        for d in b.identity_defects() {
            prop_assert!(d.0.is_empty());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn expansion_rescaling(r in 0.3f64..3.0, th in 0.05f64..1.04, phi in 0.0f64..6.28, m in 0.2f64..30.0, arg in -1.4f64..1.4) {
        let e = narrow_un(2);
        let s = C64::from_polar(m, arg);
        let x = SpatialPoint::new(r, th, phi);
        let (u1, p1) = e.evaluate(&x, s);
        let (u2, p2) = e.evaluate(&x.scaled(m.sqrt()), s / m);
        let f = m.powf(-(e.mu + 1.0) / 2.0);
        let un = u1.iter().map(|z| z.norm()).fold(0.0, f64::max);
        for c in 0..3 {
            prop_assert!((u1[c] - f * u2[c]).norm() <= 1e-9 * un);
        }
        prop_assert!((p1 - m.powf(-e.mu / 2.0) * p2).norm() <= 1e-9 * p1.norm());
    }

    #[test]
    fn surface_form_is_antisymmetric(r in 0.5f64..8.0, m in 0.2f64..5.0, arg in -1.4f64..1.4, k in 1usize..=2) {
        let (cone, sp) = narrow();
        let a = pair_expansion(cone, sp, 2, k, 1).unwrap();
        let b = pair_expansion(cone, sp, -2, k, 0).unwrap();
        let s = C64::from_polar(m, arg);
        let x = bilinear_a(&a, &b, s, r, RadialCut::EtaS);
        let y = bilinear_a(&b, &a, s, r, RadialCut::EtaS);
        prop_assert!((x + y).norm() <= 1e-12 * x.norm().max(1e-300));
        prop_assert!(bilinear_a(&a, &a, s, r, RadialCut::EtaS).norm() <= 1e-12 * x.norm().max(1e-12));
    }

    #[test]
    fn coefficient_index_sets_grow_with_gamma(g1 in 0.0f64..3.5, dg in 0.0f64..2.0, zero_mean in any::<bool>()) {
        let (_, sp) = narrow();
        let a = j_gamma(sp, g1, zero_mean);
        let b = j_gamma(sp, g1 + dg, zero_mean);
        prop_assert!(a.iter().all(|j| b.contains(j)));
    }

    #[test]
    fn coefficients_are_linear(c1 in -2.0f64..2.0, c2 in -2.0f64..2.0, w in -1.0f64..1.0) {
        let (cone, sp) = narrow();
        let s = C64::new(1.0, 0.5);
        let seed = |c: C64| DataTerm::Seed { j: 2, k: 1, coefficient: c, rho: 4.0, depth: 1 };
        let bump = |v: f64| DataTerm::Bump { center: [0.5, 0.2, 6.0], radius: 1.0, velocity: [v, 0.3, -0.2], pressure: 0.5 * v };
        let dual = DualSingularPair::new(cone, sp, 2, 1, 1.0, None).unwrap();
        let coef = |t: Vec<DataTerm>| manufacture(cone, sp, &ManufactureSpec { terms: t, r_max: 30.0 }, s).unwrap().coefficient(&dual).value;
        let both = coef(vec![seed(C64::new(c1, c2)), bump(w)]);
        let sum = coef(vec![seed(C64::new(c1, c2))]) + coef(vec![bump(w)]);
        prop_assert!((both - sum).norm() <= 1e-11 * both.norm().max(1.0));
    }

    #[test]
    fn contour_reproduces_shifted_exponentials(a in 0.0f64..3.0, t in 0.1f64..10.0) {
        let spec = ContourSpec::default_for(t).unwrap();
        let v = contour_invert(|s| vec![1.0 / (s + a)], 1, &spec, true)[0];
        prop_assert!((v.re - (-a * t).exp()).abs() <= 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn kernels_are_homogeneous(k in 0.5f64..2.0, t in 0.3f64..3.0) {
        // K(kx, ky, k²t) = k^(2e) K(x, y, t) with e the t-exponent of the kernel
        let (cone, sp) = narrow();
        let fam = KernelFamily::new(cone, sp, 2, 1, 1.0, Mollifier::new(DEFAULT_MOMENTS).unwrap()).unwrap();
        let x = SpatialPoint::new(0.8, 0.3, 0.2);
        let y = SpatialPoint::new(0.6, 0.5, 1.1);
        for kind in [KernelKind::Ku, KernelKind::Hp] {
            let t = t + 1.2 * (x.r * x.r + y.r * y.r);
            let a = fam.kernel(kind, &x, &y).unwrap().evaluate(t, 0).unwrap();
            let b = fam.kernel(kind, &x.scaled(k), &y.scaled(k)).unwrap().evaluate(k * k * t, 0).unwrap();
            let f = k.powf(2.0 * kind.t_exponent());
            for (u, v) in a.value.iter().zip(&b.value) {
                prop_assert!((v - f * u).abs() <= 1e-8 * a.norm() + 1e-10);
            }
        }
    }
}
