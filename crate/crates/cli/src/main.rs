//! `conestokes` command-line front end.
//!
//! Structured results go out as JSON, plottable series as CSV. A JSON config
//! file supplies defaults; command-line flags override it. Exit status is 0 on
//! success, 2 for invalid input and 3 when a numerical procedure fails.

use clap::{Args, Parser, Subcommand};
use conestokes::coeffs::{decompose, manufacture, pair_expansion, ManufactureSpec};
use conestokes::geometry::{ConeSpec, SpatialPoint};
use conestokes::kernels::{
    time_term, KernelFamily, KernelKind, Mollifier, PressureReading, TimeData, TimeTermKind, DEFAULT_MOMENTS,
};
use conestokes::neumann::{neumann_spectrum, NeumannSpectrum};
use conestokes::stokes::{classify_weight, halfspace_shortcut, StokesPencilData};
use conestokes::verify;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "conestokes", version, about = "Singular expansions and kernels for the Stokes system in a cone")]
struct Cli {
    /// JSON file with default values; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file (standard output when absent).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Neumann eigenvalues of the cap (JSON).
    Spectrum(SpectrumArgs),
    /// Weight classification over a β grid (CSV).
    Intervals(IntervalArgs),
    /// Atom ledger of a singular expansion (JSON).
    Singular(ExpansionArgs),
    /// Residual of a singular expansion on an (r, θ) grid (CSV).
    Residual(ResidualArgs),
    /// Coefficients of manufactured data (JSON).
    Coeffs(CoeffArgs),
    /// Time-domain kernels on a t grid (CSV).
    Kernels(KernelArgs),
    /// Convolution terms S or T for analytic time data (CSV).
    Timeterm(TimeTermArgs),
    /// Run the acceptance checks and write a JSON report.
    Verify(VerifyArgs),
}

/// Every option that may appear in the config file.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    theta0: Option<f64>,
    layer_width: Option<f64>,
    mu_max: Option<f64>,
    m_max: Option<usize>,
    lambda1: Option<f64>,
    simple: Option<bool>,
    re_lambda2: Option<f64>,
    mu2: Option<f64>,
    beta: Option<f64>,
    beta_grid: Option<String>,
    mu_index: Option<i32>,
    k: Option<usize>,
    depth: Option<usize>,
    s_re: Option<f64>,
    s_im: Option<f64>,
    gamma: Option<f64>,
    zero_mean: Option<bool>,
    data: Option<PathBuf>,
    kind: Option<String>,
    x: Option<String>,
    y: Option<String>,
    t_grid: Option<String>,
    mollifier: Option<usize>,
    antiderivative: Option<u32>,
    which: Option<String>,
    reading: Option<String>,
    nodes: Option<usize>,
    r_min: Option<f64>,
    r_max: Option<f64>,
    n_r: Option<usize>,
    n_theta: Option<usize>,
    only: Option<Vec<usize>>,
}

#[derive(Args)]
struct ConeArgs {
    /// Half-opening angle θ0 in radians.
    #[arg(long)]
    theta0: Option<f64>,
    /// Collar width of the boundary layer (default from the cone).
    #[arg(long)]
    layer_width: Option<f64>,
}

#[derive(Args)]
struct SpectrumArgs {
    #[command(flatten)]
    cone: ConeArgs,
    /// Largest μ to report (default 4).
    #[arg(long)]
    mu_max: Option<f64>,
    /// Largest azimuthal order (default 6).
    #[arg(long)]
    m_max: Option<usize>,
}

#[derive(Args)]
struct IntervalArgs {
    #[command(flatten)]
    cone: ConeArgs,
    /// Real λ₁ in (0, 1]; taken from the half-space shortcut when absent and θ0 ≤ π/2.
    #[arg(long)]
    lambda1: Option<f64>,
    /// λ₁ is simple.
    #[arg(long)]
    simple: bool,
    /// Re λ₂, greater than λ₁.
    #[arg(long)]
    re_lambda2: Option<f64>,
    /// Second Neumann eigenvalue μ₂ (computed from θ0 when absent).
    #[arg(long)]
    mu2: Option<f64>,
    /// Single weight.
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<f64>,
    /// `lo:hi:n` uniform grid or a comma list.
    #[arg(long, allow_hyphen_values = true)]
    beta_grid: Option<String>,
}

#[derive(Args)]
struct ExpansionArgs {
    #[command(flatten)]
    cone: ConeArgs,
    /// Eigenvalue index j (negative for the decaying branch).
    #[arg(long, allow_hyphen_values = true)]
    mu_index: Option<i32>,
    /// Eigenfunction index within the eigenspace (1-based).
    #[arg(long)]
    k: Option<usize>,
    /// Expansion depth N (default 1).
    #[arg(long)]
    depth: Option<usize>,
    /// Real part of s (default 1).
    #[arg(long, allow_hyphen_values = true)]
    s_re: Option<f64>,
    /// Imaginary part of s (default 0).
    #[arg(long, allow_hyphen_values = true)]
    s_im: Option<f64>,
}

#[derive(Args)]
struct ResidualArgs {
    #[command(flatten)]
    exp: ExpansionArgs,
    /// Smallest radius in units of |s|^(-1/2).
    #[arg(long)]
    r_min: Option<f64>,
    /// Largest radius in units of |s|^(-1/2).
    #[arg(long)]
    r_max: Option<f64>,
    /// Number of log-spaced radii (default 11).
    #[arg(long)]
    n_r: Option<usize>,
    /// Number of polar angles (default 8).
    #[arg(long)]
    n_theta: Option<usize>,
}

#[derive(Args)]
struct CoeffArgs {
    #[command(flatten)]
    cone: ConeArgs,
    /// Weight γ selecting the coefficient indices.
    #[arg(long)]
    gamma: Option<f64>,
    /// Real part of s (default 1).
    #[arg(long, allow_hyphen_values = true)]
    s_re: Option<f64>,
    /// Imaginary part of s (default 0).
    #[arg(long, allow_hyphen_values = true)]
    s_im: Option<f64>,
    /// Manufactured data specification (JSON).
    #[arg(long)]
    data: Option<PathBuf>,
    /// The divergence data have zero mean.
    #[arg(long)]
    zero_mean: bool,
    /// λ₁ used for the dual expansion depth (default 1).
    #[arg(long)]
    lambda1: Option<f64>,
}

#[derive(Args)]
struct FamilyArgs {
    #[command(flatten)]
    cone: ConeArgs,
    /// Eigenvalue index j ≥ 1 (default 1).
    #[arg(long)]
    mu_index: Option<i32>,
    /// Eigenfunction index within the eigenspace (default 1).
    #[arg(long)]
    k: Option<usize>,
    /// λ₁ used for the dual expansion depth (from the half-space shortcut when absent).
    #[arg(long)]
    lambda1: Option<f64>,
    /// Number of vanishing mollifier moments (default 2).
    #[arg(long)]
    mollifier: Option<usize>,
    /// Observation point `x1,x2,x3`.
    #[arg(long, allow_hyphen_values = true)]
    x: Option<String>,
    /// `lo:hi:n` log-spaced grid or a comma list.
    #[arg(long)]
    t_grid: Option<String>,
}

#[derive(Args)]
struct KernelArgs {
    #[command(flatten)]
    fam: FamilyArgs,
    /// One of Ku, Hu, Kp, Hp.
    #[arg(long)]
    kind: Option<String>,
    /// Source point `y1,y2,y3`.
    #[arg(long, allow_hyphen_values = true)]
    y: Option<String>,
    /// Number of time antiderivatives.
    #[arg(long)]
    antiderivative: Option<u32>,
}

#[derive(Args)]
struct TimeTermArgs {
    #[command(flatten)]
    fam: FamilyArgs,
    /// S (velocity) or T (pressure).
    #[arg(long)]
    which: Option<String>,
    /// Time data manifest (JSON).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Kernel paired with g in T: Hp or Hu.
    #[arg(long)]
    reading: Option<String>,
    /// Radial nodes of the ball rule (0 for the default rule).
    #[arg(long)]
    nodes: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run only these checks.
    #[arg(long, value_delimiter = ',')]
    only: Option<Vec<usize>>,
}

/// Failure with its exit status.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<conestokes::Error> for Failure {
    fn from(e: conestokes::Error) -> Self {
        let kind = match &e {
            conestokes::Error::Domain(_) => "domain",
            conestokes::Error::Data(_) => "data",
            conestokes::Error::Numeric(_) => "numeric",
            conestokes::Error::Contract(_) => "contract",
        };
        Failure { code: if e.is_validation() { 2 } else { 3 }, kind, message: e.to_string() }
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure { code: 2, kind: "validation", message: msg.into() }
}

type Res<T> = std::result::Result<T, Failure>;

fn pick<T: Clone>(flag: Option<T>, cfg: &Option<T>, name: &str) -> Res<T> {
    flag.or_else(|| cfg.clone()).ok_or_else(|| invalid(format!("missing --{name}")))
}

fn pick_or<T: Clone>(flag: Option<T>, cfg: &Option<T>, default: T) -> T {
    flag.or_else(|| cfg.clone()).unwrap_or(default)
}

fn cone(a: &ConeArgs, c: &RunConfig) -> Res<ConeSpec> {
    let th = pick_or(a.theta0, &c.theta0, FRAC_PI_2);
    Ok(ConeSpec::with_layer(th, a.layer_width.or(c.layer_width))?)
}

fn s_value(re: Option<f64>, im: Option<f64>, c: &RunConfig) -> Res<C64> {
    let s = C64::new(pick_or(re, &c.s_re, 1.0), pick_or(im, &c.s_im, 0.0));
    if s.re < 0.0 || s.norm() == 0.0 {
        return Err(invalid("s must satisfy Re s ≥ 0, s ≠ 0"));
    }
    Ok(s)
}

/// Spectrum large enough to contain index `|j|`.
fn spectrum_with(cone: &ConeSpec, j: i32, m_max: usize) -> Res<NeumannSpectrum> {
    let mut mu_max = 3.0;
    loop {
        let sp = neumann_spectrum(cone, mu_max, m_max)?;
        if sp.eigenvalues.len() > j.unsigned_abs() as usize || mu_max >= 12.0 {
            return Ok(sp);
        }
        mu_max += 3.0;
    }
}

fn parse_point(s: &str) -> Res<SpatialPoint> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| invalid(format!("point '{s}': {e}")))?;
    match v.as_slice() {
        [a, b, c] => Ok(SpatialPoint::from_cartesian([*a, *b, *c])),
        _ => Err(invalid(format!("point '{s}' needs three coordinates"))),
    }
}

/// `lo:hi:n` grid (logarithmic when `log`) or a comma list.
fn parse_grid(s: &str, log: bool) -> Res<Vec<f64>> {
    let bad = |e: String| invalid(format!("grid '{s}': {e}"));
    if let Some((lo, rest)) = s.split_once(':') {
        let (hi, n) = rest.split_once(':').ok_or_else(|| bad("expected lo:hi:n".into()))?;
        let lo: f64 = lo.parse().map_err(|e| bad(format!("{e}")))?;
        let hi: f64 = hi.parse().map_err(|e| bad(format!("{e}")))?;
        let n: usize = n.parse().map_err(|e| bad(format!("{e}")))?;
        if n == 0 || (log && (lo <= 0.0 || hi <= 0.0)) {
            return Err(bad("empty grid or non-positive log range".into()));
        }
        let f = |i: usize| if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
        Ok((0..n).map(|i| if log { lo * (hi / lo).powf(f(i)) } else { lo + (hi - lo) * f(i) }).collect())
    } else {
        s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| bad(format!("{e}")))).collect()
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(p: &PathBuf) -> Res<T> {
    let text = std::fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))
}

/// Shortest round-trip text; scientific outside `[1e-4, 1e6)`.
fn num(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-4..1e6).contains(&a) || !a.is_finite() {
        v.to_string()
    } else {
        format!("{v:e}")
    }
}

enum Output {
    Json(Value),
    Csv(Vec<String>, Vec<Vec<String>>),
}

fn spectrum(a: SpectrumArgs, c: &RunConfig) -> Res<Output> {
    let cone = cone(&a.cone, c)?;
    let sp = neumann_spectrum(&cone, pick_or(a.mu_max, &c.mu_max, 4.0), pick_or(a.m_max, &c.m_max, 6))?;
    let list: Vec<Value> = sp
        .eigenvalues
        .iter()
        .map(|e| json!({"j": e.index, "mu": e.mu, "M": e.beltrami_eigenvalue, "sigma": e.multiplicity, "m_list": e.m_list}))
        .collect();
    Ok(Output::Json(json!({
        "citation": "Neumann spectrum of the cap: Legendre shooting with bisection",
        "theta0": cone.half_angle,
        "eigenvalues": list,
        "flagged": sp.flagged,
    })))
}

fn intervals(a: IntervalArgs, c: &RunConfig) -> Res<Output> {
    let cone = cone(&a.cone, c)?;
    let shortcut = halfspace_shortcut(&cone);
    let (lambda1, simple) = match (a.lambda1.or(c.lambda1), shortcut) {
        (Some(l), _) => (l, a.simple || c.simple.unwrap_or(false)),
        (None, Some(h)) if a.cone.theta0.or(c.theta0).is_some() => (h.lambda1, h.lambda1_simple),
        _ => return Err(invalid("missing --lambda1 (or a --theta0 with the cap inside a half-sphere)")),
    };
    let re2 = pick(a.re_lambda2, &c.re_lambda2, "re-lambda2")?;
    let mu2 = match a.mu2.or(c.mu2) {
        Some(m) => m,
        None => spectrum_with(&cone, 2, 4)?.get(2).map(|e| e.mu).ok_or_else(|| invalid("missing --mu2"))?,
    };
    let data = StokesPencilData::user(lambda1, simple, re2)?;
    let betas = match (a.beta.or(c.beta), a.beta_grid.or_else(|| c.beta_grid.clone())) {
        (Some(b), _) => vec![b],
        (None, Some(g)) => parse_grid(&g, false)?,
        (None, None) => parse_grid("-3:3:25", false)?,
    };
    let rows = betas
        .iter()
        .map(|&b| {
            let v = classify_weight(b, &data, mu2);
            vec![num(b), v.status.label().to_string(), format!("weight classifier: {}", v.citation)]
        })
        .collect();
    Ok(Output::Csv(vec!["beta".into(), "status".into(), "citation".into()], rows))
}

fn expansion(a: &ExpansionArgs, c: &RunConfig) -> Res<(ConeSpec, conestokes::singular::Expansion, C64)> {
    let cone = cone(&a.cone, c)?;
    let j = pick_or(a.mu_index, &c.mu_index, 1);
    if j == 0 {
        return Err(invalid("--mu-index must be nonzero"));
    }
    let sp = spectrum_with(&cone, j, pick_or(None, &c.m_max, 4))?;
    let depth = pick_or(a.depth, &c.depth, 1);
    if depth > 8 {
        return Err(invalid("--depth must not exceed 8"));
    }
    let e = pair_expansion(&cone, &sp, j, pick_or(a.k, &c.k, 1), depth)?;
    Ok((cone, e, s_value(a.s_re, a.s_im, c)?))
}

fn singular(a: ExpansionArgs, c: &RunConfig) -> Res<Output> {
    let (cone, e, s) = expansion(&a, c)?;
    let x = SpatialPoint::new(1.0 / s.norm().sqrt(), 0.5 * cone.half_angle, 0.0);
    let (u, p) = e.evaluate(&x, s);
    Ok(Output::Json(json!({
        "citation": "singular expansion: recursive interior and collar construction",
        "theta0": cone.half_angle,
        "mu": e.mu,
        "index": e.index,
        "m": e.m,
        "depth": e.depth,
        "log_budget": e.log_budget,
        "realized_log_power": e.realized_log_power,
        "cancellation_defect": e.cancellation_defect,
        "resonances": e.resonances,
        "atoms": e.ledger(),
        "sample": {
            "s": [s.re, s.im],
            "x": x.cartesian(),
            "velocity": u.iter().map(|z| [z.re, z.im]).collect::<Vec<_>>(),
            "pressure": [p.re, p.im],
        },
    })))
}

fn residual(a: ResidualArgs, c: &RunConfig) -> Res<Output> {
    let (cone, e, s) = expansion(&a.exp, c)?;
    let sc = 1.0 / s.norm().sqrt();
    let rs = parse_grid(&format!("{}:{}:{}", pick_or(a.r_min, &c.r_min, 1.0), pick_or(a.r_max, &c.r_max, 100.0), pick_or(a.n_r, &c.n_r, 11)), true)?;
    let nt = pick_or(a.n_theta, &c.n_theta, 8).max(1);
    let predicted = e.mu - e.depth as f64 - 2.0;
    let mut rows = Vec::new();
    for r in rs {
        let r = r * sc;
        let (env, _) = e.residual_envelope(s, r, 200);
        for i in 0..nt {
            // samples through the collar, where the residual lives
            let g = cone.layer_width * (i as f64 + 0.5) / nt as f64;
            let th = cone.half_angle - g.asin();
            let (m, d) = e.residual_symbolic(&SpatialPoint::new(r, th, 0.0), s);
            let mut row = vec![num(r), num(th)];
            for z in m.iter().chain(std::iter::once(&d)) {
                row.push(num(z.re));
                row.push(num(z.im));
            }
            row.extend([num(env), num(predicted), "singular expansion residual envelope".into()]);
            rows.push(row);
        }
    }
    let head = ["r", "theta", "f1_re", "f1_im", "f2_re", "f2_im", "f3_re", "f3_im", "g_re", "g_im", "envelope", "predicted_exponent", "citation"];
    Ok(Output::Csv(head.iter().map(|h| h.to_string()).collect(), rows))
}

fn coeffs(a: CoeffArgs, c: &RunConfig) -> Res<Output> {
    let cone = cone(&a.cone, c)?;
    let path = pick(a.data, &c.data, "data")?;
    let spec: ManufactureSpec = read_json(&path)?;
    let s = s_value(a.s_re, a.s_im, c)?;
    let gamma = pick(a.gamma, &c.gamma, "gamma")?;
    let lambda1 = pick_or(a.lambda1, &c.lambda1, 1.0);
    let sp = neumann_spectrum(&cone, (gamma + 1.0).max(3.0), 4)?;
    let data = manufacture(&cone, &sp, &spec, s)?;
    let (set, _) = decompose(&data, gamma, a.zero_mean || c.zero_mean.unwrap_or(false), lambda1, None)?;
    let mut map = BTreeMap::new();
    for e in &set.entries {
        map.insert(format!("({},{})", e.j, e.k), json!({"re": e.value.re, "im": e.value.im, "error_bar": e.error_bar, "mu": e.mu}));
    }
    Ok(Output::Json(json!({
        "citation": "coefficient extraction: surface pairing with truncated dual solutions",
        "s": [s.re, s.im],
        "gamma": gamma,
        "zero_mean": set.zero_mean,
        "coefficients": map,
    })))
}

fn family(a: &FamilyArgs, c: &RunConfig) -> Res<KernelFamily> {
    let cone = cone(&a.cone, c)?;
    let j = pick_or(a.mu_index, &c.mu_index, 1);
    if j < 1 {
        return Err(invalid("--mu-index must be positive for kernels"));
    }
    let sp = spectrum_with(&cone, j + 1, 4)?;
    let lambda1 = match a.lambda1.or(c.lambda1) {
        Some(l) => l,
        None => halfspace_shortcut(&cone).map(|h| h.lambda1).ok_or_else(|| invalid("missing --lambda1 for a cap wider than a half-sphere"))?,
    };
    let moll = Mollifier::new(pick_or(a.mollifier, &c.mollifier, DEFAULT_MOMENTS))?;
    Ok(KernelFamily::new(&cone, &sp, j as usize, pick_or(a.k, &c.k, 1), lambda1, moll)?)
}

fn kernels(a: KernelArgs, c: &RunConfig) -> Res<Output> {
    let fam = family(&a.fam, c)?;
    let kind: KernelKind = pick(a.kind, &c.kind, "kind")?.parse().map_err(|e: conestokes::Error| Failure::from(e))?;
    let x = parse_point(&pick(a.fam.x.clone(), &c.x, "x")?)?;
    let y = parse_point(&pick(a.y, &c.y, "y")?)?;
    let ts = parse_grid(&pick_or(a.fam.t_grid.clone(), &c.t_grid, "0.1:10:21".into()), true)?;
    let m = pick_or(a.antiderivative, &c.antiderivative, 0);
    let ev = fam.kernel(kind, &x, &y)?;
    let (ra, rb) = kind.shape();
    let mut head = vec!["t".to_string()];
    for i in 0..ra {
        for k in 0..rb {
            head.push(format!("v{}{}", i + 1, k + 1));
        }
    }
    head.extend(["error".into(), "citation".into()]);
    let cite = format!("time-domain kernel {} (j={}, k={}): contour inversion", kind.name(), fam.j, fam.k);
    let mut rows = Vec::new();
    for t in ts {
        let smp = ev.evaluate(t, m)?;
        let mut row = vec![num(t)];
        row.extend(smp.value.iter().map(|&v| num(v)));
        row.extend([num(smp.error), cite.clone()]);
        rows.push(row);
    }
    Ok(Output::Csv(head, rows))
}

fn timeterm(a: TimeTermArgs, c: &RunConfig) -> Res<Output> {
    let fam = family(&a.fam, c)?;
    let which = match pick_or(a.which, &c.which, "S".into()).as_str() {
        "S" | "s" => TimeTermKind::S,
        "T" | "t" => TimeTermKind::T,
        w => return Err(invalid(format!("--which must be S or T, got {w}"))),
    };
    let reading = match pick_or(a.reading, &c.reading, "Hp".into()).to_ascii_lowercase().as_str() {
        "hp" => PressureReading::Hp,
        "hu" => PressureReading::Hu,
        r => return Err(invalid(format!("--reading must be Hp or Hu, got {r}"))),
    };
    let data: TimeData = read_json(&pick(a.data, &c.data, "data")?)?;
    let x = parse_point(&pick(a.fam.x.clone(), &c.x, "x")?)?;
    let ts = parse_grid(&pick_or(a.fam.t_grid.clone(), &c.t_grid, "0.5:2:4".into()), true)?;
    let nodes = pick_or(a.nodes, &c.nodes, 0);
    let dim = if matches!(which, TimeTermKind::S) { 3 } else { 1 };
    let mut head = vec!["t".to_string()];
    head.extend((1..=dim).map(|i| format!("v{i}")));
    head.push("citation".into());
    let cite = format!("convolution term {:?} (j={}, k={}) with piecewise-linear time data", which, fam.j, fam.k);
    let mut rows = Vec::new();
    for t in ts {
        let v = time_term(&fam, which, &x, t, &data, reading, nodes)?;
        let mut row = vec![num(t)];
        row.extend(v.iter().map(|&z| num(z)));
        row.push(cite.clone());
        rows.push(row);
    }
    Ok(Output::Csv(head, rows))
}

fn run_verify(a: VerifyArgs, c: &RunConfig) -> Res<(Output, bool)> {
    let ids = a.only.or_else(|| c.only.clone()).unwrap_or_else(|| (1..=verify::check_count()).collect());
    let mut results = Vec::new();
    for id in ids {
        results.push(verify::run_check(id).ok_or_else(|| invalid(format!("no check {id}")))?);
    }
    let ok = results.iter().all(|r| !r.unexpected());
    let known: Vec<Value> = verify::KNOWN_RED.iter().map(|(id, why)| json!({"id": id, "reason": why})).collect();
    let out = json!({
        "citation": "acceptance checks against independent routes",
        "all_passed": results.iter().all(|r| r.passed),
        "as_documented": ok,
        "known_red": known,
        "checks": results,
    });
    Ok((Output::Json(out), ok))
}

fn emit(out: Output, path: &Option<PathBuf>) -> Res<()> {
    let io = |e: std::io::Error| invalid(format!("write: {e}"));
    let mut sink: Box<dyn Write> = match path {
        Some(p) => Box::new(std::fs::File::create(p).map_err(io)?),
        None => Box::new(std::io::stdout().lock()),
    };
    match out {
        Output::Json(v) => {
            serde_json::to_writer_pretty(&mut sink, &v).map_err(|e| invalid(format!("write: {e}")))?;
            writeln!(sink).map_err(io)?;
        }
        Output::Csv(head, rows) => {
            let mut w = csv::Writer::from_writer(sink);
            let csv_err = |e: csv::Error| invalid(format!("write: {e}"));
            w.write_record(&head).map_err(csv_err)?;
            for r in rows {
                w.write_record(&r).map_err(csv_err)?;
            }
            w.flush().map_err(io)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Res<bool> {
    let cfg: RunConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    let (out, ok) = match cli.cmd {
        Command::Spectrum(a) => (spectrum(a, &cfg)?, true),
        Command::Intervals(a) => (intervals(a, &cfg)?, true),
        Command::Singular(a) => (singular(a, &cfg)?, true),
        Command::Residual(a) => (residual(a, &cfg)?, true),
        Command::Coeffs(a) => (coeffs(a, &cfg)?, true),
        Command::Kernels(a) => (kernels(a, &cfg)?, true),
        Command::Timeterm(a) => (timeterm(a, &cfg)?, true),
        Command::Verify(a) => run_verify(a, &cfg)?,
    };
    emit(out, &cli.out)?;
    Ok(ok)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(f) => {
            eprintln!("{}", json!({"error": {"kind": f.kind, "message": f.message}}));
            ExitCode::from(f.code)
        }
    }
}
