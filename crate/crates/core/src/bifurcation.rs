//! From Melnikov functions to limit-cycle predictions: root isolation,
//! stability, the center-center polynomial forms and cycle counting.

use rayon::prelude::*;
use serde::Serialize;

use crate::field::{Axis, Expression, Partial, ScalarField};
use crate::melnikov::{boundary_m1, LevelMap, MelnikovError, PiecewiseSystem};
use crate::presets::QuadraticFamily;
use crate::roots::brent;
use crate::simulator::{verify_limit_cycle, CycleVerdict, SimError, SimOptions};

/// Values at or below this magnitude count as zero when looking for sign changes.
pub const ZERO_FLOOR: f64 = 1e-10;
/// Relative residual tolerance for near-tangent zeros.
pub const TANGENCY_TOL: f64 = 1e-9;
pub const DEFAULT_GRID: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RootRecord {
    pub r_star: f64,
    /// Order of the Melnikov function that vanishes here.
    pub function_order: u8,
    /// 1 for a sign change, 2 for a tangent zero ("≥2").
    pub multiplicity: u32,
    pub bracket: (f64, f64),
    pub residual: f64,
}

fn golden_min<F: Fn(f64) -> f64>(f: &F, mut a: f64, mut b: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= 4.0 * f64::EPSILON * (a.abs() + b.abs()) + 1e-300 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Shrink a bracket around a refined root as far as the sign change survives.
fn tight_bracket<F: Fn(f64) -> f64>(f: &F, x: f64, lo: f64, hi: f64) -> (f64, f64) {
    let mut d = 4.0 * f64::EPSILON * x.abs() + 1e-15;
    while d < 1e-10 {
        let (a, b) = ((x - d).max(lo), (x + d).min(hi));
        if f(a) * f(b) <= 0.0 {
            return (a, b);
        }
        d *= 2.0;
    }
    ((x - 1e-10).max(lo), (x + 1e-10).min(hi))
}

/// Zeros of `f` in the open `window`, found on a uniform grid and refined by
/// Brent. A local dip of |f| to the tangency tolerance without a sign change
/// is reported with multiplicity 2. NaN values are skipped.
pub fn isolate_roots<F: Fn(f64) -> f64 + Sync>(f: F, window: (f64, f64), grid_size: usize, function_order: u8) -> Vec<RootRecord> {
    let n = grid_size.max(8);
    let (a, b) = window;
    let nudge = 1e-6 * (b - a);
    let (lo, hi) = (a + nudge, b - nudge);
    let xs: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let vs: Vec<f64> = xs.par_iter().map(|&x| f(x)).collect();
    let vmax = vs.iter().filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(v.abs()));
    if vmax <= ZERO_FLOOR {
        return Vec::new();
    }
    let sign = |v: f64| if !v.is_finite() || v.abs() <= ZERO_FLOOR { 0.0 } else { v.signum() };
    let tol = TANGENCY_TOL * (1.0 + vmax);
    let mut out = Vec::new();
    let mut last_nonzero: Option<usize> = None;
    for i in 0..n {
        let s = sign(vs[i]);
        if s == 0.0 {
            continue;
        }
        if let Some(j) = last_nonzero {
            if sign(vs[j]) != s {
                if let Some(x) = brent(&f, xs[j], xs[i], 1e-15, 300) {
                    let bracket = tight_bracket(&f, x, xs[j], xs[i]);
                    out.push(RootRecord { r_star: x, function_order, multiplicity: 1, bracket, residual: f(x).abs() });
                }
            }
        }
        last_nonzero = Some(i);
    }
    for i in 1..n - 1 {
        let (l, m, r) = (vs[i - 1], vs[i], vs[i + 1]);
        if !(l.is_finite() && m.is_finite() && r.is_finite()) {
            continue;
        }
        let dip = m.abs() < l.abs() && m.abs() <= r.abs() && l.signum() == m.signum() && m.signum() == r.signum();
        if !dip || l.abs().max(r.abs()) <= 10.0 * ZERO_FLOOR {
            continue;
        }
        let g = |x: f64| f(x).abs();
        let x = golden_min(&g, xs[i - 1], xs[i + 1]);
        let res = g(x);
        if res <= tol && f(x).signum() == m.signum() || res == 0.0 {
            out.push(RootRecord { r_star: x, function_order, multiplicity: 2, bracket: (xs[i - 1], xs[i + 1]), residual: res });
        }
    }
    out.sort_by(|p, q| p.r_star.total_cmp(&q.r_star));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityVerdict {
    pub stable: bool,
    pub criterion_value: f64,
}

/// Derivative of the level value `H⁺(P(r))` in `r`.
fn level_derivative(system: &PiecewiseSystem, r: f64, p: f64) -> f64 {
    match &system.level_map {
        LevelMap::Expr(e) => e.derivative(Axis::X).eval(r, 0.0),
        LevelMap::SectionAbscissa => system.h_plus.dx(p, 0.0),
    }
}

/// Prop-style criterion `(dM1/dr)/(dh/dr) − M1·H_xx⁺/H_x⁺²` at P(r★), with
/// the displacement measured in level units. Negative means stable. For a
/// time-reversed system the sign refers back to the original flow.
pub fn stability<F: Fn(f64) -> f64>(system: &PiecewiseSystem, r_star: f64, m1_fn: F, step: f64) -> Result<StabilityVerdict, MelnikovError> {
    let p = system.section_point(r_star)?.x;
    let hx = system.h_plus.dx(p, 0.0);
    if hx.abs() < system.options.transversality {
        return Err(MelnikovError::TangencyAtSection { which: "H_x+(P)", value: hx.abs(), r: r_star });
    }
    let dm1 = (m1_fn(r_star + step) - m1_fn(r_star - step)) / (2.0 * step);
    let dh = level_derivative(system, r_star, p);
    let hxx = system.h_plus.partial(Partial::XX, p, 0.0);
    let mut value = dm1 / dh - m1_fn(r_star) * hxx / (hx * hx);
    if system.reversed {
        value = -value;
    }
    Ok(StabilityVerdict { stable: value < 0.0, criterion_value: value })
}

/// Horner evaluation of `Σ c_k x^k`.
pub fn eval_poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Polynomial in (x, r), `c[i][j]` multiplying `x^i r^j`.
#[derive(Debug, Clone)]
struct Poly2 {
    c: Vec<Vec<f64>>,
}

const DEG: usize = 16;

impl Poly2 {
    fn zero() -> Self {
        Poly2 { c: vec![vec![0.0; DEG]; DEG] }
    }

    fn monomial(k: f64, i: usize, j: usize) -> Self {
        let mut p = Self::zero();
        p.c[i][j] = k;
        p
    }

    fn add(&self, o: &Poly2) -> Poly2 {
        let mut p = self.clone();
        for i in 0..DEG {
            for j in 0..DEG {
                p.c[i][j] += o.c[i][j];
            }
        }
        p
    }

    fn scale(&self, k: f64) -> Poly2 {
        Poly2 { c: self.c.iter().map(|row| row.iter().map(|v| v * k).collect()).collect() }
    }

    fn mul(&self, o: &Poly2) -> Poly2 {
        let mut p = Self::zero();
        for i in 0..DEG {
            for j in 0..DEG {
                if self.c[i][j] == 0.0 {
                    continue;
                }
                for k in 0..DEG - i {
                    for l in 0..DEG - j {
                        p.c[i + k][j + l] += self.c[i][j] * o.c[k][l];
                    }
                }
            }
        }
        p
    }

    /// `∫_{−r}^{r} dx`, a polynomial in r.
    fn symmetric_integral(&self) -> Vec<f64> {
        let mut out = vec![0.0; DEG + 1];
        for i in (0..DEG).step_by(2) {
            for j in 0..DEG {
                if i + j + 1 <= DEG {
                    out[i + j + 1] += 2.0 * self.c[i][j] / (i + 1) as f64;
                }
            }
        }
        out
    }
}

fn add_r(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len().max(b.len());
    (0..n).map(|i| a.get(i).copied().unwrap_or(0.0) + b.get(i).copied().unwrap_or(0.0)).collect()
}

fn mul_r(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len()];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn scale_r(a: &[f64], k: f64) -> Vec<f64> {
    a.iter().map(|v| v * k).collect()
}

fn trim(mut v: Vec<f64>) -> Vec<f64> {
    while v.last() == Some(&0.0) {
        v.pop();
    }
    v
}

/// `c₀x² + c₁xy + c₂y²` along `y = sy·(r² − x²)`.
fn on_parabola(c: [f64; 3], sy: f64) -> Poly2 {
    let y = Poly2::monomial(sy, 0, 2).add(&Poly2::monomial(-sy, 2, 0));
    let x = Poly2::monomial(1.0, 1, 0);
    let x2 = x.mul(&x);
    x2.scale(c[0]).add(&x.mul(&y).scale(c[1])).add(&y.mul(&y).scale(c[2]))
}

/// Polynomial forms of the center-center quadratic family.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CenterCenterForms {
    /// M1 coefficients in powers of r from the monomial integration.
    pub m1: Vec<f64>,
    /// Second-order function in powers of r from the same integration.
    pub m2: Vec<f64>,
    /// `M2 = r³ M2′(h)`, `h = r²`: coefficients of M2′ in powers of h.
    pub m2_prime: Vec<f64>,
    /// Largest |coefficient| of M2 at powers not of the form 3 + 2k.
    pub m2_even_residual: f64,
    /// Reference M1 coefficients (powers of r).
    pub reference_m1: Vec<f64>,
    /// Reference M2′ coefficients (powers of h).
    pub reference_m2_prime: Vec<f64>,
    /// `[4b − 7f + 7n − 4q, d − l]` from the reference vanishing conditions.
    pub reference_conditions: [f64; 2],
    /// `[2n − 2f + q − b, l − d]`, the conditions under which the integrated M1 vanishes.
    pub oracle_conditions: [f64; 2],
}

impl CenterCenterForms {
    /// Both first-order conditions hold, so M2′ is the relevant function.
    pub fn m2_meaningful(&self, tol: f64) -> bool {
        self.oracle_conditions.iter().all(|c| c.abs() <= tol)
    }
}

/// Integrate every monomial of the family along the parabolic half-orbits
/// `y = r² − x²` (upper, x from r to −r) and `y = x² − r²` (lower, x from −r
/// to r). Along these orbits every ratio in the general formulas is 1 and
/// `H_y± = ∓1`, so each term is a polynomial in r.
pub fn center_center_closed_form(q: &QuadraticFamily) -> CenterCenterForms {
    let v = &q.values;
    let tri = |o: usize| [v[o], v[o + 1], v[o + 2]];
    let x = Poly2::monomial(1.0, 1, 0);
    // Upper: ω = (g + 2x f) dx, x: r → −r. Lower: ω = (g − 2x f) dx, x: −r → r.
    let upper = |f: [f64; 3], g: [f64; 3]| {
        let (fp, gp) = (on_parabola(f, 1.0), on_parabola(g, 1.0));
        (fp.clone(), gp.add(&x.mul(&fp).scale(2.0)))
    };
    let lower = |f: [f64; 3], g: [f64; 3]| {
        let (fp, gp) = (on_parabola(f, -1.0), on_parabola(g, -1.0));
        (fp.clone(), gp.add(&x.mul(&fp).scale(-2.0)))
    };
    let (f1p, w1p) = upper(tri(0), tri(3));
    let (f1m, w1m) = lower(tri(6), tri(9));
    let (_, w2p) = upper(tri(12), tri(15));
    let (_, w2m) = lower(tri(18), tri(21));

    let i1p = scale_r(&w1p.symmetric_integral(), -1.0);
    let i1m = w1m.symmetric_integral();
    let m1 = trim(add_r(&i1p, &i1m));

    let i2p = scale_r(&w2p.symmetric_integral(), -1.0);
    let i2m = w2m.symmetric_integral();
    // Divided by H_y⁺ = −1 and H_y⁻ = 1.
    let jp = scale_r(&i1p, -1.0);
    let jm = i1m.clone();
    let fp = f1p.mul(&w1p).symmetric_integral();
    let fm = f1m.mul(&w1m).symmetric_integral();
    // K⁺ = a r² + d r/2, K⁻ = p r² − l r/2 at P = (r, 0).
    let kp = vec![0.0, 0.5 * q.get("d"), q.get("a")];
    let km = vec![0.0, -0.5 * q.get("l"), q.get("p")];
    let mut m2 = add_r(&i2p, &i2m);
    m2 = add_r(&m2, &mul_r(&kp, &jp));
    m2 = add_r(&m2, &mul_r(&km, &jm));
    m2 = add_r(&m2, &scale_r(&fp, -1.0));
    m2 = add_r(&m2, &scale_r(&fm, -1.0));
    let m2 = trim(m2);

    let mut m2_prime = Vec::new();
    let mut even = 0.0f64;
    for (k, c) in m2.iter().enumerate() {
        if k >= 3 && (k - 3) % 2 == 0 {
            m2_prime.push(*c);
        } else {
            even = even.max(c.abs());
        }
    }

    let g = |n: &str| q.get(n);
    let reference_m1 = vec![0.0, 0.0, 0.0, 2.0 / 3.0 * (g("l") - g("d")), 0.0, 8.0 / 15.0 * (4.0 * g("b") - 7.0 * g("f") + 7.0 * g("n") - 4.0 * g("q"))];
    let t = 7.0 * g("f") - 4.0 * g("b");
    let sc = g("s") + g("c");
    let reference_m2_prime = vec![
        2.0 / 3.0 * (g("L") - g("D")),
        4.0 / 15.0 * (14.0 * (g("N") - g("F")) + 8.0 * (g("B") - g("Q")) + g("d") * (g("p") + g("a"))),
        8.0 / 15.0 * t * (g("p") + g("a")) - 184.0 / 105.0 * (g("d") * sc + g("q") * g("m") + g("n") * g("p") + g("a") * g("f") + g("b") * g("e"))
            + 96.0 / 35.0 * (g("p") * g("q") + g("a") * g("b")),
        32.0 / 315.0 * (-29.0 * t * sc + 120.0 * (g("s") * g("n") + g("c") * g("f"))),
    ];
    CenterCenterForms {
        m1,
        m2,
        m2_prime,
        m2_even_residual: even,
        reference_m1,
        reference_m2_prime,
        reference_conditions: [4.0 * g("b") - 7.0 * g("f") + 7.0 * g("n") - 4.0 * g("q"), g("d") - g("l")],
        oracle_conditions: [2.0 * g("n") - 2.0 * g("f") + g("q") - g("b"), g("l") - g("d")],
    }
}

/// `f_o = (f(x) − f(−x))/2` and `f_e = (f(x) + f(−x))/2`.
pub fn odd_even_parts(f: &ScalarField) -> (ScalarField, ScalarField) {
    let e = f.expr();
    let mirrored = e.substitute(&(-Expression::x()), &Expression::y());
    let half = Expression::rational(1, 2);
    (ScalarField::new(half.clone() * (e.clone() - mirrored.clone())), ScalarField::new(half * (e.clone() + mirrored)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitCycleReport {
    pub root: RootRecord,
    pub stability: StabilityVerdict,
    pub verification: Option<CycleVerdict>,
    /// Error text when the simulator search failed.
    pub verification_error: Option<String>,
    pub epsilon_used: Option<f64>,
}

/// Flat record for JSON export.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleRecord {
    pub r_star: f64,
    pub multiplicity: u32,
    pub stable: bool,
    pub criterion_value: f64,
    pub verified: bool,
    pub epsilon_used: Option<f64>,
}

impl LimitCycleReport {
    pub fn record(&self) -> CycleRecord {
        CycleRecord {
            r_star: self.root.r_star,
            multiplicity: self.root.multiplicity,
            stable: self.stability.stable,
            criterion_value: self.stability.criterion_value,
            verified: self.verification.as_ref().is_some_and(|v| v.found && v.stable == self.stability.stable),
            epsilon_used: self.epsilon_used,
        }
    }
}

pub fn reports_json(reports: &[LimitCycleReport]) -> serde_json::Value {
    serde_json::to_value(reports.iter().map(LimitCycleReport::record).collect::<Vec<_>>()).expect("plain data")
}

/// How `count_cycles` runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleSearch {
    pub window: (f64, f64),
    pub grid: usize,
    /// Central-difference step for dM1/dr.
    pub step: f64,
    /// Simulate at this ε to confirm each cycle.
    pub verify_epsilon: Option<f64>,
    pub sim: SimOptions,
}

impl CycleSearch {
    pub fn new(window: (f64, f64)) -> Self {
        CycleSearch { window, grid: DEFAULT_GRID, step: 1e-5, verify_epsilon: None, sim: SimOptions::default() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CycleError {
    #[error(transparent)]
    Melnikov(#[from] MelnikovError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Zeros of the boundary M1 over the window, each with its stability and
/// optional simulator confirmation, in ascending r.
pub fn count_cycles(system: &PiecewiseSystem, search: &CycleSearch) -> Result<Vec<LimitCycleReport>, CycleError> {
    if system.boundary.is_none() {
        return Err(MelnikovError::NoBoundary.into());
    }
    let m1 = |r: f64| boundary_m1(system, r).map(|b| b.value).unwrap_or(f64::NAN);
    let roots = isolate_roots(m1, search.window, search.grid, 1);
    let mut out = Vec::with_capacity(roots.len());
    for root in roots {
        let stab = stability(system, root.r_star, m1, search.step)?;
        let (verification, verification_error) = match search.verify_epsilon {
            Some(eps) => match verify_limit_cycle(system, root.r_star, eps, &search.sim) {
                Ok(v) => (Some(v), None),
                Err(e) => (None, Some(e.to_string())),
            },
            None => (None, None),
        };
        out.push(LimitCycleReport { root, stability: stab, verification, verification_error, epsilon_used: search.verify_epsilon });
    }
    Ok(out)
}
