//! First- and second-order Melnikov functions of a two-zone Hamiltonian
//! system, evaluated from traced half-orbits.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::field::{Axis, Expression, ParseError, Partial, ScalarField};
use crate::orbit::{find_section_point, trace_half_orbit, AnnulusWindow, LineIntegral, OneForm, OrbitError, OrbitTrace, SectionPoint, TraceOptions, Zone};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MelnikovError {
    #[error(transparent)]
    Orbit(#[from] OrbitError),
    #[error("|{which}| = {value} below the transversality threshold at r = {r}")]
    TangencyAtSection { which: &'static str, value: f64, r: f64 },
    #[error("lower half-orbit misses P by {gap} at r = {r}")]
    NotClosed { r: f64, gap: f64 },
    #[error("divided integrals leave an uncancelled endpoint pole at {point} (residue {residue}) at r = {r}")]
    NonIntegrable { point: &'static str, residue: f64, r: f64 },
    #[error("system has no boundary perturbation")]
    NoBoundary,
    #[error("boundary function must depend on x only")]
    BoundaryDependsOnY,
    #[error("invalid level map: {0}")]
    LevelMap(#[from] ParseError),
}

/// Perturbation one-forms of one zone: the field gains `ε(f1, g1) + ε²(f2, g2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub f1: ScalarField,
    pub g1: ScalarField,
    pub f2: ScalarField,
    pub g2: ScalarField,
}

impl Default for Perturbation {
    fn default() -> Self {
        Perturbation { f1: ScalarField::zero(), g1: ScalarField::zero(), f2: ScalarField::zero(), g2: ScalarField::zero() }
    }
}

impl Perturbation {
    pub fn first_order(f1: ScalarField, g1: ScalarField) -> Self {
        Perturbation { f1, g1, ..Default::default() }
    }

    pub fn is_zero(&self) -> bool {
        self.f1.is_zero() && self.g1.is_zero() && self.f2.is_zero() && self.g2.is_zero()
    }

    fn negated(&self) -> Self {
        let n = |s: &ScalarField| ScalarField::new(-s.expr().clone());
        Perturbation { f1: n(&self.f1), g1: n(&self.g1), f2: n(&self.f2), g2: n(&self.g2) }
    }

    fn scaled(&self, c: f64) -> Self {
        let n = |s: &ScalarField| ScalarField::new(s.expr().scale(c));
        Perturbation { f1: n(&self.f1), g1: n(&self.g1), f2: n(&self.f2), g2: n(&self.g2) }
    }

    pub fn omega1(&self) -> OneForm {
        OneForm::new(self.g1.expr().clone(), self.f1.expr().clone())
    }

    pub fn omega2(&self) -> OneForm {
        OneForm::new(self.g2.expr().clone(), self.f2.expr().clone())
    }
}

/// Switching curve `y = ε f(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Boundary {
    pub f: ScalarField,
    pub epsilon: f64,
}

/// How the level parameter `r` selects the upper section point `P(r)`.
#[derive(Debug, Clone, PartialEq)]
pub enum LevelMap {
    /// `H⁺(P) = value(r)`, an expression in `r`.
    Expr(Expression),
    /// `P(r) = (r, 0)` directly.
    SectionAbscissa,
}

impl LevelMap {
    pub fn parse(src: &str) -> Result<Self, ParseError> {
        Ok(LevelMap::Expr(crate::field::parse_with_vars(src, &["r"], &[])?))
    }

    pub fn value(&self, r: f64) -> Option<f64> {
        match self {
            LevelMap::Expr(e) => Some(e.eval(r, 0.0)),
            LevelMap::SectionAbscissa => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelnikovOptions {
    pub trace: TraceOptions,
    /// Shared threshold on |H_x| at P and P₁ for every ratio denominator.
    pub transversality: f64,
    /// Lower trace must return to P within this distance.
    pub closure_tol: f64,
    /// |M1| at or below this on every grid level marks M2 as meaningful.
    pub m1_zero_tol: f64,
    /// Relative tolerance for cancellation of endpoint poles.
    pub pole_tol: f64,
    /// Tolerance of the boundary-formula hypotheses on H_y and H_yy.
    pub hypothesis_tol: f64,
}

impl Default for MelnikovOptions {
    fn default() -> Self {
        MelnikovOptions { trace: TraceOptions::default(), transversality: 1e-8, closure_tol: 1e-9, m1_zero_tol: 1e-9, pole_tol: 1e-8, hypothesis_tol: 1e-9 }
    }
}

/// Two-zone Hamiltonian system with perturbation one-forms and an optional
/// perturbed switching curve.
#[derive(Debug, Clone)]
pub struct PiecewiseSystem {
    pub h_plus: ScalarField,
    pub h_minus: ScalarField,
    pub plus: Perturbation,
    pub minus: Perturbation,
    pub boundary: Option<Boundary>,
    pub annulus: AnnulusWindow,
    pub level_map: LevelMap,
    pub options: MelnikovOptions,
    /// Set when the system was time-reversed to make the flow turn
    /// counterclockwise; Melnikov values then refer to the reversed flow.
    pub reversed: bool,
}

/// Section points and half-orbits at one level.
#[derive(Debug, Clone)]
pub struct OrbitPair {
    pub r: f64,
    pub p: f64,
    pub p1: f64,
    pub upper: OrbitTrace,
    pub lower: OrbitTrace,
}

impl PiecewiseSystem {
    pub fn new(h_plus: ScalarField, h_minus: ScalarField, annulus: AnnulusWindow, level_map: LevelMap) -> Self {
        PiecewiseSystem {
            h_plus,
            h_minus,
            plus: Perturbation::default(),
            minus: Perturbation::default(),
            boundary: None,
            annulus,
            level_map,
            options: MelnikovOptions::default(),
            reversed: false,
        }
    }

    pub fn with_perturbations(mut self, plus: Perturbation, minus: Perturbation) -> Self {
        self.plus = plus;
        self.minus = minus;
        self
    }

    pub fn with_boundary(mut self, f: ScalarField, epsilon: f64) -> Self {
        self.boundary = Some(Boundary { f, epsilon });
        self
    }

    pub fn hamiltonian(&self, zone: Zone) -> &ScalarField {
        match zone {
            Zone::Upper => &self.h_plus,
            Zone::Lower => &self.h_minus,
        }
    }

    pub fn perturbation(&self, zone: Zone) -> &Perturbation {
        match zone {
            Zone::Upper => &self.plus,
            Zone::Lower => &self.minus,
        }
    }

    /// Upper section point `P(r)`.
    pub fn section_point(&self, r: f64) -> Result<SectionPoint, MelnikovError> {
        match &self.level_map {
            LevelMap::SectionAbscissa => Ok(SectionPoint { x: r, level: r }),
            LevelMap::Expr(e) => Ok(find_section_point(&self.h_plus, e.eval(r, 0.0), self.annulus.section_bracket, r, self.options.trace.section_samples)?),
        }
    }

    /// Rewrite the system in reversed time if the upper zone's flow at the
    /// middle of the window does not leave P upward.
    pub fn normalized(self) -> Result<Self, MelnikovError> {
        let r_mid = 0.5 * (self.annulus.r_min + self.annulus.r_max);
        let p = self.section_point(r_mid)?;
        let up = -self.h_plus.dx(p.x, 0.0);
        if up.abs() < self.options.transversality {
            return Err(MelnikovError::TangencyAtSection { which: "H_x+(P)", value: up.abs(), r: r_mid });
        }
        if up > 0.0 {
            return Ok(self);
        }
        Ok(self.time_reversed())
    }

    /// The same orbits traversed backwards: H±, all perturbations and the
    /// level map change sign; the switching curve is unchanged.
    pub fn time_reversed(&self) -> Self {
        let neg = |s: &ScalarField| ScalarField::new(-s.expr().clone());
        PiecewiseSystem {
            h_plus: neg(&self.h_plus),
            h_minus: neg(&self.h_minus),
            plus: self.plus.negated(),
            minus: self.minus.negated(),
            boundary: self.boundary.clone(),
            annulus: self.annulus,
            level_map: match &self.level_map {
                LevelMap::Expr(e) => LevelMap::Expr(-e.clone()),
                LevelMap::SectionAbscissa => LevelMap::SectionAbscissa,
            },
            options: self.options,
            reversed: !self.reversed,
        }
    }

    /// Multiply every perturbation field by `c`.
    pub fn scaled_perturbations(&self, c: f64) -> Self {
        let mut s = self.clone();
        s.plus = self.plus.scaled(c);
        s.minus = self.minus.scaled(c);
        s
    }

    /// Trace `Γ⁺` from `P(r)` and `Γ⁻` from its landing point back to P.
    pub fn trace_pair(&self, r: f64) -> Result<OrbitPair, MelnikovError> {
        let start = self.section_point(r)?;
        let opts = &self.options.trace;
        let upper = trace_half_orbit(&self.h_plus, start, Zone::Upper, opts)?;
        let p1 = upper.end.x;
        let lower = trace_half_orbit(&self.h_minus, SectionPoint { x: p1, level: r }, Zone::Lower, opts)?;
        let gap = (lower.end.x - start.x).abs();
        if gap > self.options.closure_tol {
            return Err(MelnikovError::NotClosed { r, gap });
        }
        Ok(OrbitPair { r, p: start.x, p1, upper, lower })
    }

    fn check_transversal(&self, pair: &OrbitPair) -> Result<SectionRatios, MelnikovError> {
        let th = self.options.transversality;
        let r = pair.r;
        let vals = [
            ("H_x+(P)", self.h_plus.dx(pair.p, 0.0)),
            ("H_x-(P)", self.h_minus.dx(pair.p, 0.0)),
            ("H_x+(P1)", self.h_plus.dx(pair.p1, 0.0)),
            ("H_x-(P1)", self.h_minus.dx(pair.p1, 0.0)),
        ];
        for (which, v) in vals {
            if v.abs() < th {
                return Err(MelnikovError::TangencyAtSection { which, value: v.abs(), r });
            }
        }
        Ok(SectionRatios { hxp_p: vals[0].1, hxm_p: vals[1].1, hxp_p1: vals[2].1, hxm_p1: vals[3].1 })
    }

    /// K± = (H_x f₁ + H_y g₁)/H_x evaluated at a section point.
    pub fn k_factor(&self, zone: Zone, x: f64) -> f64 {
        let h = self.hamiltonian(zone);
        let pert = self.perturbation(zone);
        let (hx, hy) = (h.dx(x, 0.0), h.dy(x, 0.0));
        (hx * pert.f1.evaluate(x, 0.0) + hy * pert.g1.evaluate(x, 0.0)) / hx
    }
}

#[derive(Debug, Clone, Copy)]
struct SectionRatios {
    hxp_p: f64,
    hxm_p: f64,
    hxp_p1: f64,
    hxm_p1: f64,
}

impl SectionRatios {
    /// w = H_x⁻(P₁)/H_x⁺(P₁).
    fn w(&self) -> f64 {
        self.hxm_p1 / self.hxp_p1
    }

    /// λ = H_x⁻(P)/H_x⁺(P).
    fn lambda(&self) -> f64 {
        self.hxm_p / self.hxp_p
    }
}

/// One evaluation of the Melnikov functions at level `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelnikovSample {
    pub r: f64,
    pub m1: f64,
    pub m2: Option<f64>,
    pub sigma: f64,
    pub lambda: f64,
    /// Named line integrals and terms entering the assembly.
    pub components: BTreeMap<String, f64>,
    /// Set by sweeps: M1 vanished on the whole grid.
    pub valid_m2: bool,
}

/// Weighted divided integrals that must be combined before poles cancel.
struct PoleLedger {
    /// Residue sums at P and P₁ in the sense of the common |y| cutoff.
    at_p: f64,
    at_p1: f64,
    scale: f64,
}

impl PoleLedger {
    fn new() -> Self {
        PoleLedger { at_p: 0.0, at_p1: 0.0, scale: 0.0 }
    }

    /// Record `weight * li` over the half-orbit of `zone` and return its
    /// weighted finite part.
    fn add(&mut self, zone: Zone, weight: f64, li: &LineIntegral) -> f64 {
        let li = li.scaled(weight);
        // Upper runs P → P₁, lower runs P₁ → P. A pole contributes
        // (end - start) * log(cutoff) to the unregularized sum.
        match zone {
            Zone::Upper => {
                self.at_p -= li.start_residue;
                self.at_p1 += li.end_residue;
            }
            Zone::Lower => {
                self.at_p1 -= li.start_residue;
                self.at_p += li.end_residue;
            }
        }
        self.scale = self.scale.max(li.start_residue.abs()).max(li.end_residue.abs()).max(li.finite.abs());
        li.finite
    }

    fn check(&self, tol: f64, r: f64) -> Result<(), MelnikovError> {
        let lim = tol * (1.0 + self.scale);
        if self.at_p.abs() > lim {
            return Err(MelnikovError::NonIntegrable { point: "P", residue: self.at_p, r });
        }
        if self.at_p1.abs() > lim {
            return Err(MelnikovError::NonIntegrable { point: "P1", residue: self.at_p1, r });
        }
        Ok(())
    }
}

fn plain(trace: &OrbitTrace, form: &OneForm) -> Result<f64, MelnikovError> {
    Ok(trace.line_integral(form)?)
}

/// First-order Melnikov function.
pub fn m1(system: &PiecewiseSystem, r: f64) -> Result<MelnikovSample, MelnikovError> {
    let pair = system.trace_pair(r)?;
    m1_on(system, &pair)
}

fn m1_on(system: &PiecewiseSystem, pair: &OrbitPair) -> Result<MelnikovSample, MelnikovError> {
    let ratios = system.check_transversal(pair)?;
    let i_plus = plain(&pair.upper, &system.plus.omega1())?;
    let i_minus = plain(&pair.lower, &system.minus.omega1())?;
    let m1 = (ratios.w() * i_plus + i_minus) / ratios.lambda();
    let mut components = BTreeMap::new();
    components.insert("omega1_plus".to_string(), i_plus);
    components.insert("omega1_minus".to_string(), i_minus);
    Ok(MelnikovSample { r: pair.r, m1, m2: None, sigma: i_plus / ratios.hxp_p1, lambda: ratios.lambda(), components, valid_m2: false })
}

/// Second-order Melnikov function, with M1 alongside.
pub fn m2(system: &PiecewiseSystem, r: f64) -> Result<MelnikovSample, MelnikovError> {
    let pair = system.trace_pair(r)?;
    m2_on(system, &pair)
}

fn m2_on(system: &PiecewiseSystem, pair: &OrbitPair) -> Result<MelnikovSample, MelnikovError> {
    let r = pair.r;
    let mut sample = m1_on(system, pair)?;
    let ratios = system.check_transversal(pair)?;
    let w = ratios.w();
    let sigma = sample.sigma;
    let mut ledger = PoleLedger::new();
    let mut lambda_m2 = 0.0;
    let put = |name: &str, v: f64, comps: &mut BTreeMap<String, f64>| {
        comps.insert(name.to_string(), v);
    };
    for (zone, trace, weight, suffix) in [(Zone::Upper, &pair.upper, w, "plus"), (Zone::Lower, &pair.lower, 1.0, "minus")] {
        let pert = system.perturbation(zone);
        let h = system.hamiltonian(zone);
        let hy = h.partial_expr(Partial::Y).clone();
        let omega1 = pert.omega1();
        let o2 = plain(trace, &pert.omega2())?;
        let k = system.k_factor(zone, pair.p);
        let j = if omega1.is_zero() { LineIntegral::default() } else { trace.integrate(&omega1.clone().divided_by(hy.clone()))? };
        let f1w = omega1.scaled(pert.f1.expr().clone());
        let fdiv = if f1w.is_zero() { LineIntegral::default() } else { trace.integrate(&f1w.divided_by(hy))? };
        let kd = ledger.add(zone, weight * k, &j) / weight;
        let fd = ledger.add(zone, -weight, &fdiv) / -weight;
        put(&format!("omega2_{suffix}"), o2, &mut sample.components);
        put(&format!("k_divided_{suffix}"), kd, &mut sample.components);
        put(&format!("f1_divided_{suffix}"), fd, &mut sample.components);
        lambda_m2 += weight * (o2 + kd - fd);
    }
    ledger.check(system.options.pole_tol, r)?;
    let hxx_m = system.h_minus.partial(Partial::XX, pair.p1, 0.0);
    let hxx_p = system.h_plus.partial(Partial::XX, pair.p1, 0.0);
    let curvature = 0.5 * (hxx_m - w * hxx_p) * sigma * sigma;
    put("curvature_sigma", curvature, &mut sample.components);
    lambda_m2 += curvature;
    sample.m2 = Some(lambda_m2 / ratios.lambda());
    Ok(sample)
}

/// The same first-order function assembled from the separate dx and dy
/// parts of each one-form, with the section ratios distributed.
pub fn split_m1(system: &PiecewiseSystem, r: f64) -> Result<f64, MelnikovError> {
    let pair = system.trace_pair(r)?;
    let ratios = system.check_transversal(&pair)?;
    let part = |trace: &OrbitTrace, pert: &Perturbation| -> Result<f64, MelnikovError> {
        let gdx = plain(trace, &OneForm::new(pert.g1.expr().clone(), Expression::zero()))?;
        let fdy = plain(trace, &OneForm::new(Expression::zero(), pert.f1.expr().clone()))?;
        Ok(gdx + fdy)
    };
    let upper = part(&pair.upper, &system.plus)?;
    let lower = part(&pair.lower, &system.minus)?;
    let outer = ratios.hxp_p / ratios.hxm_p;
    Ok(outer * (ratios.hxm_p1 / ratios.hxp_p1) * upper + outer * lower)
}

/// Smooth-limit first-order function: plain sum of the half-orbit integrals.
pub fn smooth_m1(system: &PiecewiseSystem, r: f64) -> Result<f64, MelnikovError> {
    let pair = system.trace_pair(r)?;
    Ok(plain(&pair.upper, &system.plus.omega1())? + plain(&pair.lower, &system.minus.omega1())?)
}

/// Smooth-limit second-order function with both zones' factors unweighted.
pub fn smooth_m2(system: &PiecewiseSystem, r: f64) -> Result<f64, MelnikovError> {
    let pair = system.trace_pair(r)?;
    let mut ledger = PoleLedger::new();
    let mut total = 0.0;
    for (zone, trace) in [(Zone::Upper, &pair.upper), (Zone::Lower, &pair.lower)] {
        let pert = system.perturbation(zone);
        let hy = system.hamiltonian(zone).partial_expr(Partial::Y).clone();
        let omega1 = pert.omega1();
        total += plain(trace, &pert.omega2())?;
        if !omega1.is_zero() {
            let k = system.k_factor(zone, pair.p);
            total += ledger.add(zone, k, &trace.integrate(&omega1.clone().divided_by(hy.clone()))?);
            total += ledger.add(zone, -1.0, &trace.integrate(&omega1.scaled(pert.f1.expr().clone()).divided_by(hy))?);
        }
    }
    ledger.check(system.options.pole_tol, r)?;
    Ok(total)
}

/// Closed-loop forms for a smooth system: the whole period is traced with
/// the upper zone's Hamiltonian and one-forms on both sides of the axis.
pub fn loop_m1(system: &PiecewiseSystem, r: f64) -> Result<f64, MelnikovError> {
    let (up, down) = loop_traces(system, r)?;
    let form = system.plus.omega1();
    Ok(plain(&up, &form)? + plain(&down, &form)?)
}

/// Closed-loop second-order form, principal value across the axis crossings.
pub fn loop_m2(system: &PiecewiseSystem, r: f64) -> Result<f64, MelnikovError> {
    let (up, down) = loop_traces(system, r)?;
    let pert = &system.plus;
    let hy = system.h_plus.partial_expr(Partial::Y).clone();
    let k = system.k_factor(Zone::Upper, up.start.x);
    let omega1 = pert.omega1();
    let mut ledger = PoleLedger::new();
    let mut total = 0.0;
    for (zone, trace) in [(Zone::Upper, &up), (Zone::Lower, &down)] {
        total += plain(trace, &pert.omega2())?;
        if !omega1.is_zero() {
            total += ledger.add(zone, k, &trace.integrate(&omega1.clone().divided_by(hy.clone()))?);
            total += ledger.add(zone, -1.0, &trace.integrate(&omega1.scaled(pert.f1.expr().clone()).divided_by(hy.clone()))?);
        }
    }
    ledger.check(system.options.pole_tol, r)?;
    Ok(total)
}

fn loop_traces(system: &PiecewiseSystem, r: f64) -> Result<(OrbitTrace, OrbitTrace), MelnikovError> {
    let start = system.section_point(r)?;
    let opts = &system.options.trace;
    let up = trace_half_orbit(&system.h_plus, start, Zone::Upper, opts)?;
    let down = trace_half_orbit(&system.h_plus, SectionPoint { x: up.end.x, level: r }, Zone::Lower, opts)?;
    Ok((up, down))
}

/// Straighten the switching curve by `v = y - ε f(x)` and keep the ε and ε²
/// terms of the resulting vector fields.
pub fn transform_boundary_system(system: &PiecewiseSystem, order: u8) -> Result<PiecewiseSystem, MelnikovError> {
    let boundary = system.boundary.as_ref().ok_or(MelnikovError::NoBoundary)?;
    let f = boundary.f.expr().clone();
    if f.depends_on(Axis::Y) {
        return Err(MelnikovError::BoundaryDependsOnY);
    }
    let fp = f.derivative(Axis::X);
    let induced = |h: &ScalarField, base: &Perturbation| -> Perturbation {
        let e = |p: Partial| h.partial_expr(p).clone();
        let half = Expression::rational(1, 2);
        let f1 = f.clone() * e(Partial::YY);
        let g1 = -(fp.clone() * e(Partial::Y) + f.clone() * e(Partial::XY));
        let (f2, g2) = if order >= 2 {
            (
                half.clone() * f.clone() * f.clone() * e(Partial::YYY),
                -(f.clone() * (half * f.clone() * e(Partial::XYY) + fp.clone() * e(Partial::YY))),
            )
        } else {
            (Expression::zero(), Expression::zero())
        };
        let add = |a: &ScalarField, b: Expression| ScalarField::new(a.expr().clone() + b);
        Perturbation { f1: add(&base.f1, f1), g1: add(&base.g1, g1), f2: add(&base.f2, f2), g2: add(&base.g2, g2) }
    };
    let mut out = system.clone();
    out.plus = induced(&system.h_plus, &system.plus);
    out.minus = induced(&system.h_minus, &system.minus);
    out.boundary = None;
    Ok(out)
}

/// Which route produced a boundary Melnikov value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryPath {
    ClosedForm,
    Transformed,
}

impl BoundaryPath {
    pub fn label(self) -> &'static str {
        match self {
            BoundaryPath::ClosedForm => "closed_form",
            BoundaryPath::Transformed => "transformed",
        }
    }
}

/// Boundary Melnikov value with the route taken and any named terms.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryValue {
    pub r: f64,
    pub value: f64,
    pub path: BoundaryPath,
    pub sigma: f64,
    pub lambda: f64,
    pub components: BTreeMap<String, f64>,
}

fn boundary_hypothesis(system: &PiecewiseSystem, pair: &OrbitPair, with_second: bool) -> bool {
    let tol = system.options.hypothesis_tol;
    let mut partials = vec![Partial::Y];
    if with_second {
        partials.push(Partial::YY);
    }
    partials.iter().all(|&d| {
        [&system.h_plus, &system.h_minus].iter().all(|h| {
            let (a, b) = (h.partial(d, pair.p, 0.0), h.partial(d, pair.p1, 0.0));
            (a - b).abs() <= tol * (1.0 + a.abs())
        })
    })
}

/// First-order boundary Melnikov function in closed form when
/// H_y±(P) = H_y±(P₁); otherwise M1 of the transformed system.
pub fn boundary_m1(system: &PiecewiseSystem, r: f64) -> Result<BoundaryValue, MelnikovError> {
    let boundary = system.boundary.as_ref().ok_or(MelnikovError::NoBoundary)?;
    let pair = system.trace_pair(r)?;
    let ratios = system.check_transversal(&pair)?;
    if !boundary_hypothesis(system, &pair, false) {
        let t = transform_boundary_system(system, 1)?;
        let s = m1_on(&t, &pair)?;
        return Ok(BoundaryValue { r, value: s.m1, path: BoundaryPath::Transformed, sigma: s.sigma, lambda: s.lambda, components: s.components });
    }
    let f = &boundary.f;
    let (p, p1) = (pair.p, pair.p1);
    let hyp = system.h_plus.dy(p1, 0.0);
    let hym = system.h_minus.dy(p1, 0.0);
    let jump = hyp / ratios.hxp_p1 - hym / ratios.hxm_p1;
    let df = f.evaluate(p, 0.0) - f.evaluate(p1, 0.0);
    let lambda_m1 = ratios.hxm_p1 * jump * df;
    let sigma = (f.evaluate(p, 0.0) * system.h_plus.dy(p, 0.0) - f.evaluate(p1, 0.0) * hyp) / ratios.hxp_p1;
    let mut components = BTreeMap::new();
    components.insert("boundary_jump".to_string(), lambda_m1);
    let mut value = lambda_m1 / ratios.lambda();
    let mut sigma = sigma;
    if !(system.plus.is_zero() && system.minus.is_zero()) {
        let interior = m1_on(system, &pair)?;
        value += interior.m1;
        sigma += interior.sigma;
        components.extend(interior.components);
    }
    Ok(BoundaryValue { r, value, path: BoundaryPath::ClosedForm, sigma, lambda: ratios.lambda(), components })
}

/// Second-order boundary Melnikov function assembled term by term when the
/// H_y and H_yy hypotheses hold; otherwise M2 of the order-2 transformed system.
pub fn boundary_m2(system: &PiecewiseSystem, r: f64) -> Result<BoundaryValue, MelnikovError> {
    let boundary = system.boundary.as_ref().ok_or(MelnikovError::NoBoundary)?;
    let pair = system.trace_pair(r)?;
    let ratios = system.check_transversal(&pair)?;
    let t1sys = transform_boundary_system(system, 2)?;
    if !boundary_hypothesis(system, &pair, true) || !(system.plus.is_zero() && system.minus.is_zero()) {
        let s = m2_on(&t1sys, &pair)?;
        return Ok(BoundaryValue { r, value: s.m2.unwrap_or(f64::NAN), path: BoundaryPath::Transformed, sigma: s.sigma, lambda: s.lambda, components: s.components });
    }
    let f = boundary.f.expr().clone();
    let fp = f.derivative(Axis::X);
    let (p, p1) = (pair.p, pair.p1);
    let (fp_val, fp1_val) = (f.eval(p, 0.0), f.eval(p1, 0.0));
    let w = ratios.w();
    let hyy = |h: &ScalarField, x: f64| h.partial(Partial::YY, x, 0.0);

    let t1 = 0.5 * ratios.hxm_p1 * (hyy(&system.h_plus, p1) / ratios.hxp_p1 - hyy(&system.h_minus, p1) / ratios.hxm_p1) * (fp_val * fp_val - fp1_val * fp1_val);
    let kp = t1sys.k_factor(Zone::Upper, p);
    let km = t1sys.k_factor(Zone::Lower, p);
    let t2 = (ratios.hxm_p1 * kp - ratios.hxp_p1 * km) / ratios.hxp_p1 * (fp_val - fp1_val);

    let mut ledger = PoleLedger::new();
    let mut t3 = 0.0;
    let mut t4 = 0.0;
    for (zone, trace, weight, k) in [(Zone::Lower, &pair.lower, 1.0, km), (Zone::Upper, &pair.upper, w, kp)] {
        let h = system.hamiltonian(zone);
        let e = |d: Partial| h.partial_expr(d).clone();
        // (f/H_y) dH_y
        let log_form = OneForm::new(f.clone() * e(Partial::XY), -(f.clone() * e(Partial::YY))).divided_by(e(Partial::Y));
        // H_yy [d(f²/2) + (f²/H_y) dH_y]
        let f2 = f.clone() * f.clone();
        let curv_form = OneForm::new(
            e(Partial::YY) * (f.clone() * fp.clone() * e(Partial::Y) + f2.clone() * e(Partial::XY)),
            -(e(Partial::YY) * f2 * e(Partial::YY)),
        )
        .divided_by(e(Partial::Y));
        let lf = trace.integrate(&log_form)?;
        let cf = trace.integrate(&curv_form)?;
        t3 += ledger.add(zone, -weight * k, &lf);
        t4 += ledger.add(zone, weight, &cf);
    }
    ledger.check(system.options.pole_tol, r)?;

    let sigma = plain(&pair.upper, &t1sys.plus.omega1())? / ratios.hxp_p1;
    let hxx = |h: &ScalarField| h.partial(Partial::XX, p1, 0.0);
    let t5 = 0.5 * (hxx(&system.h_minus) - w * hxx(&system.h_plus)) * sigma * sigma;

    let mut components = BTreeMap::new();
    components.insert("boundary_quadratic".to_string(), t1);
    components.insert("boundary_k_jump".to_string(), t2);
    components.insert("boundary_log_derivative".to_string(), t3);
    components.insert("boundary_curvature".to_string(), t4);
    components.insert("curvature_sigma".to_string(), t5);
    let value = (t1 + t2 + t3 + t4 + t5) / ratios.lambda();
    Ok(BoundaryValue { r, value, path: BoundaryPath::ClosedForm, sigma, lambda: ratios.lambda(), components })
}

/// Which family of Melnikov functions a sweep evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    General,
    Boundary,
}

/// One sweep row; M2 may fail independently of M1.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub r: f64,
    pub m1: f64,
    pub m2: Option<f64>,
    pub m2_error: Option<String>,
    pub sigma: f64,
    pub lambda: f64,
    pub valid_m2: bool,
    pub components: BTreeMap<String, f64>,
}

fn sweep_point(system: &PiecewiseSystem, kind: SweepKind, r: f64) -> Result<SweepRow, MelnikovError> {
    match kind {
        SweepKind::General => {
            let first = m1(system, r)?;
            let (m2, err, comps) = match m2(system, r) {
                Ok(s) => (s.m2, None, s.components),
                Err(e) => (None, Some(e.to_string()), first.components.clone()),
            };
            Ok(SweepRow { r, m1: first.m1, m2, m2_error: err, sigma: first.sigma, lambda: first.lambda, valid_m2: false, components: comps })
        }
        SweepKind::Boundary => {
            let first = boundary_m1(system, r)?;
            let (m2, err, comps) = match boundary_m2(system, r) {
                Ok(s) => (Some(s.value), None, s.components),
                Err(e) => (None, Some(e.to_string()), BTreeMap::new()),
            };
            Ok(SweepRow { r, m1: first.value, m2, m2_error: err, sigma: first.sigma, lambda: first.lambda, valid_m2: false, components: comps })
        }
    }
}

/// Evaluate on `grid` levels in parallel; rows come back in grid order.
/// `valid_m2` is set on every row when |M1| stays below the zero tolerance
/// on the whole grid.
pub fn sweep(system: &PiecewiseSystem, kind: SweepKind, grid: &[f64]) -> Result<Vec<SweepRow>, MelnikovError> {
    let rows: Result<Vec<SweepRow>, MelnikovError> = grid.par_iter().map(|&r| sweep_point(system, kind, r)).collect();
    let mut rows = rows?;
    let valid = rows.iter().all(|row| row.m1.abs() <= system.options.m1_zero_tol);
    for row in &mut rows {
        row.valid_m2 = valid;
    }
    Ok(rows)
}

/// CSV with the fixed leading columns followed by every named term.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<(), csv::Error> {
    let mut names: Vec<String> = rows.iter().flat_map(|r| r.components.keys().cloned()).collect();
    names.sort();
    names.dedup();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["r".to_string(), "M1".into(), "M2".into(), "sigma".into(), "lambda".into(), "valid_m2".into()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![
            row.r.to_string(),
            row.m1.to_string(),
            row.m2.map(|v| v.to_string()).unwrap_or_default(),
            row.sigma.to_string(),
            row.lambda.to_string(),
            row.valid_m2.to_string(),
        ];
        rec.extend(names.iter().map(|n| row.components.get(n).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(s: &str) -> ScalarField {
        ScalarField::parse(s).unwrap()
    }

    fn center_center() -> PiecewiseSystem {
        PiecewiseSystem::new(
            f("-y - x^2"),
            f("y - x^2"),
            AnnulusWindow { r_min: 0.1, r_max: 1.0, section_bracket: (1e-6, 10.0) },
            LevelMap::parse("-r^2").unwrap(),
        )
    }

    #[test]
    fn zero_perturbation_gives_zero() {
        let s = m2(&center_center(), 0.5).unwrap();
        assert_eq!(s.m1, 0.0);
        assert_eq!(s.m2, Some(0.0));
    }

    #[test]
    fn quadratic_g_oracle() {
        let (d, l) = (0.7, -1.9);
        let sys = center_center().with_perturbations(
            Perturbation::first_order(ScalarField::zero(), f(&format!("{d}*x^2"))),
            Perturbation::first_order(ScalarField::zero(), f(&format!("{l}*x^2"))),
        );
        for r in [0.25f64, 0.5, 1.0] {
            let v = m1(&sys, r).unwrap().m1;
            let want = 2.0 / 3.0 * (l - d) * r.powi(3);
            assert!((v - want).abs() < 1e-12, "{r}: {v} vs {want}");
        }
    }

    #[test]
    fn sigma_matches_upper_integral() {
        let sys = center_center().with_perturbations(
            Perturbation::first_order(f("x*y"), f("x^2 + y")),
            Perturbation::first_order(f("y^2"), f("3*x^2")),
        );
        let s = m1(&sys, 0.6).unwrap();
        let hx_p1 = sys.h_plus.dx(-0.6, 0.0);
        assert!((s.sigma * hx_p1 - s.components["omega1_plus"]).abs() < 1e-12);
    }

    #[test]
    fn transform_of_linear_upper_field() {
        let sys = center_center().with_boundary(f("sin(x)"), 0.01);
        let t = transform_boundary_system(&sys, 2).unwrap();
        // H_yy⁺ = 0 for H⁺ = -y - x², so X⁺ is unchanged and g₁⁺ = f'(x).
        for x in [0.3, -1.2] {
            assert_eq!(t.plus.f1.evaluate(x, 0.4), 0.0);
            assert!((t.plus.g1.evaluate(x, 0.4) - f64::cos(x)).abs() < 1e-15);
        }
        let saddle = PiecewiseSystem { h_plus: f("(y-1)^2/2 - x^2/2"), ..sys.clone() };
        let t = transform_boundary_system(&saddle, 1).unwrap();
        for (x, y) in [(0.3, 0.2), (-0.8, 0.5)] {
            assert!((t.plus.f1.evaluate(x, y) - f64::sin(x)).abs() < 1e-15);
            assert!((t.plus.g1.evaluate(x, y) + f64::cos(x) * (y - 1.0)).abs() < 1e-15);
        }
        let zero = transform_boundary_system(&center_center().with_boundary(ScalarField::zero(), 0.1), 2).unwrap();
        assert!(zero.plus.is_zero() && zero.minus.is_zero());
    }

    #[test]
    fn boundary_closed_form_center_center() {
        let sys = center_center().with_boundary(f("x^3 - x"), 0.01);
        for r in [0.3f64, 0.6, 0.9] {
            let b = boundary_m1(&sys, r).unwrap();
            assert_eq!(b.path, BoundaryPath::ClosedForm);
            let fr = |x: f64| x.powi(3) - x;
            assert!((b.value - 2.0 * (fr(-r) - fr(r))).abs() < 1e-10);
        }
    }

    #[test]
    fn reversal_flips_orientation() {
        let circle = PiecewiseSystem::new(
            f("(x^2 + y^2)/2"),
            f("(x^2 + y^2)/2"),
            AnnulusWindow { r_min: 0.2, r_max: 1.5, section_bracket: (1e-6, 10.0) },
            LevelMap::parse("r^2/2").unwrap(),
        );
        let n = circle.normalized().unwrap();
        assert!(n.reversed);
        let pair = n.trace_pair(1.0).unwrap();
        assert!((pair.p1 + 1.0).abs() < 1e-11);
    }
}
