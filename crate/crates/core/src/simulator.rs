//! Event-driven integration of the perturbed two-zone system in original
//! coordinates: switching-curve classification, return maps, the
//! difference map and finite-ε Melnikov estimates.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::field::{Axis, Expression, ScalarField};
use crate::melnikov::{MelnikovError, PiecewiseSystem};
use crate::ode::{integrate_to_event, EventFn, OdeError, OdeOptions, State};
use crate::orbit::Zone;
use crate::roots::brent;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SimError {
    #[error("trajectory reached a non-crossing point ({classification}) at ({x}, {y})")]
    SlidingReached { x: f64, y: f64, classification: Classification },
    #[error("no return to the switching curve: {0}")]
    NoReturn(OdeError),
    #[error("switching crossings {dt} apart in time at x = {x}")]
    DegenerateEvent { x: f64, dt: f64 },
    #[error("all Lie derivatives up to order {max_k} vanish")]
    OrderExceeded { max_k: u32 },
    #[error("no sign change of the displacement in [{lo}, {hi}]")]
    NoFixedPoint { lo: f64, hi: f64 },
    #[error("ill-conditioned fit: {0}")]
    FitIllConditioned(String),
    #[error(transparent)]
    Melnikov(#[from] MelnikovError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Classification {
    Crossing,
    Sliding,
    Escaping,
    Degenerate,
}

impl std::fmt::Display for Classification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Classification::Crossing => "crossing",
            Classification::Sliding => "sliding",
            Classification::Escaping => "escaping",
            Classification::Degenerate => "degenerate",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub ode: OdeOptions,
    /// |s±| at or below this marks a tangency.
    pub degenerate_tol: f64,
    /// Two crossings closer than this in time are flagged.
    pub event_separation: f64,
    /// Displacements below this are treated as zero.
    pub noise_floor: f64,
    /// Half-width of the search bracket around p(r★).
    pub cycle_halfwidth: f64,
    pub cycle_samples: usize,
    /// Central-difference step for the return-map derivative.
    pub derivative_step: f64,
    pub max_contact_order: u32,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            ode: OdeOptions::default(),
            degenerate_tol: 1e-10,
            event_separation: 1e-12,
            noise_floor: 1e-10,
            cycle_halfwidth: 0.05,
            cycle_samples: 9,
            derivative_step: 1e-5,
            max_contact_order: 4,
        }
    }
}

/// Point `(x, εf(x))` on the switching curve with its Filippov class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwitchingPoint {
    pub x: f64,
    pub y: f64,
    pub classification: Classification,
    pub s_plus: f64,
    pub s_minus: f64,
    /// Contact orders of the upper and lower fields, computed at tangencies.
    pub contact_orders: Option<(Option<u32>, Option<u32>)>,
}

/// Perturbed vector fields and switching curve of one system at fixed ε.
struct Flow<'a> {
    system: &'a PiecewiseSystem,
    eps: f64,
    curve: Option<&'a ScalarField>,
}

impl<'a> Flow<'a> {
    fn new(system: &'a PiecewiseSystem, eps: f64) -> Self {
        Flow { system, eps, curve: system.boundary.as_ref().map(|b| &b.f) }
    }

    fn field(&self, zone: Zone, s: &State) -> State {
        let h = self.system.hamiltonian(zone);
        let p = self.system.perturbation(zone);
        let (x, y, e) = (s[0], s[1], self.eps);
        [
            h.dy(x, y) + e * (p.f1.evaluate(x, y) + e * p.f2.evaluate(x, y)),
            -h.dx(x, y) + e * (p.g1.evaluate(x, y) + e * p.g2.evaluate(x, y)),
        ]
    }

    fn curve_y(&self, x: f64) -> f64 {
        self.curve.map_or(0.0, |f| self.eps * f.evaluate(x, 0.0))
    }

    fn curve_slope(&self, x: f64) -> f64 {
        self.curve.map_or(0.0, |f| self.eps * f.dx(x, 0.0))
    }

    /// `s = −n·X` with `n = ∇(y − εf(x))`.
    fn s_value(&self, zone: Zone, x: f64) -> f64 {
        let v = self.field(zone, &[x, self.curve_y(x)]);
        self.curve_slope(x) * v[0] - v[1]
    }

    fn classify(&self, x: f64, opts: &SimOptions) -> SwitchingPoint {
        let y = self.curve_y(x);
        let sp = self.s_value(Zone::Upper, x);
        let sm = self.s_value(Zone::Lower, x);
        let classification = if sp.abs() <= opts.degenerate_tol || sm.abs() <= opts.degenerate_tol {
            Classification::Degenerate
        } else if sp * sm > 0.0 {
            Classification::Crossing
        } else if sp < 0.0 {
            Classification::Sliding
        } else {
            Classification::Escaping
        };
        let contact_orders = (classification == Classification::Degenerate).then(|| {
            let k = |z| contact_order(self.system, z, x, self.eps, opts.max_contact_order).ok();
            (k(Zone::Upper), k(Zone::Lower))
        });
        SwitchingPoint { x, y, classification, s_plus: sp, s_minus: sm, contact_orders }
    }
}

impl EventFn for Flow<'_> {
    fn value(&self, s: &State) -> f64 {
        s[1] - self.curve_y(s[0])
    }
    fn gradient(&self, s: &State) -> State {
        [-self.curve_slope(s[0]), 1.0]
    }
}

/// Filippov classification of the curve point above `x`.
pub fn classify_boundary_point(system: &PiecewiseSystem, x: f64, eps: f64, opts: &SimOptions) -> SwitchingPoint {
    Flow::new(system, eps).classify(x, opts)
}

fn zone_field_exprs(system: &PiecewiseSystem, zone: Zone, eps: f64) -> [Expression; 2] {
    let h = system.hamiltonian(zone);
    let p = system.perturbation(zone);
    let e1 = Expression::real(eps);
    let e2 = Expression::real(eps * eps);
    [
        h.partial_expr(crate::field::Partial::Y).clone() + e1.clone() * p.f1.expr().clone() + e2.clone() * p.f2.expr().clone(),
        -h.partial_expr(crate::field::Partial::X).clone() + e1 * p.g1.expr().clone() + e2 * p.g2.expr().clone(),
    ]
}

/// Smallest k ≤ max_k with `X^k φ ≠ 0` at `(x, εf(x))`, where `φ = y − εf(x)`
/// and `X` is the perturbed field of `zone`.
pub fn contact_order(system: &PiecewiseSystem, zone: Zone, x: f64, eps: f64, max_k: u32) -> Result<u32, SimError> {
    let [fx, fy] = zone_field_exprs(system, zone, eps);
    let curve = system.boundary.as_ref().map_or(Expression::zero(), |b| Expression::real(eps) * b.f.expr().clone());
    let y = curve.eval(x, 0.0);
    let mut phi = Expression::y() - curve;
    for k in 1..=max_k {
        phi = fx.clone() * phi.derivative(Axis::X) + fy.clone() * phi.derivative(Axis::Y);
        if phi.eval(x, y).abs() > 1e-10 {
            return Ok(k);
        }
    }
    Err(SimError::OrderExceeded { max_k })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SectionTarget {
    /// First arrival on the switching curve.
    FirstCrossing,
    /// Second arrival, back on the starting side after one full turn.
    FullReturn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Crossing,
    Return,
}

/// Arrival on the switching curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwitchEvent {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub kind: EventKind,
    pub classification: Classification,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub zone: Zone,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub samples: Vec<TrajectorySample>,
    pub events: Vec<SwitchEvent>,
    pub end: State,
    pub degenerate: bool,
}

impl Trajectory {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x", "y", "zone"])?;
        for s in &self.samples {
            w.write_record([s.t.to_string(), s.x.to_string(), s.y.to_string(), s.zone.label().to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn events_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.events).expect("plain data")
    }
}

/// Integrate the true system from `start` to the requested section. The
/// zone field is switched only at crossing points.
pub fn flow_to_section(system: &PiecewiseSystem, start: State, eps: f64, target: SectionTarget, opts: &SimOptions) -> Result<Trajectory, SimError> {
    let flow = Flow::new(system, eps);
    let phi0 = flow.value(&start);
    let mut zone = if phi0.abs() > 1e-13 {
        if phi0 > 0.0 {
            Zone::Upper
        } else {
            Zone::Lower
        }
    } else {
        let pt = flow.classify(start[0], opts);
        if pt.classification != Classification::Crossing {
            return Err(SimError::SlidingReached { x: pt.x, y: pt.y, classification: pt.classification });
        }
        if pt.s_plus < 0.0 {
            Zone::Upper
        } else {
            Zone::Lower
        }
    };
    let needed = match target {
        SectionTarget::FirstCrossing => 1,
        SectionTarget::FullReturn => 2,
    };
    let mut t = 0.0;
    let mut y = start;
    let mut samples = vec![TrajectorySample { t, x: y[0], y: y[1], zone }];
    let mut events = Vec::new();
    let mut degenerate = false;
    loop {
        let rhs = |s: &State| flow.field(zone, s);
        let hit = integrate_to_event(&rhs, t, y, &flow, zone.sign(), &opts.ode).map_err(SimError::NoReturn)?;
        for st in hit.steps.iter().skip(1).filter(|s| s.t0 < hit.t) {
            let p = st.eval(st.t0);
            samples.push(TrajectorySample { t: st.t0, x: p[0], y: p[1], zone });
        }
        samples.push(TrajectorySample { t: hit.t, x: hit.y[0], y: hit.y[1], zone });
        if hit.t - t < opts.event_separation {
            degenerate = true;
        }
        let pt = flow.classify(hit.y[0], opts);
        let kind = if events.len() + 1 == needed && needed == 2 { EventKind::Return } else { EventKind::Crossing };
        events.push(SwitchEvent { t: hit.t, x: hit.y[0], y: hit.y[1], kind, classification: pt.classification });
        if events.len() == needed {
            return Ok(Trajectory { samples, events, end: hit.y, degenerate });
        }
        if pt.classification != Classification::Crossing {
            return Err(SimError::SlidingReached { x: pt.x, y: pt.y, classification: pt.classification });
        }
        zone = match zone {
            Zone::Upper => Zone::Lower,
            Zone::Lower => Zone::Upper,
        };
        t = hit.t;
        y = hit.y;
    }
}

/// One evaluation of the difference map with its four-part split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DifferenceRecord {
    pub r: f64,
    pub epsilon: f64,
    pub value: f64,
    pub l_parts: [f64; 4],
    pub p: f64,
    pub p2: f64,
    pub q: f64,
    pub degenerate: bool,
}

impl DifferenceRecord {
    /// |L1 + L2 + L3 + L4 − value|.
    pub fn telescoping_gap(&self) -> f64 {
        (self.l_parts.iter().sum::<f64>() - self.value).abs()
    }
}

/// Start on the curve above `(p, 0)`.
fn curve_start(system: &PiecewiseSystem, p: f64, eps: f64) -> State {
    [p, Flow::new(system, eps).curve_y(p)]
}

/// Full return from the curve point above `P(r)`: `H⁺(Q) − H⁺(P)` with the
/// landing abscissae `p₂`, `q`, and the split through `H⁻`.
pub fn difference_map(system: &PiecewiseSystem, r: f64, eps: f64, opts: &SimOptions) -> Result<DifferenceRecord, SimError> {
    let p = system.section_point(r)?.x;
    difference_at(system, r, p, eps, opts)
}

fn difference_at(system: &PiecewiseSystem, r: f64, p: f64, eps: f64, opts: &SimOptions) -> Result<DifferenceRecord, SimError> {
    let traj = flow_to_section(system, curve_start(system, p, eps), eps, SectionTarget::FullReturn, opts)?;
    let p2 = traj.events[0].x;
    let q = traj.events[1].x;
    let hp = |x: f64| system.h_plus.evaluate(x, 0.0);
    let hm = |x: f64| system.h_minus.evaluate(x, 0.0);
    let l_parts = [hp(q) - hm(q), hm(q) - hm(p2), hm(p2) - hp(p2), hp(p2) - hp(p)];
    Ok(DifferenceRecord { r, epsilon: eps, value: hp(q) - hp(p), l_parts, p, p2, q, degenerate: traj.degenerate })
}

/// Melnikov coefficients recovered from a ladder of ε values.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericMelnikov {
    pub m1_hat: f64,
    pub m2_hat: f64,
    /// Slope of log|value| against log ε over rungs above the noise floor.
    pub value_slope: Option<f64>,
    /// Slope of log|value/ε − M1| against log ε, when an analytic M1 is given.
    pub residual_slope: Option<f64>,
    pub records: Vec<DifferenceRecord>,
}

/// Least-squares line `y = a + b x`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= f64::EPSILON * mx.abs().max(1.0) {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    Some((my - b * mx, b))
}

fn log_slope(eps: &[f64], vals: &[f64], floor: f64) -> Option<f64> {
    let (lx, ly): (Vec<f64>, Vec<f64>) = eps.iter().zip(vals).filter(|(_, v)| v.abs() > floor).map(|(e, v)| (e.ln(), v.abs().ln())).unzip();
    if 2 * lx.len() < eps.len() {
        return None;
    }
    linear_fit(&lx, &ly).map(|(_, b)| b)
}

/// Fit `value/ε = M1 + M2 ε` over the ladder. With an analytic M1 the fit of
/// `(value − ε M1)/ε²` gives M2 and the residual slope is reported.
pub fn numeric_melnikov(system: &PiecewiseSystem, r: f64, ladder: &[f64], analytic_m1: Option<f64>, opts: &SimOptions) -> Result<NumericMelnikov, SimError> {
    if ladder.len() < 4 {
        return Err(SimError::FitIllConditioned(format!("{} rungs, need at least 4", ladder.len())));
    }
    if ladder.iter().any(|e| *e <= 0.0) || ladder.windows(2).any(|w| w[1] >= w[0]) {
        return Err(SimError::FitIllConditioned("ladder must be positive and strictly descending".into()));
    }
    let records = ladder.par_iter().map(|&e| difference_map(system, r, e, opts)).collect::<Result<Vec<_>, _>>()?;
    let values: Vec<f64> = records.iter().map(|d| d.value).collect();
    let scaled: Vec<f64> = values.iter().zip(ladder).map(|(v, e)| v / e).collect();
    let (m1_fit, m2_fit) = linear_fit(ladder, &scaled).ok_or_else(|| SimError::FitIllConditioned("degenerate ladder".into()))?;
    let value_slope = log_slope(ladder, &values, opts.noise_floor * 1e-2);
    let (m1_hat, m2_hat, residual_slope) = match analytic_m1 {
        Some(m1) => {
            let second: Vec<f64> = values.iter().zip(ladder).map(|(v, e)| (v - e * m1) / (e * e)).collect();
            let (m2, _) = linear_fit(ladder, &second).ok_or_else(|| SimError::FitIllConditioned("degenerate ladder".into()))?;
            let resid: Vec<f64> = scaled.iter().map(|s| s - m1).collect();
            (m1_fit, m2, log_slope(ladder, &resid, 0.0))
        }
        None => (m1_fit, m2_fit, None),
    };
    Ok(NumericMelnikov { m1_hat, m2_hat, value_slope, residual_slope, records })
}

/// Outcome of the fixed-point search for the full return map.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleVerdict {
    pub found: bool,
    /// ε = 0: the return map is the identity.
    pub degenerate: bool,
    pub fixed_point: f64,
    pub return_map_derivative: f64,
    /// Stability in the system's own time direction.
    pub stable: bool,
    pub epsilon: f64,
}

/// Search for a fixed point of `p ↦ q(p, ε)` near `p(r★)` and measure the
/// derivative of the return map there.
pub fn verify_limit_cycle(system: &PiecewiseSystem, r_star: f64, eps: f64, opts: &SimOptions) -> Result<CycleVerdict, SimError> {
    let p_star = system.section_point(r_star)?.x;
    if eps == 0.0 {
        return Ok(CycleVerdict { found: false, degenerate: true, fixed_point: p_star, return_map_derivative: 1.0, stable: false, epsilon: eps });
    }
    let ret = |p: f64| -> Result<f64, SimError> { Ok(difference_at(system, r_star, p, eps, opts)?.q) };
    let lo = p_star - opts.cycle_halfwidth;
    let hi = p_star + opts.cycle_halfwidth;
    let n = opts.cycle_samples.max(3);
    let grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let disp = grid.par_iter().map(|&p| ret(p).map(|q| q - p)).collect::<Result<Vec<f64>, _>>()?;
    let clean = |d: f64| if d.abs() <= opts.noise_floor { 0.0 } else { d };
    // Brackets run between consecutive samples above the noise floor, so a
    // fixed point sitting on a sample is still enclosed.
    let mut best: Option<(f64, f64)> = None;
    let mut prev: Option<usize> = None;
    for i in 0..n {
        let di = clean(disp[i]);
        if di == 0.0 {
            continue;
        }
        if let Some(j) = prev {
            if clean(disp[j]) * di < 0.0 {
                let mid = 0.5 * (grid[j] + grid[i]);
                if best.is_none_or(|(a, b)| (mid - p_star).abs() < (0.5 * (a + b) - p_star).abs()) {
                    best = Some((grid[j], grid[i]));
                }
            }
        }
        prev = Some(i);
    }
    let (a, b) = best.ok_or(SimError::NoFixedPoint { lo, hi })?;
    let mut failure = None;
    let root = brent(
        |p| match ret(p) {
            Ok(q) => q - p,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        a,
        b,
        1e-13,
        200,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let p_hat = root.ok_or(SimError::NoFixedPoint { lo: a, hi: b })?;
    let h = opts.derivative_step;
    let deriv = (ret(p_hat + h)? - ret(p_hat - h)?) / (2.0 * h);
    let forward_stable = deriv.abs() < 1.0;
    Ok(CycleVerdict { found: true, degenerate: false, fixed_point: p_hat, return_map_derivative: deriv, stable: forward_stable != system.reversed, epsilon: eps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    fn cc() -> PiecewiseSystem {
        presets::center_center(&Default::default())
    }

    #[test]
    fn classification_examples() {
        let o = SimOptions::default();
        let p = classify_boundary_point(&cc(), 0.7, 0.0, &o);
        assert_eq!(p.classification, Classification::Crossing);
        assert!((p.s_plus + 1.4).abs() < 1e-15 && (p.s_minus + 1.4).abs() < 1e-15);
        let origin = classify_boundary_point(&cc(), 0.0, 0.0, &o);
        assert_eq!(origin.classification, Classification::Degenerate);
        assert_eq!(origin.contact_orders, Some((Some(2), Some(2))));

        let mut swapped = presets::saddle_center(7.0, &Expression::x().sin(), 0.0);
        swapped.h_minus = ScalarField::parse("(x^2 + y^2)/2").unwrap();
        assert_eq!(classify_boundary_point(&swapped, 0.5, 0.0, &o).classification, Classification::Sliding);
        let sc = presets::saddle_center(7.0, &Expression::x().sin(), 0.0);
        assert_eq!(classify_boundary_point(&sc, 0.5, 0.0, &o).classification, Classification::Crossing);
    }

    #[test]
    fn contact_orders() {
        assert_eq!(contact_order(&cc(), Zone::Upper, 0.0, 0.0, 4), Ok(2));
        assert_eq!(contact_order(&cc(), Zone::Upper, 0.3, 0.0, 4), Ok(1));
        let sc = presets::saddle_center(7.0, &Expression::x().sin(), 0.0);
        assert_eq!(contact_order(&sc, Zone::Upper, 0.0, 0.0, 4), Ok(2));
        let flat = PiecewiseSystem { h_plus: ScalarField::parse("y").unwrap(), ..cc() };
        assert_eq!(contact_order(&flat, Zone::Upper, 0.0, 0.0, 3), Err(SimError::OrderExceeded { max_k: 3 }));
    }

    #[test]
    fn unperturbed_half_return() {
        let t = flow_to_section(&cc(), [0.5, 0.0], 0.0, SectionTarget::FirstCrossing, &SimOptions::default()).unwrap();
        assert!((t.end[0] + 0.5).abs() < 1e-12);
        assert_eq!(t.samples[0].zone, Zone::Upper);
    }

    #[test]
    fn sliding_start_is_rejected() {
        let mut swapped = presets::saddle_center(7.0, &Expression::x().sin(), 0.0);
        swapped.h_minus = ScalarField::parse("(x^2 + y^2)/2").unwrap();
        let err = flow_to_section(&swapped, [0.5, 0.0], 0.0, SectionTarget::FullReturn, &SimOptions::default()).unwrap_err();
        assert!(matches!(err, SimError::SlidingReached { .. }));
    }

    #[test]
    fn zero_epsilon_difference_vanishes() {
        let sys = presets::center_center_boundary(ScalarField::parse("x^3 - x").unwrap(), 0.0);
        let d = difference_map(&sys, 0.6, 0.0, &SimOptions::default()).unwrap();
        assert!(d.value.abs() < 1e-12);
        assert!(d.telescoping_gap() <= 1e-12);
        let v = verify_limit_cycle(&sys, 0.6, 0.0, &SimOptions::default()).unwrap();
        assert!(v.degenerate && !v.found);
    }

    #[test]
    fn fit_recovers_line() {
        let (a, b) = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]).unwrap();
        assert!((a - 1.0).abs() < 1e-14 && (b - 2.0).abs() < 1e-14);
        assert!(linear_fit(&[1.0, 1.0], &[0.0, 1.0]).is_none());
    }

    #[test]
    fn short_ladder_rejected() {
        let e = numeric_melnikov(&cc(), 0.5, &[1e-2, 5e-3], None, &SimOptions::default()).unwrap_err();
        assert!(matches!(e, SimError::FitIllConditioned(_)));
    }
}
