//! Half-orbits of the unperturbed zones and line integrals along them.

use std::io::Write;

use thiserror::Error;

use crate::field::{Axis, Expression, Partial, ScalarField};
use crate::ode::{integrate_to_event, DenseStep, EventFn, OdeError, OdeOptions, State};
use crate::quad;
use crate::roots::brent;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum OrbitError {
    #[error("no sign change of H(x,0) - {level_value} on [{lo}, {hi}]")]
    NoBracket { level_value: f64, lo: f64, hi: f64 },
    #[error("{count} sign changes of H(x,0) - {level_value} on the section bracket")]
    MultipleRoots { level_value: f64, count: usize },
    #[error("orbit does not return to the section: {0}")]
    NoReturn(OdeError),
    #[error("tangential return at x = {x}: |H_x| = {hx}")]
    TangentialReturn { x: f64, hx: f64 },
    #[error("vector field at x = {x} does not point into the {zone} zone")]
    WrongDirection { x: f64, zone: Zone },
    #[error("divisor vanishes inside the orbit near t = {t}")]
    DivisorVanishes { t: f64 },
    #[error("divisor has a higher-order zero at an orbit endpoint")]
    DoublePole,
    #[error("divided integral has non-cancelling endpoint poles (residues {start}, {end})")]
    EndpointPole { start: f64, end: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Zone {
    Upper,
    Lower,
}

impl Zone {
    pub fn sign(self) -> f64 {
        match self {
            Zone::Upper => 1.0,
            Zone::Lower => -1.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Zone::Upper => "upper",
            Zone::Lower => "lower",
        }
    }
}

impl std::fmt::Display for Zone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Point `(x, 0)` on the section, tagged with the level parameter `r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SectionPoint {
    pub x: f64,
    pub level: f64,
}

/// Range of level parameters over which the annulus is traced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnulusWindow {
    pub r_min: f64,
    pub r_max: f64,
    /// Bracket on the positive x-axis used to locate `P(r)`.
    pub section_bracket: (f64, f64),
}

impl AnnulusWindow {
    pub fn grid(&self, n: usize) -> Vec<f64> {
        let n = n.max(2);
        (0..n).map(|i| self.r_min + (self.r_max - self.r_min) * i as f64 / (n - 1) as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceOptions {
    pub ode: OdeOptions,
    /// Lower bound on |H_x| at section points.
    pub transversality: f64,
    /// Samples used to detect multiple crossings in `find_section_point`.
    pub section_samples: usize,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions { ode: OdeOptions::default(), transversality: 1e-8, section_samples: 64 }
    }
}

/// Solve `H(x, 0) = level_value` on `bracket`.
pub fn find_section_point(h: &ScalarField, level_value: f64, bracket: (f64, f64), r: f64, samples: usize) -> Result<SectionPoint, OrbitError> {
    let (lo, hi) = bracket;
    let g = |x: f64| h.evaluate(x, 0.0) - level_value;
    let n = samples.max(2);
    let xs: Vec<f64> = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
    let gs: Vec<f64> = xs.iter().map(|&x| g(x)).collect();
    let mut changes = Vec::new();
    for i in 0..n {
        if gs[i] == 0.0 {
            changes.push((xs[i], xs[i]));
        } else if gs[i] * gs[i + 1] < 0.0 {
            changes.push((xs[i], xs[i + 1]));
        }
    }
    if gs[n] == 0.0 {
        changes.push((xs[n], xs[n]));
    }
    match changes.len() {
        0 => Err(OrbitError::NoBracket { level_value, lo, hi }),
        1 => {
            let (a, b) = changes[0];
            let mut x = if a == b { a } else { brent(g, a, b, 0.0, 200).unwrap_or(0.5 * (a + b)) };
            // One Newton polish on the section.
            let hx = h.dx(x, 0.0);
            if hx != 0.0 {
                let xn = x - g(x) / hx;
                if g(xn).abs() < g(x).abs() {
                    x = xn;
                }
            }
            Ok(SectionPoint { x, level: r })
        }
        count => Err(OrbitError::MultipleRoots { level_value, count }),
    }
}

struct AxisEvent;

impl EventFn for AxisEvent {
    fn value(&self, y: &State) -> f64 {
        y[1]
    }
    fn gradient(&self, _: &State) -> State {
        [0.0, 1.0]
    }
}

/// Sampled half-orbit of one zone between two section points.
#[derive(Debug, Clone)]
pub struct OrbitTrace {
    pub zone: Zone,
    pub level: f64,
    pub level_value: f64,
    pub start: SectionPoint,
    pub end: SectionPoint,
    pub time_of_flight: f64,
    /// `(t, x, y)` at accepted step boundaries, ending at the return point.
    pub samples: Vec<(f64, f64, f64)>,
    hamiltonian: ScalarField,
    steps: Vec<DenseStep>,
    reversed: bool,
}

/// Follow the Hamiltonian flow of `h` from `start` through `zone` back to the x-axis.
pub fn trace_half_orbit(h: &ScalarField, start: SectionPoint, zone: Zone, opts: &TraceOptions) -> Result<OrbitTrace, OrbitError> {
    let hx0 = h.dx(start.x, 0.0);
    if hx0.abs() < opts.transversality {
        return Err(OrbitError::TangentialReturn { x: start.x, hx: hx0 });
    }
    if -hx0 * zone.sign() <= 0.0 {
        return Err(OrbitError::WrongDirection { x: start.x, zone });
    }
    let rhs = |s: &State| h.hamiltonian_velocity(s[0], s[1]);
    let y0 = [start.x, 0.0];
    let hit = integrate_to_event(&rhs, 0.0, y0, &AxisEvent, zone.sign(), &opts.ode).map_err(OrbitError::NoReturn)?;
    let hx1 = h.dx(hit.y[0], hit.y[1]);
    if hx1.abs() < opts.transversality {
        return Err(OrbitError::TangentialReturn { x: hit.y[0], hx: hx1 });
    }
    let mut samples = Vec::with_capacity(hit.steps.len() + 1);
    for st in &hit.steps {
        if st.t0 < hit.t {
            let p = st.eval(st.t0);
            let p = if samples.is_empty() { y0 } else { p };
            samples.push((st.t0, p[0], p[1]));
        }
    }
    samples.push((hit.t, hit.y[0], hit.y[1]));
    let steps: Vec<DenseStep> = hit.steps.into_iter().filter(|s| s.t0 < hit.t).collect();
    Ok(OrbitTrace {
        zone,
        level: start.level,
        level_value: h.evaluate(start.x, 0.0),
        start,
        end: SectionPoint { x: hit.y[0], level: start.level },
        time_of_flight: hit.t,
        samples,
        hamiltonian: h.clone(),
        steps,
        reversed: false,
    })
}

/// One-form `(g dx - f dy) / divisor`.
#[derive(Debug, Clone)]
pub struct OneForm {
    pub g: Expression,
    pub f: Expression,
    pub divisor: Option<Expression>,
}

impl OneForm {
    pub fn new(g: Expression, f: Expression) -> Self {
        OneForm { g, f, divisor: None }
    }

    /// Exact differential `dF = F_x dx + F_y dy`.
    pub fn exact(field: &ScalarField) -> Self {
        OneForm::new(field.partial_expr(Partial::X).clone(), -field.partial_expr(Partial::Y).clone())
    }

    pub fn divided_by(mut self, d: Expression) -> Self {
        self.divisor = Some(match self.divisor.take() {
            Some(old) => old * d,
            None => d,
        });
        self
    }

    pub fn scaled(&self, c: Expression) -> Self {
        OneForm { g: c.clone() * self.g.clone(), f: c * self.f.clone(), divisor: self.divisor.clone() }
    }

    pub fn is_zero(&self) -> bool {
        self.g.is_zero() && self.f.is_zero()
    }
}

/// A line integral split into a finite part and the pole residues of a
/// divided form at the two orbit endpoints. A plain integral has both
/// residues zero and `finite` equal to its value.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LineIntegral {
    pub finite: f64,
    pub start_residue: f64,
    pub end_residue: f64,
    pub duration: f64,
}

impl LineIntegral {
    pub fn is_regular(&self, tol: f64) -> bool {
        self.start_residue.abs() <= tol && self.end_residue.abs() <= tol
    }

    pub fn scaled(&self, c: f64) -> LineIntegral {
        LineIntegral { finite: c * self.finite, start_residue: c * self.start_residue, end_residue: c * self.end_residue, duration: self.duration }
    }
}

/// Endpoint below which a divisor is treated as vanishing.
pub const ENDPOINT_POLE_THRESHOLD: f64 = 1e-8;
/// Fraction of the trace span next to a pole handled by the fixed rule.
const POLE_WINDOW: f64 = 0.02;

/// Five-point Gauss–Legendre rule on [-1, 1].
const GL5: [(f64, f64); 5] = [
    (-0.906179845938663992797626878299393, 0.236926885056189087514264040719917),
    (-0.538469310105683091036314420700208, 0.478628670499366468041291514835639),
    (0.0, 0.568888888888888888888888888888889),
    (0.538469310105683091036314420700208, 0.478628670499366468041291514835639),
    (0.906179845938663992797626878299393, 0.236926885056189087514264040719917),
];

/// Interior samples with a divisor below this are rejected.
pub const INTERIOR_DIVISOR_THRESHOLD: f64 = 1e-12;

impl OrbitTrace {
    pub fn hamiltonian(&self) -> &ScalarField {
        &self.hamiltonian
    }

    pub fn is_reversed(&self) -> bool {
        self.reversed
    }

    /// The same orbit traversed backwards in time.
    pub fn reversed(&self) -> OrbitTrace {
        let t_end = self.time_of_flight;
        let samples = self.samples.iter().rev().map(|&(t, x, y)| (t_end - t, x, y)).collect();
        OrbitTrace {
            zone: self.zone,
            level: self.level,
            level_value: self.level_value,
            start: self.end,
            end: self.start,
            time_of_flight: t_end,
            samples,
            hamiltonian: self.hamiltonian.clone(),
            steps: self.steps.clone(),
            reversed: !self.reversed,
        }
    }

    fn direction(&self) -> f64 {
        if self.reversed {
            -1.0
        } else {
            1.0
        }
    }

    fn velocity(&self, p: &State) -> State {
        let v = self.hamiltonian.hamiltonian_velocity(p[0], p[1]);
        let s = self.direction();
        [s * v[0], s * v[1]]
    }

    /// Intervals in the trace's own time, each with the dense step and the
    /// map back to integrator time.
    fn intervals(&self) -> Vec<(f64, f64, &DenseStep)> {
        let t_end = self.time_of_flight;
        let mut out: Vec<(f64, f64, &DenseStep)> = self.steps.iter().map(|s| (s.t0, s.t1().min(t_end), s)).collect();
        if self.reversed {
            out = out.into_iter().rev().map(|(a, b, s)| (t_end - b, t_end - a, s)).collect();
        }
        out
    }

    /// Position at trace time `s`, locating the dense step by bisection.
    fn position_at(&self, s: f64) -> State {
        let t = if self.reversed { self.time_of_flight - s } else { s };
        let idx = self.steps.partition_point(|st| st.t1() < t).min(self.steps.len() - 1);
        self.steps[idx].eval(t)
    }

    /// Position at trace time `s`, using the given dense step.
    fn position_in(&self, step: &DenseStep, s: f64) -> State {
        let t = if self.reversed { self.time_of_flight - s } else { s };
        step.eval(t)
    }

    /// Integrate `form` along the trace in the time parameterization.
    pub fn integrate(&self, form: &OneForm) -> Result<LineIntegral, OrbitError> {
        let t_end = self.time_of_flight;
        if form.is_zero() {
            return Ok(LineIntegral { duration: t_end, ..Default::default() });
        }
        let numer = |p: &State| {
            let v = self.velocity(p);
            form.g.eval(p[0], p[1]) * v[0] - form.f.eval(p[0], p[1]) * v[1]
        };
        let Some(div) = &form.divisor else {
            let total: f64 = self
                .intervals()
                .into_iter()
                .map(|(a, b, st)| quad::integrate(&|s| numer(&self.position_in(st, s)), a, b, 1e-15, 1e-13))
                .sum();
            return Ok(LineIntegral { finite: total, start_residue: 0.0, end_residue: 0.0, duration: t_end });
        };

        // Interior divisor must stay bounded away from zero with fixed sign.
        let d_at = |p: &State| div.eval(p[0], p[1]);
        let interior = &self.samples[1..self.samples.len() - 1];
        let mut sign = 0.0;
        for &(t, x, y) in interior {
            let d = d_at(&[x, y]);
            if d.abs() < INTERIOR_DIVISOR_THRESHOLD || (sign != 0.0 && d.signum() != sign) {
                return Err(OrbitError::DivisorVanishes { t });
            }
            sign = d.signum();
        }
        let (div_x, div_y) = (div.derivative(Axis::X), div.derivative(Axis::Y));
        let ddot = |p: &State| {
            let v = self.velocity(p);
            div_x.eval(p[0], p[1]) * v[0] + div_y.eval(p[0], p[1]) * v[1]
        };
        let ivs = self.intervals();
        // Pole position is the zero of the divisor along the dense output, so
        // the subtraction matches what the quadrature actually samples.
        let pole = |st: &DenseStep, s0: f64| -> Result<Option<(f64, f64, f64)>, OrbitError> {
            let p0 = self.position_in(st, s0);
            if d_at(&p0).abs() >= ENDPOINT_POLE_THRESHOLD {
                return Ok(None);
            }
            let mut s = s0;
            for _ in 0..6 {
                let p = self.position_in(st, s);
                let dd = ddot(&p);
                if dd.abs() < ENDPOINT_POLE_THRESHOLD {
                    return Err(OrbitError::DoublePole);
                }
                let step = d_at(&p) / dd;
                s -= step;
                if step.abs() <= 1e-17 * (1.0 + s.abs()) {
                    break;
                }
            }
            let p = self.position_in(st, s);
            let dd = ddot(&p);
            Ok(Some((numer(&p) / dd, s, self.velocity(&p)[1].abs())))
        };
        let (first, last) = (ivs[0], ivs[ivs.len() - 1]);
        let start_pole = pole(first.2, first.0)?;
        let end_pole = pole(last.2, last.1)?;
        let (b_res, t_p, v_s) = start_pole.unwrap_or((0.0, 0.0, 1.0));
        let (a_res, t_q, v_e) = end_pole.unwrap_or((0.0, t_end, 1.0));
        let subtract = |s: f64, val: f64| {
            let mut val = val;
            if start_pole.is_some() {
                val -= b_res / (s - t_p);
            }
            if end_pole.is_some() {
                val -= a_res / (s - t_q);
            }
            val
        };
        let integrand = |st: &DenseStep, s: f64| {
            let p = self.position_in(st, s);
            subtract(s, numer(&p) / d_at(&p))
        };
        let lo = if start_pole.is_some() { t_p } else { 0.0 };
        let hi = if end_pole.is_some() { t_q } else { t_end };
        let span = hi - lo;
        // Near a pole the subtraction loses all digits to rounding in time, so
        // a short window there uses Gauss–Legendre nodes that stay clear of it.
        let window = POLE_WINDOW * span;
        let mut cut_lo = lo;
        let mut cut_hi = hi;
        let mut rem = 0.0;
        let gauss = |a: f64, b: f64| {
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            GL5.iter()
                .map(|&(x, w)| {
                    let s = mid + half * x;
                    let p = self.position_at(s);
                    w * subtract(s, numer(&p) / d_at(&p))
                })
                .sum::<f64>()
                * half
        };
        if start_pole.is_some() {
            cut_lo = lo + window;
            rem += gauss(lo, cut_lo);
        }
        if end_pole.is_some() {
            cut_hi = hi - window;
            rem += gauss(cut_hi, hi);
        }
        rem += ivs
            .iter()
            .map(|&(a, b, st)| {
                let (a, b) = (a.max(cut_lo), b.min(cut_hi));
                if b > a {
                    quad::integrate(&|s| integrand(st, s), a, b, 1e-15, 1e-13)
                } else {
                    0.0
                }
            })
            .sum::<f64>();
        let mut finite = rem;
        if start_pole.is_some() {
            finite += b_res * (span.ln() + v_s.ln());
        }
        if end_pole.is_some() {
            finite -= a_res * (span.ln() + v_e.ln());
        }
        Ok(LineIntegral { finite, start_residue: b_res, end_residue: a_res, duration: t_end })
    }

    /// Plain value of a line integral; fails if the form has an endpoint pole.
    pub fn line_integral(&self, form: &OneForm) -> Result<f64, OrbitError> {
        let li = self.integrate(form)?;
        let scale = 1.0 + li.finite.abs();
        if !li.is_regular(1e-10 * scale) {
            return Err(OrbitError::EndpointPole { start: li.start_residue, end: li.end_residue });
        }
        Ok(li.finite)
    }

    /// Largest deviation of H from its starting value over the samples.
    pub fn energy_drift(&self) -> f64 {
        let h0 = self.hamiltonian.evaluate(self.samples[0].1, self.samples[0].2);
        self.samples.iter().map(|&(_, x, y)| (self.hamiltonian.evaluate(x, y) - h0).abs()).fold(0.0, f64::max)
    }

    /// Write `t,x,y` rows with a header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x", "y"])?;
        for &(t, x, y) in &self.samples {
            w.write_record([t.to_string(), x.to_string(), y.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Free-function form of [`OrbitTrace::line_integral`].
pub fn line_integral(trace: &OrbitTrace, form: &OneForm) -> Result<f64, OrbitError> {
    trace.line_integral(form)
}
