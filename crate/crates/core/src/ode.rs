//! Dormand–Prince 5(4) integrator with dense output and event location.

use thiserror::Error;

pub type State = [f64; 2];

#[derive(Debug, Clone, Error, PartialEq)]
pub enum OdeError {
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("trajectory left the bounding box at t = {t}, ({x}, {y})")]
    LeftBox { t: f64, x: f64, y: f64 },
    #[error("no event before max time {t_max}")]
    MaxTime { t_max: f64 },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_step: f64,
    pub t_max: f64,
    /// Half-width of the square bounding box centred at the origin.
    pub bound: f64,
    pub event_tol: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions { rtol: 1e-12, atol: 1e-14, max_step: 0.1, t_max: 1e3, bound: 100.0, event_tol: 1e-12 }
    }
}

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// One accepted step with its continuous extension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseStep {
    pub t0: f64,
    pub h: f64,
    rcont: [State; 5],
}

impl DenseStep {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    pub fn eval(&self, t: f64) -> State {
        let theta = (t - self.t0) / self.h;
        let theta1 = 1.0 - theta;
        let r = &self.rcont;
        let mut out = [0.0; 2];
        for i in 0..2 {
            out[i] = r[0][i] + theta * (r[1][i] + theta1 * (r[2][i] + theta * (r[3][i] + theta1 * r[4][i])));
        }
        out
    }
}

fn axpy(y: &State, terms: &[(f64, &State)]) -> State {
    let mut out = *y;
    for (c, k) in terms {
        out[0] += c * k[0];
        out[1] += c * k[1];
    }
    out
}

struct StepResult {
    y1: State,
    k7: State,
    err: f64,
    dense: DenseStep,
}

fn dopri_step<F: Fn(&State) -> State>(rhs: &F, t: f64, y: &State, k1: &State, h: f64, opts: &OdeOptions) -> StepResult {
    let k2 = rhs(&axpy(y, &[(h * A21, k1)]));
    let k3 = rhs(&axpy(y, &[(h * A31, k1), (h * A32, &k2)]));
    let k4 = rhs(&axpy(y, &[(h * A41, k1), (h * A42, &k2), (h * A43, &k3)]));
    let k5 = rhs(&axpy(y, &[(h * A51, k1), (h * A52, &k2), (h * A53, &k3), (h * A54, &k4)]));
    let k6 = rhs(&axpy(y, &[(h * A61, k1), (h * A62, &k2), (h * A63, &k3), (h * A64, &k4), (h * A65, &k5)]));
    let y1 = axpy(y, &[(h * A71, k1), (h * A73, &k3), (h * A74, &k4), (h * A75, &k5), (h * A76, &k6)]);
    let k7 = rhs(&y1);

    let mut err = 0.0;
    for i in 0..2 {
        let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        let sc = opts.atol + opts.rtol * y[i].abs().max(y1[i].abs());
        err += (e / sc).powi(2);
    }
    err = (err / 2.0).sqrt();

    let mut rcont = [[0.0; 2]; 5];
    for i in 0..2 {
        let ydiff = y1[i] - y[i];
        let bspl = h * k1[i] - ydiff;
        rcont[0][i] = y[i];
        rcont[1][i] = ydiff;
        rcont[2][i] = bspl;
        rcont[3][i] = ydiff - h * k7[i] - bspl;
        rcont[4][i] = h * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
    }
    StepResult { y1, k7, err, dense: DenseStep { t0: t, h, rcont } }
}

/// Event function g(y) and its gradient.
pub trait EventFn {
    fn value(&self, y: &State) -> f64;
    fn gradient(&self, y: &State) -> State;
}

/// Result of integrating until a sign change of the event function.
#[derive(Debug, Clone)]
pub struct EventHit {
    pub t: f64,
    pub y: State,
    /// Accepted steps; the last one may extend past `t`.
    pub steps: Vec<DenseStep>,
}

fn initial_step<F: Fn(&State) -> State>(rhs: &F, y0: &State, f0: &State, opts: &OdeOptions) -> f64 {
    let sc = |i: usize| opts.atol + opts.rtol * y0[i].abs();
    let d0 = ((y0[0] / sc(0)).powi(2) + (y0[1] / sc(1)).powi(2)).sqrt() / 2f64.sqrt();
    let d1 = ((f0[0] / sc(0)).powi(2) + (f0[1] / sc(1)).powi(2)).sqrt() / 2f64.sqrt();
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(opts.max_step);
    let y1 = axpy(y0, &[(h0, f0)]);
    let f1 = rhs(&y1);
    let d2 = (((f1[0] - f0[0]) / sc(0)).powi(2) + ((f1[1] - f0[1]) / sc(1)).powi(2)).sqrt() / 2f64.sqrt() / h0;
    let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
    (100.0 * h0).min(h1).min(opts.max_step)
}

/// Integrate `rhs` from `(t0, y0)` until `event` changes sign from `sign` to
/// `-sign`. The starting point may lie on the event surface.
pub fn integrate_to_event<F, E>(rhs: &F, t0: f64, y0: State, event: &E, sign: f64, opts: &OdeOptions) -> Result<EventHit, OdeError>
where
    F: Fn(&State) -> State,
    E: EventFn + ?Sized,
{
    let mut t = t0;
    let mut y = y0;
    let mut k1 = rhs(&y);
    let mut h = initial_step(rhs, &y, &k1, opts);
    let mut steps = Vec::new();
    let mut fac_old: f64 = 1e-4;
    let mut reject = false;

    loop {
        if t - t0 > opts.t_max {
            return Err(OdeError::MaxTime { t_max: opts.t_max });
        }
        if h.abs() < 1e-14 * t.abs().max(1.0) {
            return Err(OdeError::StepUnderflow { t });
        }
        let step = dopri_step(rhs, t, &y, &k1, h, opts);
        if !step.err.is_finite() || !step.y1[0].is_finite() || !step.y1[1].is_finite() {
            h *= 0.25;
            reject = true;
            continue;
        }
        // PI step-size control.
        let fac11 = step.err.powf(0.2 - 0.04 * 0.75);
        let fac = (fac11 / fac_old.powf(0.04)) / 0.9;
        let fac = fac.clamp(1.0 / 10.0, 1.0 / 0.2);
        let h_new = h / fac;
        if step.err <= 1.0 {
            fac_old = step.err.max(1e-4);
            let t1 = t + h;
            let y1 = step.y1;
            steps.push(step.dense);

            let g1 = event.value(&y1);
            if sign * g1 < 0.0 {
                let t_e = locate_event(event, &step.dense, sign, opts);
                let (te, ye) = polish_event(rhs, event, t, &y, &k1, t_e, opts);
                return Ok(EventHit { t: te, y: ye, steps });
            }
            if y1[0].abs() > opts.bound || y1[1].abs() > opts.bound {
                return Err(OdeError::LeftBox { t: t1, x: y1[0], y: y1[1] });
            }
            t = t1;
            y = y1;
            k1 = step.k7;
            let mut hn = h_new.min(opts.max_step);
            if reject {
                hn = hn.min(h);
            }
            reject = false;
            h = hn;
        } else {
            h /= (fac11 / 0.9).min(1.0 / 0.2);
            reject = true;
        }
    }
}

/// Brent search for the first sign change of the event on the dense output
/// of the last step.
fn locate_event<E: EventFn + ?Sized>(event: &E, dense: &DenseStep, sign: f64, opts: &OdeOptions) -> f64 {
    let g = |t: f64| sign * event.value(&dense.eval(t));
    let a = dense.t0;
    let b = dense.t1();
    let n = 8;
    let mut lo = a;
    let mut g_lo = g(a);
    for i in 1..=n {
        let ti = a + (b - a) * i as f64 / n as f64;
        let gi = g(ti);
        if gi < 0.0 {
            // A step that starts on the surface needs a left end strictly inside.
            let mut left = lo;
            if g_lo <= 0.0 {
                let mut probe = 0.5 * (lo + ti);
                while probe - lo > 1e-16 * b.abs().max(1.0) && g(probe) <= 0.0 {
                    probe = 0.5 * (lo + probe);
                }
                left = probe;
                if g(left) <= 0.0 {
                    return ti;
                }
            }
            return crate::roots::brent(g, left, ti, opts.event_tol * 1e-3, 200).unwrap_or(ti);
        }
        lo = ti;
        g_lo = gi;
    }
    b
}

/// Re-step from the start of the final step exactly to the located time,
/// then apply a few Newton corrections along the flow.
fn polish_event<F, E>(rhs: &F, event: &E, t0: f64, y0: &State, k1: &State, t_e: f64, opts: &OdeOptions) -> (f64, State)
where
    F: Fn(&State) -> State,
    E: EventFn + ?Sized,
{
    let h = t_e - t0;
    let (mut t, mut y) = if h > 0.0 { (t_e, dopri_step(rhs, t0, y0, k1, h, opts).y1) } else { (t0, *y0) };
    for _ in 0..4 {
        let g = event.value(&y);
        if g.abs() <= opts.event_tol * 1e-2 {
            break;
        }
        let v = rhs(&y);
        let grad = event.gradient(&y);
        let gdot = grad[0] * v[0] + grad[1] * v[1];
        if gdot == 0.0 {
            break;
        }
        let dt = -g / gdot;
        // Second-order Taylor update along the flow.
        let ymid = axpy(&y, &[(0.5 * dt, &v)]);
        let vm = rhs(&ymid);
        y = axpy(&y, &[(dt, &vm)]);
        t += dt;
    }
    (t, y)
}

/// Integrate over a fixed time span, returning the final state.
pub fn integrate_span<F: Fn(&State) -> State>(rhs: &F, y0: State, t_end: f64, opts: &OdeOptions) -> Result<State, OdeError> {
    let mut o = *opts;
    o.t_max = f64::INFINITY;
    let mut t = 0.0;
    let mut y = y0;
    let mut k1 = rhs(&y);
    let mut h = initial_step(rhs, &y, &k1, &o).min(t_end);
    while t < t_end {
        if t + h > t_end {
            h = t_end - t;
        }
        let step = dopri_step(rhs, t, &y, &k1, h, &o);
        if step.err <= 1.0 {
            t += h;
            y = step.y1;
            k1 = step.k7;
            if !y[0].is_finite() || !y[1].is_finite() {
                return Err(OdeError::NonFinite { t });
            }
        }
        let fac = (step.err.max(1e-10).powf(0.2) / 0.9).clamp(0.2, 10.0);
        h = (h / fac).min(o.max_step);
        if h < 1e-14 {
            return Err(OdeError::StepUnderflow { t });
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct YAxis;
    impl EventFn for YAxis {
        fn value(&self, y: &State) -> f64 {
            y[1]
        }
        fn gradient(&self, _: &State) -> State {
            [0.0, 1.0]
        }
    }

    #[test]
    fn harmonic_oscillator_half_turn() {
        // x' = -y, y' = x from (1, 0): returns to y = 0 at t = pi, x = -1.
        let rhs = |s: &State| [-s[1], s[0]];
        let hit = integrate_to_event(&rhs, 0.0, [1.0, 0.0], &YAxis, 1.0, &OdeOptions::default()).unwrap();
        assert!((hit.t - std::f64::consts::PI).abs() < 1e-11, "{}", hit.t);
        assert!((hit.y[0] + 1.0).abs() < 1e-11);
        assert!(hit.y[1].abs() <= 1e-12);
    }

    #[test]
    fn dense_output_is_accurate() {
        let rhs = |s: &State| [-s[1], s[0]];
        let hit = integrate_to_event(&rhs, 0.0, [1.0, 0.0], &YAxis, 1.0, &OdeOptions::default()).unwrap();
        let mut worst: f64 = 0.0;
        for st in &hit.steps {
            for k in 1..10 {
                let t = st.t0 + st.h * k as f64 / 10.0;
                let y = st.eval(t);
                worst = worst.max((y[0] - t.cos()).abs()).max((y[1] - t.sin()).abs());
            }
        }
        assert!(worst < 1e-10, "{worst}");
    }

    #[test]
    fn bounding_box_stops_escaping_orbits() {
        let rhs = |_: &State| [1.0, 1.0];
        let err = integrate_to_event(&rhs, 0.0, [0.0, 0.5], &YAxis, 1.0, &OdeOptions::default()).unwrap_err();
        assert!(matches!(err, OdeError::LeftBox { .. }));
    }

    #[test]
    fn fixed_span_matches_exponential() {
        let rhs = |s: &State| [s[0], -2.0 * s[1]];
        let y = integrate_span(&rhs, [1.0, 1.0], 1.5, &OdeOptions::default()).unwrap();
        assert!((y[0] - 1.5f64.exp()).abs() < 1e-10);
        assert!((y[1] - (-3.0f64).exp()).abs() < 1e-12);
    }
}
