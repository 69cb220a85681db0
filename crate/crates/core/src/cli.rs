//! Scenario files, the preset catalog and command dispatch. Commands return
//! their artifacts in memory; the binary writes them to disk.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::bifurcation::{center_center_closed_form, count_cycles, eval_poly, isolate_roots, reports_json, CycleSearch, RootRecord, DEFAULT_GRID};
use crate::field::{Expression, ScalarField};
use crate::melnikov::{m1, sweep, write_sweep_csv, LevelMap, MelnikovOptions, Perturbation, PiecewiseSystem, SweepKind};
use crate::orbit::{find_section_point, AnnulusWindow};
use crate::presets::{self, QuadraticFamily};
use crate::simulator::{classify_boundary_point, difference_map, flow_to_section, numeric_melnikov, SectionTarget, SimOptions};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("{command} failed{context}: {message}")]
    Analysis { command: &'static str, context: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Scenario(_) => 2,
            CliError::Analysis { .. } => 3,
        }
    }

    /// Machine-readable form of the error.
    pub fn report(&self) -> serde_json::Value {
        match self {
            CliError::Scenario(m) => json!({ "status": 2, "kind": "scenario", "message": m }),
            CliError::Analysis { command, context, message } => {
                json!({ "status": 3, "kind": "analysis", "command": command, "context": context.trim_start_matches(" at "), "message": message })
            }
        }
    }
}

fn analysis<E: std::fmt::Display>(command: &'static str, context: String) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Analysis { command, context, message: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Sweep,
    Roots,
    Cycles,
    Simulate,
    Verify,
    Classify,
}

impl Command {
    pub const ALL: [&'static str; 6] = ["sweep", "roots", "cycles", "simulate", "verify", "classify"];

    pub fn name(self) -> &'static str {
        match self {
            Command::Sweep => "sweep",
            Command::Roots => "roots",
            Command::Cycles => "cycles",
            Command::Simulate => "simulate",
            Command::Verify => "verify",
            Command::Classify => "classify",
        }
    }
}

impl FromStr for Command {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "sweep" => Command::Sweep,
            "roots" => Command::Roots,
            "cycles" => Command::Cycles,
            "simulate" => Command::Simulate,
            "verify" => Command::Verify,
            "classify" => Command::Classify,
            _ => return Err(format!("unknown command {s:?}")),
        })
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ZoneSpec {
    pub f1: Option<String>,
    pub g1: Option<String>,
    pub f2: Option<String>,
    pub g2: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    /// center-center, center-center-boundary, saddle-center, smooth-circle or custom.
    pub preset: Option<String>,
    pub h_plus: Option<String>,
    pub h_minus: Option<String>,
    /// Expression in `r` for H⁺(P(r)), or "abscissa" for P(r) = (r, 0).
    pub level_map: Option<String>,
    #[serde(default)]
    pub plus: ZoneSpec,
    #[serde(default)]
    pub minus: ZoneSpec,
    /// Switching curve y = ε f(x).
    pub boundary: Option<String>,
    /// Saddle-center scale `a` in f(a x).
    pub scale: Option<f64>,
    /// Quadratic family coefficients by name (a..N).
    #[serde(default)]
    pub coefficients: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AnnulusSpec {
    pub r_min: Option<f64>,
    pub r_max: Option<f64>,
    pub section_bracket: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    pub grid: Option<usize>,
    /// general or boundary; defaults to boundary when a curve is given.
    pub kind: Option<String>,
    /// Explicit polynomial for `roots`, coefficients in ascending powers.
    pub polynomial: Option<Vec<f64>>,
    pub window: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub epsilon: Option<f64>,
    pub ladder: Option<Vec<f64>>,
    pub r: Option<f64>,
    /// Points for `classify`.
    pub classify_x: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ToleranceSpec {
    pub transversality: Option<f64>,
    pub closure: Option<f64>,
    pub m1_zero: Option<f64>,
    pub pole: Option<f64>,
    pub hypothesis: Option<f64>,
    pub rtol: Option<f64>,
    pub atol: Option<f64>,
    pub max_step: Option<f64>,
    pub event: Option<f64>,
    pub noise_floor: Option<f64>,
    pub degenerate: Option<f64>,
    pub cycle_halfwidth: Option<f64>,
    pub derivative_step: Option<f64>,
}

/// One scenario file. Every field is optional; presets fill the gaps.
#[derive(Debug, Clone, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub system: SystemSpec,
    #[serde(default)]
    pub annulus: AnnulusSpec,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    #[serde(default)]
    pub simulation: SimulationSpec,
    #[serde(default)]
    pub tolerances: ToleranceSpec,
}

pub const PRESETS: [&str; 4] = ["center-center", "center-center-boundary", "saddle-center", "smooth-circle"];

impl Scenario {
    pub fn parse(src: &str) -> Result<Self, CliError> {
        toml::from_str(src).map_err(|e| CliError::Scenario(e.to_string()))
    }

    /// Baked scenario for a named preset.
    pub fn preset(name: &str) -> Result<Self, CliError> {
        let mut s = Scenario::default();
        s.system.preset = Some(name.to_string());
        match name {
            "center-center" => {}
            "center-center-boundary" => s.system.boundary = Some("x^3 - x".into()),
            "saddle-center" => {
                s.system.boundary = Some("sin(x)".into());
                s.system.scale = Some(7.0);
            }
            "smooth-circle" => s.system.boundary = Some("sin(x)".into()),
            other => return Err(CliError::Scenario(format!("unknown preset {other:?}; known: {}", PRESETS.join(", ")))),
        }
        Ok(s)
    }

    pub fn epsilon(&self) -> f64 {
        self.simulation.epsilon.unwrap_or(0.01)
    }

    pub fn grid(&self) -> usize {
        self.analysis.grid.unwrap_or(DEFAULT_GRID)
    }

    pub fn ladder(&self) -> Vec<f64> {
        self.simulation.ladder.clone().unwrap_or_else(|| vec![1e-2, 5e-3, 2.5e-3, 1.25e-3, 6.25e-4])
    }

    pub fn sim_options(&self) -> SimOptions {
        let t = &self.tolerances;
        let mut o = SimOptions::default();
        set(&mut o.ode.rtol, t.rtol);
        set(&mut o.ode.atol, t.atol);
        set(&mut o.ode.max_step, t.max_step);
        set(&mut o.ode.event_tol, t.event);
        set(&mut o.noise_floor, t.noise_floor);
        set(&mut o.degenerate_tol, t.degenerate);
        set(&mut o.cycle_halfwidth, t.cycle_halfwidth);
        set(&mut o.derivative_step, t.derivative_step);
        o
    }

    fn melnikov_options(&self) -> MelnikovOptions {
        let t = &self.tolerances;
        let mut o = MelnikovOptions::default();
        set(&mut o.transversality, t.transversality);
        o.trace.transversality = o.transversality;
        set(&mut o.closure_tol, t.closure);
        set(&mut o.m1_zero_tol, t.m1_zero);
        set(&mut o.pole_tol, t.pole);
        set(&mut o.hypothesis_tol, t.hypothesis);
        set(&mut o.trace.ode.rtol, t.rtol);
        set(&mut o.trace.ode.atol, t.atol);
        set(&mut o.trace.ode.max_step, t.max_step);
        set(&mut o.trace.ode.event_tol, t.event);
        o
    }

    fn family(&self) -> Result<QuadraticFamily, CliError> {
        let mut q = QuadraticFamily::default();
        for (k, v) in &self.system.coefficients {
            q.set(k, *v).ok_or_else(|| CliError::Scenario(format!("unknown coefficient {k:?}")))?;
        }
        Ok(q)
    }

    fn has_family(&self) -> bool {
        matches!(self.system.preset.as_deref(), Some("center-center") | Some("center-center-boundary"))
    }

    /// Build and validate the system: every expression must parse and both
    /// window ends must have a section point.
    pub fn build(&self) -> Result<PiecewiseSystem, CliError> {
        let expr = |what: &str, s: &str| -> Result<ScalarField, CliError> { ScalarField::parse(s).map_err(|e| CliError::Scenario(format!("{what}: {e}"))) };
        let sys = &self.system;
        let boundary = sys.boundary.as_deref().map(|s| expr("boundary", s)).transpose()?;
        let eps = self.epsilon();
        let mut system = match sys.preset.as_deref().unwrap_or("custom") {
            "center-center" | "center-center-boundary" => {
                let mut s = presets::center_center(&self.family()?);
                if let Some(f) = boundary.clone() {
                    s = s.with_boundary(f, eps);
                }
                s
            }
            "saddle-center" => {
                let f = boundary.clone().ok_or_else(|| CliError::Scenario("saddle-center needs a boundary function".into()))?;
                presets::saddle_center(sys.scale.unwrap_or(7.0), f.expr(), eps)
            }
            "smooth-circle" => presets::smooth_circle(boundary.clone().unwrap_or_else(|| ScalarField::parse("sin(x)").expect("static")), eps),
            "custom" => {
                let hp = expr("h_plus", sys.h_plus.as_deref().ok_or_else(|| CliError::Scenario("custom system needs h_plus".into()))?)?;
                let hm = match sys.h_minus.as_deref() {
                    Some(s) => expr("h_minus", s)?,
                    None => hp.clone(),
                };
                let level = match sys.level_map.as_deref() {
                    None | Some("abscissa") => LevelMap::SectionAbscissa,
                    Some(s) => LevelMap::parse(s).map_err(|e| CliError::Scenario(format!("level_map: {e}")))?,
                };
                let zone = |z: &ZoneSpec, side: &str| -> Result<Perturbation, CliError> {
                    let part = |o: &Option<String>, n: &str| o.as_deref().map(|s| expr(&format!("{side}.{n}"), s)).transpose().map(|f| f.unwrap_or_else(ScalarField::zero));
                    Ok(Perturbation { f1: part(&z.f1, "f1")?, g1: part(&z.g1, "g1")?, f2: part(&z.f2, "f2")?, g2: part(&z.g2, "g2")? })
                };
                let window = AnnulusWindow { r_min: 0.1, r_max: 1.0, section_bracket: (1e-9, 10.0) };
                let mut s = PiecewiseSystem::new(hp, hm, window, level).with_perturbations(zone(&sys.plus, "plus")?, zone(&sys.minus, "minus")?);
                if let Some(f) = boundary.clone() {
                    s = s.with_boundary(f, eps);
                }
                s
            }
            other => return Err(CliError::Scenario(format!("unknown preset {other:?}"))),
        };
        if let Some(v) = self.annulus.r_min {
            system.annulus.r_min = v;
        }
        if let Some(v) = self.annulus.r_max {
            system.annulus.r_max = v;
        }
        if let Some([a, b]) = self.annulus.section_bracket {
            system.annulus.section_bracket = (a, b);
        }
        system.options = self.melnikov_options();
        let w = system.annulus;
        if !(w.r_min < w.r_max) {
            return Err(CliError::Scenario(format!("empty annulus window [{}, {}]", w.r_min, w.r_max)));
        }
        if let LevelMap::Expr(e) = &system.level_map {
            for r in [w.r_min, w.r_max] {
                find_section_point(&system.h_plus, e.eval(r, 0.0), w.section_bracket, r, system.options.trace.section_samples)
                    .map_err(|err| CliError::Scenario(format!("window end r = {r}: {err}")))?;
            }
        }
        if sys.preset.as_deref().unwrap_or("custom") == "custom" {
            system = system.normalized().map_err(|e| CliError::Scenario(e.to_string()))?;
        }
        Ok(system)
    }
}

fn set<T: Copy>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Named output of a command.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

fn json_artifact(name: &str, v: &serde_json::Value) -> Artifact {
    Artifact { name: name.to_string(), contents: serde_json::to_string_pretty(v).expect("plain data") + "\n" }
}

fn csv_artifact<F: FnOnce(&mut Vec<u8>) -> Result<(), csv::Error>>(name: &str, f: F) -> Result<Artifact, CliError> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| CliError::Analysis { command: "write", context: String::new(), message: e.to_string() })?;
    Ok(Artifact { name: name.to_string(), contents: String::from_utf8(buf).expect("csv is utf-8") })
}

fn root_json(roots: &[RootRecord]) -> serde_json::Value {
    serde_json::to_value(roots).expect("plain data")
}

/// Run one command on a scenario.
pub fn run(command: Command, scenario: &Scenario) -> Result<Vec<Artifact>, CliError> {
    let system = scenario.build()?;
    let w = system.annulus;
    let window = scenario.analysis.window.map(|[a, b]| (a, b)).unwrap_or((w.r_min, w.r_max));
    let name = command.name();
    match command {
        Command::Sweep => {
            let kind = match scenario.analysis.kind.as_deref() {
                Some("general") => SweepKind::General,
                Some("boundary") => SweepKind::Boundary,
                None if system.boundary.is_some() => SweepKind::Boundary,
                None => SweepKind::General,
                Some(k) => return Err(CliError::Scenario(format!("unknown sweep kind {k:?}"))),
            };
            let rows = sweep(&system, kind, &w.grid(scenario.grid())).map_err(analysis(name, String::new()))?;
            Ok(vec![csv_artifact("sweep.csv", |b| write_sweep_csv(&rows, b))?])
        }
        Command::Roots => {
            let mut out = serde_json::Map::new();
            if let Some(poly) = &scenario.analysis.polynomial {
                let win = scenario.analysis.window.map(|[a, b]| (a, b)).ok_or_else(|| CliError::Scenario("polynomial roots need analysis.window".into()))?;
                let roots = isolate_roots(|h| eval_poly(poly, h), win, scenario.grid(), 2);
                out.insert("polynomial".into(), json!({ "coefficients": poly, "window": [win.0, win.1], "roots": root_json(&roots) }));
            } else if scenario.has_family() && system.boundary.is_none() {
                let forms = center_center_closed_form(&scenario.family()?);
                let hwin = scenario.analysis.window.map(|[a, b]| (a, b)).unwrap_or((w.r_min * w.r_min, w.r_max * w.r_max));
                let m1_roots = isolate_roots(|r| eval_poly(&forms.m1, r), window, scenario.grid(), 1);
                let m2_roots = isolate_roots(|h| eval_poly(&forms.m2_prime, h), hwin, scenario.grid(), 2);
                let reference = isolate_roots(|h| eval_poly(&forms.reference_m2_prime, h), hwin, scenario.grid(), 2);
                out.insert("forms".into(), serde_json::to_value(&forms).expect("plain data"));
                out.insert("m1_roots".into(), root_json(&m1_roots));
                out.insert("m2_prime_roots".into(), root_json(&m2_roots));
                out.insert("reference_m2_prime_roots".into(), root_json(&reference));
            } else {
                let f = |r: f64| -> f64 {
                    if system.boundary.is_some() {
                        crate::melnikov::boundary_m1(&system, r).map(|b| b.value).unwrap_or(f64::NAN)
                    } else {
                        m1(&system, r).map(|s| s.m1).unwrap_or(f64::NAN)
                    }
                };
                out.insert("m1_roots".into(), root_json(&isolate_roots(f, window, scenario.grid(), 1)));
            }
            Ok(vec![json_artifact("roots.json", &serde_json::Value::Object(out))])
        }
        Command::Cycles | Command::Verify => {
            let mut search = CycleSearch::new(window);
            search.grid = scenario.grid();
            search.sim = scenario.sim_options();
            if command == Command::Verify {
                search.verify_epsilon = Some(scenario.epsilon());
            }
            let reports = count_cycles(&system, &search).map_err(analysis(name, String::new()))?;
            let mut v = json!({ "count": reports.len(), "cycles": reports_json(&reports) });
            if command == Command::Verify {
                v["details"] = serde_json::to_value(&reports).expect("plain data");
            }
            Ok(vec![json_artifact(&format!("{name}.json"), &v)])
        }
        Command::Simulate => {
            let eps = scenario.epsilon();
            let r = scenario.simulation.r.unwrap_or(0.5 * (w.r_min + w.r_max));
            let opts = scenario.sim_options();
            let ctx = format!(" at r = {r}, ε = {eps}");
            let rec = difference_map(&system, r, eps, &opts).map_err(analysis(name, ctx.clone()))?;
            let p = rec.p;
            let start = [p, system.boundary.as_ref().map_or(0.0, |b| eps * b.f.evaluate(p, 0.0))];
            let traj = flow_to_section(&system, start, eps, SectionTarget::FullReturn, &opts).map_err(analysis(name, ctx.clone()))?;
            let mut summary = json!({ "difference": rec });
            let ladder = scenario.ladder();
            let analytic = if system.boundary.is_some() {
                crate::melnikov::boundary_m1(&system, r).ok().map(|b| b.value)
            } else {
                m1(&system, r).ok().map(|s| s.m1)
            };
            let nm = numeric_melnikov(&system, r, &ladder, analytic, &opts).map_err(analysis(name, ctx))?;
            summary["ladder"] = json!({
                "epsilon": ladder,
                "m1_analytic": analytic,
                "m1_hat": nm.m1_hat,
                "m2_hat": nm.m2_hat,
                "value_slope": nm.value_slope,
                "residual_slope": nm.residual_slope,
                "values": nm.records.iter().map(|d| d.value).collect::<Vec<_>>(),
            });
            Ok(vec![
                json_artifact("simulate.json", &summary),
                csv_artifact("trajectory.csv", |b| traj.write_csv(b))?,
                json_artifact("events.json", &traj.events_json()),
            ])
        }
        Command::Classify => {
            let eps = scenario.epsilon();
            let opts = scenario.sim_options();
            let xs = scenario.simulation.classify_x.clone().unwrap_or_else(|| (0..=20).map(|i| -1.0 + 0.1 * i as f64).collect());
            csv_artifact("classify.csv", |b| {
                let mut w = csv::Writer::from_writer(b);
                w.write_record(["x", "y", "classification", "s_plus", "s_minus", "contact_plus", "contact_minus"])?;
                for x in xs {
                    let p = classify_boundary_point(&system, x, eps, &opts);
                    let (kp, km) = p.contact_orders.unwrap_or((None, None));
                    let k = |v: Option<u32>| v.map(|k| k.to_string()).unwrap_or_default();
                    w.write_record([p.x.to_string(), p.y.to_string(), p.classification.to_string(), p.s_plus.to_string(), p.s_minus.to_string(), k(kp), k(km)])?;
                }
                w.flush()?;
                Ok(())
            })
            .map(|a| vec![a])
        }
    }
}

/// Parse an expression field of a scenario, for callers that build systems by hand.
pub fn parse_expression(src: &str) -> Result<Expression, CliError> {
    src.parse::<Expression>().map_err(|e| CliError::Scenario(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_build() {
        for p in PRESETS {
            Scenario::preset(p).unwrap().build().unwrap();
        }
        assert_eq!(Scenario::preset("nope").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Scenario::parse("[system]\nhplus = \"x\"\n").is_err());
    }

    #[test]
    fn custom_window_is_validated() {
        let s = Scenario::parse("[system]\nh_plus = \"(x^2 + y^2)/2\"\nlevel_map = \"r^2/2\"\n[annulus]\nr_min = 0.5\nr_max = 20.0\nsection_bracket = [0.001, 5.0]\n").unwrap();
        let e = s.build().unwrap_err();
        assert_eq!(e.exit_code(), 2, "{e}");
    }

    #[test]
    fn zero_perturbation_sweep() {
        let mut s = Scenario::preset("center-center").unwrap();
        s.analysis.grid = Some(5);
        let a = run(Command::Sweep, &s).unwrap();
        let body = &a[0].contents;
        assert!(body.starts_with("r,M1,M2,sigma,lambda,valid_m2"));
        for line in body.lines().skip(1) {
            assert_eq!(line.split(',').nth(1), Some("0"), "{line}");
        }
    }
}
