use melnikov::presets::{self, QuadraticFamily};
use melnikov::simulator::{difference_map, flow_to_section, verify_limit_cycle, Classification, SectionTarget, SimError, SimOptions};
use melnikov::{Expression, ScalarField, Zone};
use proptest::prelude::*;

fn sf(s: &str) -> ScalarField {
    ScalarField::parse(s).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn energy_is_conserved_within_each_zone(r in 0.1f64..1.4, eps in 0.0f64..0.02) {
        let sys = presets::center_center_boundary(sf("x^3 - x"), eps);
        let p = sys.section_point(r).unwrap().x;
        let opts = SimOptions::default();
        let start = [p, eps * (p.powi(3) - p)];
        let traj = flow_to_section(&sys, start, eps, SectionTarget::FullReturn, &opts).unwrap();
        let mut seg_start = 0;
        for (i, s) in traj.samples.iter().enumerate() {
            if s.zone != traj.samples[seg_start].zone {
                seg_start = i;
            }
            let h = sys.hamiltonian(s.zone);
            let h0 = h.evaluate(traj.samples[seg_start].x, traj.samples[seg_start].y);
            prop_assert!((h.evaluate(s.x, s.y) - h0).abs() < 1e-8, "drift at t = {}", s.t);
        }
        prop_assert!(traj.events.iter().all(|e| e.classification == Classification::Crossing));
    }

    #[test]
    fn unperturbed_flow_returns_to_start(r in 0.1f64..1.4) {
        let sys = presets::center_center(&QuadraticFamily::default()).with_boundary(sf("x^3 - x"), 0.0);
        let d = difference_map(&sys, r, 0.0, &SimOptions::default()).unwrap();
        prop_assert!(d.value.abs() < 1e-9 && (d.q - d.p).abs() < 1e-9, "{d:?}");
        prop_assert!(d.telescoping_gap() < 1e-12);
    }
}

#[test]
fn upper_half_orbit_lands_on_mirror_point() {
    let sys = presets::center_center(&QuadraticFamily::default()).with_boundary(sf("x"), 0.0);
    let p = sys.section_point(0.8).unwrap().x;
    let traj = flow_to_section(&sys, [p, 0.0], 0.0, SectionTarget::FirstCrossing, &SimOptions::default()).unwrap();
    assert_eq!(traj.samples[0].zone, Zone::Upper);
    assert!((traj.events[0].x + p).abs() < 1e-9);
}

#[test]
fn even_boundary_has_no_isolated_cycle() {
    // Reflection symmetry makes every nearby orbit closed, so the
    // displacement stays at the noise floor and no bracket exists.
    let sys = presets::center_center_boundary(sf("x^2"), 0.01);
    match verify_limit_cycle(&sys, 0.7, 0.01, &SimOptions::default()) {
        Err(SimError::NoFixedPoint { .. }) => {}
        other => panic!("expected no fixed point, got {other:?}"),
    }
}

#[test]
fn cubic_boundary_cycle_is_found() {
    let sys = presets::center_center_boundary(sf("x^3 - x"), 0.01);
    let v = verify_limit_cycle(&sys, 1.0, 0.01, &SimOptions::default()).unwrap();
    assert!(v.found && (v.fixed_point - 1.0).abs() < 1e-8, "{v:?}");
}

#[test]
fn sliding_start_is_reported() {
    let mut sys = presets::saddle_center(7.0, &Expression::x().sin(), 0.0);
    sys.h_minus = sf("(x^2 + y^2)/2");
    match flow_to_section(&sys, [0.5, 0.0], 0.0, SectionTarget::FirstCrossing, &SimOptions::default()) {
        Err(SimError::SlidingReached { classification, .. }) => assert_eq!(classification, Classification::Sliding),
        other => panic!("expected a sliding error, got {other:?}"),
    }
}
