use melnikov::melnikov::{
    boundary_m1, boundary_m2, split_m1, MelnikovError, loop_m1, loop_m2, m1, m2, smooth_m1, smooth_m2, transform_boundary_system, LevelMap, Perturbation,
};
use melnikov::orbit::AnnulusWindow;
use melnikov::presets::{self, QuadraticFamily};
use melnikov::{Expression, PiecewiseSystem, ScalarField};
use proptest::prelude::*;

fn sf(s: &str) -> ScalarField {
    ScalarField::parse(s).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn first_order_family() -> impl Strategy<Value = QuadraticFamily> {
    prop::array::uniform12(-3.0f64..3.0).prop_map(|c| {
        let mut q = QuadraticFamily::default();
        q.values[..12].copy_from_slice(&c);
        q
    })
}

/// Unit circle in both zones with the same perturbation on each side.
fn smooth_system(f1: &str, g1: &str, f2: &str, g2: &str) -> PiecewiseSystem {
    let h = sf("(x^2 + y^2)/2");
    let pert = Perturbation { f1: sf(f1), g1: sf(g1), f2: sf(f2), g2: sf(g2) };
    PiecewiseSystem::new(h.clone(), h, AnnulusWindow { r_min: 0.2, r_max: 1.5, section_bracket: (1e-9, 10.0) }, LevelMap::parse("r^2/2").unwrap())
        .with_perturbations(pert.clone(), pert)
        .normalized()
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_form_agrees_with_assembled(q in first_order_family(), r in 0.1f64..1.4) {
        let sys = presets::center_center(&q);
        let a = m1(&sys, r).unwrap().m1;
        let b = split_m1(&sys, r).unwrap();
        prop_assert!(close(a, b, 1e-9), "{a} vs {b}");
    }

    #[test]
    fn first_order_is_linear_second_order_quadratic(q in first_order_family(), r in 0.1f64..1.4, c in -2.0f64..2.0) {
        let sys = presets::center_center(&q);
        let scaled = sys.scaled_perturbations(c);
        let (a, b) = (m2(&sys, r).unwrap(), m2(&scaled, r).unwrap());
        prop_assert!(close(b.m1, c * a.m1, 1e-9), "M1 {} vs {}", b.m1, c * a.m1);
        let (a2, b2) = (a.m2.unwrap(), b.m2.unwrap());
        prop_assert!(close(b2, c * c * a2, 1e-7), "M2 {b2} vs {}", c * c * a2);
    }

    #[test]
    fn first_order_superposes(p in first_order_family(), q in first_order_family(), r in 0.1f64..1.4) {
        let mut sum = QuadraticFamily::default();
        for i in 0..24 {
            sum.values[i] = p.values[i] + q.values[i];
        }
        let lhs = m1(&presets::center_center(&sum), r).unwrap().m1;
        let rhs = m1(&presets::center_center(&p), r).unwrap().m1 + m1(&presets::center_center(&q), r).unwrap().m1;
        prop_assert!(close(lhs, rhs, 1e-9), "{lhs} vs {rhs}");
    }

    #[test]
    fn boundary_closed_form_matches_transform(c3 in -2.0f64..2.0, c2 in -2.0f64..2.0, c1 in -2.0f64..2.0, r in 0.15f64..1.2) {
        let f = ScalarField::new(
            Expression::real(c3) * Expression::x().pow(3) + Expression::real(c2) * Expression::x().pow(2) + Expression::real(c1) * Expression::x(),
        );
        let sys = presets::center_center_boundary(f, 0.01);
        let closed = boundary_m1(&sys, r).unwrap().value;
        let general = m1(&transform_boundary_system(&sys, 1).unwrap(), r).unwrap().m1;
        prop_assert!(close(closed, general, 1e-8), "{closed} vs {general}");
        let want = 2.0 * ((-c3 * r.powi(3) + c2 * r * r - c1 * r) - (c3 * r.powi(3) + c2 * r * r + c1 * r));
        prop_assert!(close(closed, want, 1e-9), "{closed} vs {want}");
    }
}

#[test]
fn smooth_system_collapses_to_loop_forms() {
    let sys = smooth_system("x*y", "y - y^3 + x^2", "0", "x^2*y");
    for r in [0.4, 0.8, 1.2] {
        let full = m2(&sys, r).unwrap();
        let (s1, l1) = (smooth_m1(&sys, r).unwrap(), loop_m1(&sys, r).unwrap());
        assert!(close(full.m1, s1, 1e-9) && close(s1, l1, 1e-9), "r = {r}: {} {s1} {l1}", full.m1);
        let (s2, l2) = (smooth_m2(&sys, r).unwrap(), loop_m2(&sys, r).unwrap());
        let fm2 = full.m2.unwrap();
        assert!(close(fm2, s2, 1e-7) && close(s2, l2, 1e-7), "r = {r}: {fm2} {s2} {l2}");
    }
}

#[test]
fn smooth_linear_damping_matches_area() {
    // g1 = y on a circle of radius ρ gives ∮ y dx = ±πρ² in magnitude.
    let sys = smooth_system("0", "y", "0", "0");
    for r in [0.5, 1.0] {
        let v = m1(&sys, r).unwrap().m1;
        assert!(close(v.abs(), std::f64::consts::PI * r * r, 1e-8), "r = {r}: {v}");
    }
}

#[test]
fn boundary_second_order_matches_transform() {
    let sys = presets::center_center_boundary(sf("x^3 - x"), 0.01);
    let t = transform_boundary_system(&sys, 2).unwrap();
    for r in [0.3, 0.7, 1.1] {
        let b = boundary_m2(&sys, r).unwrap().value;
        let g = m2(&t, r).unwrap().m2.unwrap();
        assert!(close(b, g, 1e-6), "r = {r}: closed {b} vs transformed {g}");
    }
}

#[test]
fn one_sided_pole_is_rejected() {
    // Only the lower zone of the saddle-center pair has H_y = 0 on the axis,
    // so the divided forms leave an uncancelled residue at P1 wherever M1 != 0.
    let sys = presets::saddle_center(7.0, &Expression::x().sin(), 0.01);
    let residue = |r: f64| match boundary_m2(&sys, r) {
        Err(MelnikovError::NonIntegrable { residue, .. }) => residue.abs(),
        other => panic!("r = {r}: expected a residue error, got {other:?}"),
    };
    let root = 1.0 - (std::f64::consts::PI / 7.0).powi(2);
    assert!(residue(root + 0.01) < residue(0.5) / 100.0);
}

#[test]
fn even_boundary_has_vanishing_first_order() {
    let sys = presets::center_center_boundary(sf("x^2 + 3*x^4"), 0.01);
    for r in [0.2, 0.6, 1.3] {
        assert!(boundary_m1(&sys, r).unwrap().value.abs() < 1e-10);
    }
}

#[test]
fn weights_reduce_to_one_on_matching_slopes() {
    // Both zones share H_x = -2x on the axis, so the section ratio is one.
    let sys = presets::center_center(&presets::three_root_family());
    for r in [0.3, 0.7, 1.2] {
        assert!(close(m2(&sys, r).unwrap().lambda, 1.0, 1e-12));
    }
}
