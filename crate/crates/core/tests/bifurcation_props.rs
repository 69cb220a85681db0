use melnikov::bifurcation::{count_cycles, eval_poly, isolate_roots, odd_even_parts, CycleSearch};
use melnikov::presets;
use melnikov::{Expression, ScalarField};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, Zero};
use proptest::prelude::*;

type Poly = Vec<BigRational>;

fn trim(mut p: Poly) -> Poly {
    while p.last().is_some_and(Zero::is_zero) {
        p.pop();
    }
    p
}

fn eval(p: &Poly, x: &BigRational) -> BigRational {
    p.iter().rev().fold(BigRational::zero(), |acc, c| acc * x + c)
}

fn derivative(p: &Poly) -> Poly {
    p.iter().enumerate().skip(1).map(|(k, c)| c * BigRational::from_integer(BigInt::from(k))).collect()
}

fn rem(a: &Poly, b: &Poly) -> Poly {
    let mut r = a.clone();
    let lead = b.last().unwrap();
    while r.len() >= b.len() && !r.is_empty() {
        let shift = r.len() - b.len();
        let q = r.last().unwrap() / lead;
        for (i, c) in b.iter().enumerate() {
            r[shift + i] = &r[shift + i] - &q * c;
        }
        r = trim(r);
    }
    r
}

fn sign_changes(chain: &[Poly], x: &BigRational) -> usize {
    let signs: Vec<bool> = chain.iter().map(|p| eval(p, x)).filter(|v| !v.is_zero()).map(|v| v.is_positive()).collect();
    signs.windows(2).filter(|w| w[0] != w[1]).count()
}

/// Exact number of distinct real roots in (lo, hi].
fn sturm_count(p: &Poly, lo: &BigRational, hi: &BigRational) -> usize {
    let mut chain = vec![p.clone(), derivative(p)];
    loop {
        let n = chain.len();
        let r = rem(&chain[n - 2], &chain[n - 1]);
        if r.is_empty() {
            break;
        }
        chain.push(r.into_iter().map(|c| -c).collect());
    }
    sign_changes(&chain, lo) - sign_changes(&chain, hi)
}

fn q(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

fn times_linear(p: &Poly, root: &BigRational) -> Poly {
    let mut out = vec![BigRational::zero(); p.len() + 1];
    for (i, c) in p.iter().enumerate() {
        out[i + 1] = &out[i + 1] + c;
        out[i] = &out[i] - c * root;
    }
    out
}

fn to_f64(p: &Poly) -> Vec<f64> {
    use num_traits::ToPrimitive;
    p.iter().map(|c| c.to_f64().unwrap()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn root_count_matches_sturm(
        slots in prop::collection::btree_set(1i64..40, 0..5),
        extra in 1i64..20,
        lead in prop::sample::select(vec![-3i64, -1, 1, 2]),
    ) {
        // Roots on a grid of eighths, times lead·(x² + extra/4), which has no real roots.
        let mut p: Poly = vec![q(lead * extra, 4), q(0, 1), q(lead, 1)];
        for s in &slots {
            p = times_linear(&p, &q(*s, 8));
        }
        let (lo, hi) = (q(0, 1), q(5, 1));
        let exact = sturm_count(&p, &lo, &hi);
        let coeffs = to_f64(&p);
        let found = isolate_roots(|x| eval_poly(&coeffs, x), (0.0, 5.0), 256, 1);
        prop_assert_eq!(found.len(), exact, "{:?} vs slots {:?}", found, slots);
        for (r, s) in found.iter().zip(&slots) {
            prop_assert!((r.r_star - *s as f64 / 8.0).abs() < 1e-8);
        }
    }

    #[test]
    fn cycles_follow_odd_part_of_boundary(
        rho in prop::collection::btree_set(2i64..28, 0..4),
        even in -2.0f64..2.0,
        c in prop::sample::select(vec![-2.0f64, 0.5, 3.0]),
    ) {
        // f = c x Π(x² − ρ²) + even x², with ρ on a grid of twentieths.
        let x = Expression::x();
        let mut odd = Expression::real(c) * x.clone();
        for k in &rho {
            odd = odd * (x.pow(2) - Expression::real((*k as f64 / 20.0).powi(2)));
        }
        let f = ScalarField::new(odd + Expression::real(even) * x.pow(2));
        let (f_odd, _) = odd_even_parts(&f);
        let sys = presets::center_center_boundary(f, 0.01);
        let w = presets::center_center_window();
        let reports = count_cycles(&sys, &CycleSearch::new((w.r_min, w.r_max))).unwrap();
        let want: Vec<f64> = rho.iter().map(|k| *k as f64 / 20.0).collect();
        prop_assert_eq!(reports.len(), want.len());
        for (rep, w) in reports.iter().zip(&want) {
            prop_assert!((rep.root.r_star - w).abs() < 1e-8);
            prop_assert!(f_odd.evaluate(rep.root.r_star, 0.0).abs() < 1e-7);
        }
    }
}

#[test]
fn stability_flips_with_sign_and_survives_scale() {
    let w = presets::center_center_window();
    let verdicts = |c: f64| -> Vec<bool> {
        let f = ScalarField::new(Expression::real(c) * (Expression::x().pow(3) - Expression::x()));
        let sys = presets::center_center_boundary(f, 0.01);
        count_cycles(&sys, &CycleSearch::new((w.r_min, w.r_max))).unwrap().iter().map(|r| r.stability.stable).collect()
    };
    let base = verdicts(1.0);
    assert_eq!(base.len(), 1);
    assert_eq!(verdicts(7.5), base);
    assert_eq!(verdicts(-0.2), base.iter().map(|s| !s).collect::<Vec<_>>());
}

#[test]
fn alternating_stability_on_saddle_center() {
    let sys = presets::saddle_center(7.0, &Expression::x().sin(), 0.01);
    let w = presets::saddle_center_window();
    let reports = count_cycles(&sys, &CycleSearch::new((w.r_min, w.r_max))).unwrap();
    let stable: Vec<bool> = reports.iter().map(|r| r.stability.stable).collect();
    assert_eq!(stable.len(), 2);
    assert_ne!(stable[0], stable[1]);
}
