//! Built-in systems: the parabolic center-center pair with its quadratic
//! perturbation family, the saddle-center pair, and the smooth circle.

use crate::field::{Expression, ScalarField};
use crate::melnikov::{LevelMap, Perturbation, PiecewiseSystem};
use crate::orbit::AnnulusWindow;

/// Coefficient names in storage order. Each consecutive triple multiplies
/// `x², xy, y²` of one perturbation component.
pub const QUADRATIC_NAMES: [&str; 24] = [
    "a", "b", "c", // f1+
    "d", "e", "f", // g1+
    "p", "q", "s", // f1-
    "l", "m", "n", // g1-
    "A", "B", "C", // f2+
    "D", "E", "F", // g2+
    "P", "Q", "S", // f2-
    "L", "M", "N", // g2-
];

/// The 24 real coefficients of the quadratic perturbation family.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QuadraticFamily {
    pub values: [f64; 24],
}

impl QuadraticFamily {
    pub fn index(name: &str) -> Option<usize> {
        QUADRATIC_NAMES.iter().position(|n| *n == name)
    }

    pub fn get(&self, name: &str) -> f64 {
        Self::index(name).map(|i| self.values[i]).unwrap_or_else(|| panic!("unknown coefficient {name}"))
    }

    pub fn set(&mut self, name: &str, v: f64) -> Option<()> {
        let i = Self::index(name)?;
        self.values[i] = v;
        Some(())
    }

    pub fn from_pairs<'a, I: IntoIterator<Item = (&'a str, f64)>>(pairs: I) -> Option<Self> {
        let mut q = QuadraticFamily::default();
        for (k, v) in pairs {
            q.set(k, v)?;
        }
        Some(q)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    /// `c₀x² + c₁xy + c₂y²` for the triple starting at `offset`.
    fn component(&self, offset: usize) -> ScalarField {
        let [c0, c1, c2] = [self.values[offset], self.values[offset + 1], self.values[offset + 2]];
        let (x, y) = (Expression::x(), Expression::y());
        let e = Expression::real(c0) * x.clone() * x.clone() + Expression::real(c1) * x * y.clone() + Expression::real(c2) * y.clone() * y;
        ScalarField::new(e)
    }

    pub fn perturbations(&self) -> (Perturbation, Perturbation) {
        let plus = Perturbation { f1: self.component(0), g1: self.component(3), f2: self.component(12), g2: self.component(15) };
        let minus = Perturbation { f1: self.component(6), g1: self.component(9), f2: self.component(18), g2: self.component(21) };
        (plus, minus)
    }
}

pub fn center_center_window() -> AnnulusWindow {
    AnnulusWindow { r_min: 0.05, r_max: 1.5, section_bracket: (1e-9, 50.0) }
}

/// `H⁺ = −y − x²`, `H⁻ = y − x²` with upper level `−r²`, so `P(r) = (r, 0)`.
pub fn center_center(family: &QuadraticFamily) -> PiecewiseSystem {
    let (plus, minus) = family.perturbations();
    PiecewiseSystem::new(
        ScalarField::parse("-y - x^2").expect("static"),
        ScalarField::parse("y - x^2").expect("static"),
        center_center_window(),
        LevelMap::parse("-r^2").expect("static"),
    )
    .with_perturbations(plus, minus)
}

/// Center-center pair with unperturbed fields and switching curve `y = ε f(x)`.
pub fn center_center_boundary(f: ScalarField, epsilon: f64) -> PiecewiseSystem {
    center_center(&QuadraticFamily::default()).with_boundary(f, epsilon)
}

pub fn saddle_center_window() -> AnnulusWindow {
    AnnulusWindow { r_min: 0.02, r_max: 0.98, section_bracket: (1e-9, 1.0) }
}

/// Saddle above, center below: `H⁺ = (y−1)²/2 − x²/2`, `H⁻ = −(x² + y²)/2`,
/// upper level `r/2` so that `p(r) = √(1−r)`. The switching curve is
/// `y = ε f(a x)`.
pub fn saddle_center(a: f64, f: &Expression, epsilon: f64) -> PiecewiseSystem {
    let fa = f.substitute(&(Expression::real(a) * Expression::x()), &Expression::y());
    PiecewiseSystem::new(
        ScalarField::parse("(y - 1)^2/2 - x^2/2").expect("static"),
        ScalarField::parse("-(x^2 + y^2)/2").expect("static"),
        saddle_center_window(),
        LevelMap::parse("r/2").expect("static"),
    )
    .with_boundary(ScalarField::new(fa), epsilon)
}

/// `H⁺ = H⁻ = (x² + y²)/2` with curve `y = ε f(x)`. The flow is clockwise, so
/// the returned system is already time-reversed.
pub fn smooth_circle(f: ScalarField, epsilon: f64) -> PiecewiseSystem {
    let h = ScalarField::parse("(x^2 + y^2)/2").expect("static");
    PiecewiseSystem::new(h.clone(), h, AnnulusWindow { r_min: 0.2, r_max: 1.5, section_bracket: (1e-9, 10.0) }, LevelMap::parse("r^2/2").expect("static"))
        .with_boundary(f, epsilon)
        .normalized()
        .expect("circle is transversal on its window")
}

/// Coefficients of the three-root example: `a = p = 1`, `b = q = 1`,
/// `c = s = 1`, `f = n = 2`, `d = l = −8800/42`, `D = −960/21`, `L = −D`.
pub fn three_root_family() -> QuadraticFamily {
    let d = -8800.0 / 42.0;
    let dd = -960.0 / 21.0;
    QuadraticFamily::from_pairs([("a", 1.0), ("p", 1.0), ("b", 1.0), ("q", 1.0), ("c", 1.0), ("s", 1.0), ("f", 2.0), ("n", 2.0), ("d", d), ("l", d), ("D", dd), ("L", -dd)]).expect("names")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_layout() {
        let mut q = QuadraticFamily::default();
        q.set("e", 2.0).unwrap();
        q.set("N", -3.0).unwrap();
        let (plus, minus) = q.perturbations();
        assert_eq!(plus.g1.evaluate(0.5, 0.4), 2.0 * 0.5 * 0.4);
        assert_eq!(minus.g2.evaluate(0.5, 0.4), -3.0 * 0.16000000000000003);
        assert!(plus.f1.is_zero() && minus.f1.is_zero());
        assert!(q.set("z", 1.0).is_none());
    }

    #[test]
    fn saddle_center_section() {
        let s = saddle_center(7.0, &Expression::x().sin(), 0.01);
        let p = s.section_point(0.64).unwrap();
        assert!((p.x - 0.6).abs() < 1e-13);
        let b = s.boundary.as_ref().unwrap();
        assert!((b.f.evaluate(0.1, 0.0) - 0.7f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn circle_is_reversed() {
        let c = smooth_circle(ScalarField::parse("sin(x)").unwrap(), 0.01);
        assert!(c.reversed);
        assert!((c.section_point(0.7).unwrap().x - 0.7).abs() < 1e-13);
    }
}
