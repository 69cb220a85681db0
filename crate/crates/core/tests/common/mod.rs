#![allow(dead_code)]

use melnikov::field::{Axis, Expression, Partial};
use melnikov::ScalarField;
use proptest::prelude::*;

/// Random polynomial of total degree ≤ 4 with small integer and decimal coefficients.
pub fn polynomial() -> impl Strategy<Value = ScalarField> {
    prop::collection::vec((0u32..=4, 0u32..=4, -30i64..=30, 1i64..=4), 1..8).prop_map(|terms| {
        let mut e = Expression::zero();
        for (i, j, num, den) in terms {
            if i + j > 4 {
                continue;
            }
            e = e + Expression::rational(num, den) * Expression::x().pow(i) * Expression::y().pow(j);
        }
        ScalarField::new(e)
    })
}

pub fn point() -> impl Strategy<Value = (f64, f64)> {
    (-1.5f64..1.5, -1.5f64..1.5)
}

/// Central-difference and mixed-partial checks at one point.
pub fn check_field(f: &ScalarField, x: f64, y: f64) -> Result<(), String> {
    let h = 1e-5;
    let scale = 1.0 + f.evaluate(x, y).abs() + f.dx(x, y).abs() + f.dy(x, y).abs();
    let fd_x = (f.evaluate(x + h, y) - f.evaluate(x - h, y)) / (2.0 * h);
    let fd_y = (f.evaluate(x, y + h) - f.evaluate(x, y - h)) / (2.0 * h);
    if (fd_x - f.dx(x, y)).abs() > 1e-6 * scale * 100.0 {
        return Err(format!("H_x {} vs difference {fd_x} for {f}", f.dx(x, y)));
    }
    if (fd_y - f.dy(x, y)).abs() > 1e-6 * scale * 100.0 {
        return Err(format!("H_y {} vs difference {fd_y} for {f}", f.dy(x, y)));
    }
    let xy = f.expr().derivative(Axis::X).derivative(Axis::Y).eval(x, y);
    let yx = f.expr().derivative(Axis::Y).derivative(Axis::X).eval(x, y);
    if (xy - yx).abs() > 1e-9 * (1.0 + xy.abs()) || (xy - f.partial(Partial::XY, x, y)).abs() > 1e-9 * (1.0 + xy.abs()) {
        return Err(format!("mixed partials disagree: {xy} vs {yx} for {f}"));
    }
    let fd_xx = (f.dx(x + h, y) - f.dx(x - h, y)) / (2.0 * h);
    let sxx = f.partial(Partial::XX, x, y);
    if (fd_xx - sxx).abs() > 1e-4 * (1.0 + sxx.abs() + f.dx(x, y).abs()) {
        return Err(format!("H_xx {sxx} vs difference {fd_xx} for {f}"));
    }
    let xyy = f.partial(Partial::XYY, x, y);
    let yyx = f.expr().derivative(Axis::Y).derivative(Axis::Y).derivative(Axis::X).eval(x, y);
    if (xyy - yyx).abs() > 1e-9 * (1.0 + xyy.abs()) {
        return Err(format!("third mixed partials disagree: {xyy} vs {yyx} for {f}"));
    }
    Ok(())
}
