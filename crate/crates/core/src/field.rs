//! Scalar fields on the plane.
//!
//! [`Expression`] is a small expression tree over `x`, `y`, exact rational or
//! real constants, `+ - *`, non-negative integer powers and `sin`/`cos`. The
//! grammar is closed under partial differentiation, so every Hamiltonian
//! derivative and perturbation component used elsewhere in the crate is a
//! plain `Expression`. [`ScalarField`] wraps an expression together with its
//! partial derivatives up to total order three.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use num_rational::Ratio;
use num_traits::{CheckedAdd, CheckedMul, CheckedSub, One, Signed, ToPrimitive, Zero};
use thiserror::Error;

pub type Rational = Ratio<i64>;

/// A constant: exact when it came from an integer or rational literal and
/// every operation on it stayed inside `i64` range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Number {
    Exact(Rational),
    Real(f64),
}

impl Number {
    pub fn int(v: i64) -> Self {
        Number::Exact(Rational::from_integer(v))
    }

    pub fn to_f64(self) -> f64 {
        match self {
            Number::Exact(q) => q.to_f64().unwrap_or_else(|| *q.numer() as f64 / *q.denom() as f64),
            Number::Real(v) => v,
        }
    }

    pub fn is_zero(self) -> bool {
        match self {
            Number::Exact(q) => q.is_zero(),
            Number::Real(v) => v == 0.0,
        }
    }

    pub fn is_one(self) -> bool {
        match self {
            Number::Exact(q) => q.is_one(),
            Number::Real(v) => v == 1.0,
        }
    }

    fn is_negative(self) -> bool {
        match self {
            Number::Exact(q) => q.is_negative(),
            Number::Real(v) => v < 0.0,
        }
    }

    fn combine(
        self,
        other: Number,
        exact: impl Fn(&Rational, &Rational) -> Option<Rational>,
        real: impl Fn(f64, f64) -> f64,
    ) -> Number {
        if let (Number::Exact(a), Number::Exact(b)) = (self, other) {
            if let Some(q) = exact(&a, &b) {
                return Number::Exact(q);
            }
        }
        Number::Real(real(self.to_f64(), other.to_f64()))
    }

    pub fn add(self, other: Number) -> Number {
        self.combine(other, |a, b| a.checked_add(b), |a, b| a + b)
    }

    pub fn sub(self, other: Number) -> Number {
        self.combine(other, |a, b| a.checked_sub(b), |a, b| a - b)
    }

    pub fn mul(self, other: Number) -> Number {
        self.combine(other, |a, b| a.checked_mul(b), |a, b| a * b)
    }

    pub fn neg(self) -> Number {
        match self {
            Number::Exact(q) => match q.numer().checked_neg() {
                Some(n) => Number::Exact(Rational::new_raw(n, *q.denom())),
                None => Number::Real(-q.to_f64().unwrap_or(f64::NAN)),
            },
            Number::Real(v) => Number::Real(-v),
        }
    }

    pub fn recip(self) -> Option<Number> {
        if self.is_zero() {
            return None;
        }
        Some(match self {
            Number::Exact(q) => Number::Exact(q.recip()),
            Number::Real(v) => Number::Real(1.0 / v),
        })
    }

    pub fn powi(self, n: u32) -> Number {
        if let Number::Exact(q) = self {
            let mut acc = Some(Rational::one());
            for _ in 0..n {
                acc = acc.and_then(|a| a.checked_mul(&q));
            }
            if let Some(a) = acc {
                return Number::Exact(a);
            }
        }
        Number::Real(self.to_f64().powi(n as i32))
    }
}

impl fmt::Display for Number {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Number::Exact(q) if q.is_integer() => write!(f, "{}", q.numer()),
            Number::Exact(q) => write!(f, "{}/{}", q.numer(), q.denom()),
            Number::Real(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
}

#[derive(Debug, PartialEq)]
enum Node {
    Const(Number),
    X,
    Y,
    Add(Expression, Expression),
    Sub(Expression, Expression),
    Mul(Expression, Expression),
    Pow(Expression, u32),
    Neg(Expression),
    Sin(Expression),
    Cos(Expression),
}

/// Immutable, cheaply clonable expression tree.
#[derive(Clone, Debug, PartialEq)]
pub struct Expression(Arc<Node>);

impl Expression {
    fn node(n: Node) -> Self {
        Expression(Arc::new(n))
    }

    pub fn constant(n: Number) -> Self {
        Self::node(Node::Const(n))
    }

    pub fn real(v: f64) -> Self {
        Self::constant(Number::Real(v))
    }

    pub fn int(v: i64) -> Self {
        Self::constant(Number::int(v))
    }

    pub fn rational(num: i64, den: i64) -> Self {
        Self::constant(Number::Exact(Rational::new(num, den)))
    }

    pub fn zero() -> Self {
        Self::int(0)
    }

    pub fn one() -> Self {
        Self::int(1)
    }

    pub fn x() -> Self {
        Self::node(Node::X)
    }

    pub fn y() -> Self {
        Self::node(Node::Y)
    }

    pub fn as_constant(&self) -> Option<Number> {
        match &*self.0 {
            Node::Const(n) => Some(*n),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_constant().is_some_and(Number::is_zero)
    }

    fn is_one(&self) -> bool {
        self.as_constant().is_some_and(Number::is_one)
    }

    pub fn pow(&self, n: u32) -> Self {
        match n {
            0 => Self::one(),
            1 => self.clone(),
            _ => match self.as_constant() {
                Some(c) => Self::constant(c.powi(n)),
                None => Self::node(Node::Pow(self.clone(), n)),
            },
        }
    }

    pub fn sin(&self) -> Self {
        match self.as_constant() {
            Some(c) if c.is_zero() => Self::zero(),
            Some(c) => Self::real(c.to_f64().sin()),
            None => Self::node(Node::Sin(self.clone())),
        }
    }

    pub fn cos(&self) -> Self {
        match self.as_constant() {
            Some(c) if c.is_zero() => Self::one(),
            Some(c) => Self::real(c.to_f64().cos()),
            None => Self::node(Node::Cos(self.clone())),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::real(c) * self.clone()
    }

    /// Recursive evaluation at `(x, y)`.
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match &*self.0 {
            Node::Const(n) => n.to_f64(),
            Node::X => x,
            Node::Y => y,
            Node::Add(a, b) => a.eval(x, y) + b.eval(x, y),
            Node::Sub(a, b) => a.eval(x, y) - b.eval(x, y),
            Node::Mul(a, b) => a.eval(x, y) * b.eval(x, y),
            Node::Pow(a, n) => a.eval(x, y).powi(*n as i32),
            Node::Neg(a) => -a.eval(x, y),
            Node::Sin(a) => a.eval(x, y).sin(),
            Node::Cos(a) => a.eval(x, y).cos(),
        }
    }

    pub fn derivative(&self, axis: Axis) -> Self {
        match &*self.0 {
            Node::Const(_) => Self::zero(),
            Node::X => match axis {
                Axis::X => Self::one(),
                Axis::Y => Self::zero(),
            },
            Node::Y => match axis {
                Axis::X => Self::zero(),
                Axis::Y => Self::one(),
            },
            Node::Add(a, b) => a.derivative(axis) + b.derivative(axis),
            Node::Sub(a, b) => a.derivative(axis) - b.derivative(axis),
            Node::Mul(a, b) => a.derivative(axis) * b.clone() + a.clone() * b.derivative(axis),
            Node::Pow(a, n) => Self::int(*n as i64) * a.pow(n - 1) * a.derivative(axis),
            Node::Neg(a) => -a.derivative(axis),
            Node::Sin(a) => a.cos() * a.derivative(axis),
            Node::Cos(a) => -(a.sin() * a.derivative(axis)),
        }
    }

    /// Replace `x` and `y` by the given expressions.
    pub fn substitute(&self, x: &Expression, y: &Expression) -> Self {
        match &*self.0 {
            Node::Const(_) => self.clone(),
            Node::X => x.clone(),
            Node::Y => y.clone(),
            Node::Add(a, b) => a.substitute(x, y) + b.substitute(x, y),
            Node::Sub(a, b) => a.substitute(x, y) - b.substitute(x, y),
            Node::Mul(a, b) => a.substitute(x, y) * b.substitute(x, y),
            Node::Pow(a, n) => a.substitute(x, y).pow(*n),
            Node::Neg(a) => -a.substitute(x, y),
            Node::Sin(a) => a.substitute(x, y).sin(),
            Node::Cos(a) => a.substitute(x, y).cos(),
        }
    }

    pub fn depends_on(&self, axis: Axis) -> bool {
        match &*self.0 {
            Node::Const(_) => false,
            Node::X => axis == Axis::X,
            Node::Y => axis == Axis::Y,
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) => {
                a.depends_on(axis) || b.depends_on(axis)
            }
            Node::Pow(a, _) | Node::Neg(a) | Node::Sin(a) | Node::Cos(a) => a.depends_on(axis),
        }
    }

    fn precedence(&self) -> u8 {
        match &*self.0 {
            Node::Add(..) | Node::Sub(..) => 1,
            Node::Mul(..) => 2,
            Node::Neg(..) => 3,
            Node::Const(Number::Exact(q)) if !q.is_integer() => 2,
            Node::Const(n) if n.is_negative() => 3,
            Node::Pow(..) => 4,
            _ => 5,
        }
    }
}

impl Add for Expression {
    type Output = Expression;
    fn add(self, rhs: Expression) -> Expression {
        match (self.as_constant(), rhs.as_constant()) {
            (Some(a), Some(b)) => Expression::constant(a.add(b)),
            (Some(a), None) if a.is_zero() => rhs,
            (None, Some(b)) if b.is_zero() => self,
            _ => Expression::node(Node::Add(self, rhs)),
        }
    }
}

impl Sub for Expression {
    type Output = Expression;
    fn sub(self, rhs: Expression) -> Expression {
        match (self.as_constant(), rhs.as_constant()) {
            (Some(a), Some(b)) => Expression::constant(a.sub(b)),
            (Some(a), None) if a.is_zero() => -rhs,
            (None, Some(b)) if b.is_zero() => self,
            _ => Expression::node(Node::Sub(self, rhs)),
        }
    }
}

impl Mul for Expression {
    type Output = Expression;
    fn mul(self, rhs: Expression) -> Expression {
        if self.is_zero() || rhs.is_zero() {
            return Expression::zero();
        }
        match (self.as_constant(), rhs.as_constant()) {
            (Some(a), Some(b)) => Expression::constant(a.mul(b)),
            _ if self.is_one() => rhs,
            _ if rhs.is_one() => self,
            _ => Expression::node(Node::Mul(self, rhs)),
        }
    }
}

impl Neg for Expression {
    type Output = Expression;
    fn neg(self) -> Expression {
        match &*self.0 {
            Node::Const(n) => Expression::constant(n.neg()),
            Node::Neg(a) => a.clone(),
            _ => Expression::node(Node::Neg(self)),
        }
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn wrap(e: &Expression, min: u8, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            if e.precedence() < min {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        }
        match &*self.0 {
            Node::Const(n) => write!(f, "{n}"),
            Node::X => f.write_str("x"),
            Node::Y => f.write_str("y"),
            Node::Add(a, b) => {
                wrap(a, 1, f)?;
                f.write_str(" + ")?;
                wrap(b, 2, f)
            }
            Node::Sub(a, b) => {
                wrap(a, 1, f)?;
                f.write_str(" - ")?;
                wrap(b, 2, f)
            }
            Node::Mul(a, b) => {
                wrap(a, 2, f)?;
                f.write_str("*")?;
                wrap(b, 3, f)
            }
            Node::Pow(a, n) => {
                wrap(a, 5, f)?;
                write!(f, "^{n}")
            }
            Node::Neg(a) => {
                f.write_str("-")?;
                wrap(a, 3, f)
            }
            Node::Sin(a) => write!(f, "sin({a})"),
            Node::Cos(a) => write!(f, "cos({a})"),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("parse error at position {position} near `{token}`: {message}")]
pub struct ParseError {
    pub position: usize,
    pub token: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(Number),
    Ident(String),
    Op(char),
    End,
}

struct Lexer<'a> {
    src: &'a str,
    toks: Vec<(usize, Tok, String)>,
}

impl<'a> Lexer<'a> {
    fn run(src: &'a str) -> Result<Vec<(usize, Tok, String)>, ParseError> {
        let mut lx = Lexer { src, toks: Vec::new() };
        let bytes = src.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i] as char;
            if c.is_ascii_whitespace() {
                i += 1;
            } else if c.is_ascii_digit() || c == '.' {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let num = parse_number(text).ok_or_else(|| ParseError {
                    position: start,
                    token: text.to_string(),
                    message: "malformed number".into(),
                })?;
                lx.toks.push((start, Tok::Num(num), text.to_string()));
            } else if c.is_ascii_alphabetic() || c == '_' {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                let text = &src[start..i];
                lx.toks.push((start, Tok::Ident(text.to_string()), text.to_string()));
            } else if "+-*/^()".contains(c) {
                lx.toks.push((i, Tok::Op(c), c.to_string()));
                i += 1;
            } else {
                return Err(ParseError {
                    position: i,
                    token: c.to_string(),
                    message: "unexpected character".into(),
                });
            }
        }
        lx.toks.push((lx.src.len(), Tok::End, "<end>".into()));
        Ok(lx.toks)
    }
}

fn parse_number(text: &str) -> Option<Number> {
    if text.contains(['e', 'E']) {
        return text.parse::<f64>().ok().map(Number::Real);
    }
    match text.split_once('.') {
        None => text.parse::<i64>().ok().map(Number::int).or_else(|| text.parse().ok().map(Number::Real)),
        Some((int, frac)) => {
            if int.is_empty() && frac.is_empty() {
                return None;
            }
            let digits = format!("{int}{frac}");
            let den = 10i64.checked_pow(frac.len() as u32);
            match (digits.parse::<i64>(), den) {
                (Ok(n), Some(d)) => Some(Number::Exact(Rational::new(n, d))),
                _ => text.parse::<f64>().ok().map(Number::Real),
            }
        }
    }
}

struct Parser<'v> {
    toks: Vec<(usize, Tok, String)>,
    pos: usize,
    x_names: &'v [&'v str],
    y_names: &'v [&'v str],
}

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].1
    }

    fn error(&self, message: impl Into<String>) -> ParseError {
        let (position, _, token) = &self.toks[self.pos];
        ParseError { position: *position, token: token.clone(), message: message.into() }
    }

    fn bump(&mut self) {
        self.pos += 1;
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if *self.peek() == Tok::Op(c) {
            self.bump();
            Ok(())
        } else {
            Err(self.error(format!("expected `{c}`")))
        }
    }

    fn expr(&mut self) -> Result<Expression, ParseError> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Tok::Op('+') => {
                    self.bump();
                    acc = acc + self.term()?;
                }
                Tok::Op('-') => {
                    self.bump();
                    acc = acc - self.term()?;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Expression, ParseError> {
        let mut acc = self.unary()?;
        loop {
            match self.peek() {
                Tok::Op('*') => {
                    self.bump();
                    acc = acc * self.unary()?;
                }
                Tok::Op('/') => {
                    self.bump();
                    let at = self.pos;
                    let rhs = self.unary()?;
                    let recip = rhs.as_constant().and_then(Number::recip).ok_or_else(|| {
                        let (position, _, token) = &self.toks[at];
                        ParseError {
                            position: *position,
                            token: token.clone(),
                            message: "division is only allowed by a nonzero constant".into(),
                        }
                    })?;
                    acc = Expression::constant(recip) * acc;
                }
                _ => return Ok(acc),
            }
        }
    }

    fn unary(&mut self) -> Result<Expression, ParseError> {
        match self.peek() {
            Tok::Op('-') => {
                self.bump();
                Ok(-self.unary()?)
            }
            Tok::Op('+') => {
                self.bump();
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expression, ParseError> {
        let base = self.atom()?;
        if *self.peek() != Tok::Op('^') {
            return Ok(base);
        }
        self.bump();
        let parenthesized = *self.peek() == Tok::Op('(');
        if parenthesized {
            self.bump();
        }
        let exponent = match self.peek().clone() {
            Tok::Num(Number::Exact(q)) if q.is_integer() && *q.numer() >= 0 && *q.numer() <= u32::MAX as i64 => {
                *q.numer() as u32
            }
            _ => return Err(self.error("exponent must be a non-negative integer literal")),
        };
        self.bump();
        if parenthesized {
            self.expect(')')?;
        }
        if *self.peek() == Tok::Op('^') {
            return Err(self.error("chained exponents need parentheses"));
        }
        Ok(base.pow(exponent))
    }

    fn atom(&mut self) -> Result<Expression, ParseError> {
        match self.peek().clone() {
            Tok::Num(n) => {
                self.bump();
                Ok(Expression::constant(n))
            }
            Tok::Ident(name) => {
                if self.x_names.contains(&name.as_str()) {
                    self.bump();
                    return Ok(Expression::x());
                }
                if self.y_names.contains(&name.as_str()) {
                    self.bump();
                    return Ok(Expression::y());
                }
                match name.as_str() {
                    "sin" | "cos" => {
                        self.bump();
                        self.expect('(')?;
                        let arg = self.expr()?;
                        self.expect(')')?;
                        Ok(if name == "sin" { arg.sin() } else { arg.cos() })
                    }
                    "pi" => {
                        self.bump();
                        Ok(Expression::real(std::f64::consts::PI))
                    }
                    _ => Err(self.error("unknown identifier")),
                }
            }
            Tok::Op('(') => {
                self.bump();
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            _ => Err(self.error("expected a number, variable, function or `(`")),
        }
    }
}

/// Parse with custom names for the two variables, e.g. `&["r"]` for a level
/// map written in terms of `r`.
pub fn parse_with_vars(src: &str, x_names: &[&str], y_names: &[&str]) -> Result<Expression, ParseError> {
    let toks = Lexer::run(src)?;
    let mut p = Parser { toks, pos: 0, x_names, y_names };
    let e = p.expr()?;
    if *p.peek() != Tok::End {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(e)
}

impl std::str::FromStr for Expression {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_with_vars(s, &["x"], &["y"])
    }
}

/// Which cached partial derivative to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partial {
    X,
    Y,
    XX,
    XY,
    YY,
    XXX,
    XXY,
    XYY,
    YYY,
}

impl Partial {
    const ALL: [Partial; 9] = [
        Partial::X,
        Partial::Y,
        Partial::XX,
        Partial::XY,
        Partial::YY,
        Partial::XXX,
        Partial::XXY,
        Partial::XYY,
        Partial::YYY,
    ];

    fn index(self) -> usize {
        self as usize
    }

    /// Differentiation path (x-count, y-count).
    pub fn orders(self) -> (u32, u32) {
        match self {
            Partial::X => (1, 0),
            Partial::Y => (0, 1),
            Partial::XX => (2, 0),
            Partial::XY => (1, 1),
            Partial::YY => (0, 2),
            Partial::XXX => (3, 0),
            Partial::XXY => (2, 1),
            Partial::XYY => (1, 2),
            Partial::YYY => (0, 3),
        }
    }
}

/// An expression with its partial derivatives up to total order three.
#[derive(Clone, Debug)]
pub struct ScalarField {
    expr: Expression,
    partials: Arc<[Expression; 9]>,
}

impl PartialEq for ScalarField {
    fn eq(&self, other: &Self) -> bool {
        self.expr == other.expr
    }
}

impl ScalarField {
    pub fn new(expr: Expression) -> Self {
        let dx = expr.derivative(Axis::X);
        let dy = expr.derivative(Axis::Y);
        let dxx = dx.derivative(Axis::X);
        let dxy = dx.derivative(Axis::Y);
        let dyy = dy.derivative(Axis::Y);
        let dxxx = dxx.derivative(Axis::X);
        let dxxy = dxx.derivative(Axis::Y);
        let dxyy = dxy.derivative(Axis::Y);
        let dyyy = dyy.derivative(Axis::Y);
        ScalarField {
            expr,
            partials: Arc::new([dx, dy, dxx, dxy, dyy, dxxx, dxxy, dxyy, dyyy]),
        }
    }

    pub fn parse(src: &str) -> Result<Self, ParseError> {
        Ok(Self::new(src.parse()?))
    }

    pub fn zero() -> Self {
        Self::new(Expression::zero())
    }

    pub fn expr(&self) -> &Expression {
        &self.expr
    }

    pub fn is_zero(&self) -> bool {
        self.expr.is_zero()
    }

    pub fn evaluate(&self, x: f64, y: f64) -> f64 {
        self.expr.eval(x, y)
    }

    pub fn partial_expr(&self, which: Partial) -> &Expression {
        &self.partials[which.index()]
    }

    pub fn partial(&self, which: Partial, x: f64, y: f64) -> f64 {
        self.partials[which.index()].eval(x, y)
    }

    pub fn dx(&self, x: f64, y: f64) -> f64 {
        self.partial(Partial::X, x, y)
    }

    pub fn dy(&self, x: f64, y: f64) -> f64 {
        self.partial(Partial::Y, x, y)
    }

    pub fn differentiate(&self, axis: Axis) -> ScalarField {
        let which = match axis {
            Axis::X => Partial::X,
            Axis::Y => Partial::Y,
        };
        ScalarField::new(self.partial_expr(which).clone())
    }

    /// Hamiltonian vector field `(H_y, -H_x)`.
    pub fn hamiltonian_velocity(&self, x: f64, y: f64) -> [f64; 2] {
        [self.dy(x, y), -self.dx(x, y)]
    }

    pub fn all_partials() -> [Partial; 9] {
        Partial::ALL
    }
}

impl From<Expression> for ScalarField {
    fn from(e: Expression) -> Self {
        ScalarField::new(e)
    }
}

impl fmt::Display for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.expr.fmt(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn field(s: &str) -> ScalarField {
        ScalarField::parse(s).unwrap()
    }

    #[test]
    fn evaluates_by_substitution() {
        assert_eq!(field("-y - x^2").evaluate(0.5, 0.0), -0.25);
        assert_eq!(field("(y-1)^2/2 - x^2/2").evaluate(0.0, 0.0), 0.5);
        assert!(field("sin(x)").evaluate(PI, 3.0).abs() < 1e-15);
    }

    #[test]
    fn differentiates_symbolically() {
        let h = field("-y - x^2");
        let hy = h.differentiate(Axis::Y);
        assert_eq!(hy.expr().as_constant().map(Number::to_f64), Some(-1.0));

        let h2 = field("(y-1)^2/2 - x^2/2");
        let hxx = h2.differentiate(Axis::X).differentiate(Axis::X);
        assert_eq!(hxx.expr().as_constant().map(Number::to_f64), Some(-1.0));

        let g = field("sin(x)*y^2").differentiate(Axis::X);
        for &(x, y) in &[(0.3f64, 1.2f64), (-2.0, 0.5)] {
            let want: f64 = x.cos() * y * y;
            assert!((g.evaluate(x, y) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn keeps_rationals_exact() {
        let e: Expression = "8/15*x".parse().unwrap();
        let c = e.derivative(Axis::X).as_constant().unwrap();
        assert_eq!(c, Number::Exact(Rational::new(8, 15)));
        let d: Expression = "6.000000005".parse().unwrap();
        assert_eq!(d.as_constant(), Some(Number::Exact(Rational::new(6_000_000_005, 1_000_000_000))));
    }

    #[test]
    fn cached_partials_match_fresh_differentiation() {
        let f = field("x^3*y - 2*x*y^2 + cos(x*y)");
        for p in ScalarField::all_partials() {
            let (nx, ny) = p.orders();
            let mut e = f.expr().clone();
            for _ in 0..nx {
                e = e.derivative(Axis::X);
            }
            for _ in 0..ny {
                e = e.derivative(Axis::Y);
            }
            for &(x, y) in &[(0.2, -0.7), (1.3, 0.4)] {
                let a = f.partial(p, x, y);
                let b = e.eval(x, y);
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{p:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn parse_errors_carry_position_and_token() {
        let err = Expression::from_str_err("x + * y");
        assert_eq!(err.position, 4);
        assert_eq!(err.token, "*");
        let err = Expression::from_str_err("x / y");
        assert_eq!(err.token, "y");
        let err = Expression::from_str_err("x^y");
        assert!(err.message.contains("exponent"));
        let err = Expression::from_str_err("tan(x)");
        assert_eq!(err.token, "tan");
        let err = Expression::from_str_err("(x + 1");
        assert_eq!(err.token, "<end>");
    }

    impl Expression {
        fn from_str_err(s: &str) -> ParseError {
            s.parse::<Expression>().unwrap_err()
        }
    }

    #[test]
    fn display_round_trips_through_parser() {
        for src in ["-y - x^2", "(y - 1)^2/2 - x^2/2", "sin(7*x) - 3/4*x*y^3", "-(x - y)*(x + y)", "x - (y - 2)"] {
            let e: Expression = src.parse().unwrap();
            let back: Expression = e.to_string().parse().unwrap();
            for &(x, y) in &[(0.3, -1.1), (2.0, 0.25)] {
                assert!((e.eval(x, y) - back.eval(x, y)).abs() < 1e-13, "{src} -> {e}");
            }
        }
    }

    #[test]
    fn substitution_composes() {
        let f: Expression = "sin(x) + x^2".parse().unwrap();
        let g = f.substitute(&(Expression::int(7) * Expression::x()), &Expression::y());
        assert!((g.eval(0.1, 0.0) - (0.7f64.sin() + 0.49)).abs() < 1e-15);
    }

    #[test]
    fn level_maps_parse_in_r() {
        let e = parse_with_vars("-r^2", &["r"], &[]).unwrap();
        assert_eq!(e.eval(0.5, 0.0), -0.25);
        assert!(parse_with_vars("x", &["r"], &[]).is_err());
    }
}
