//! Immutable symbolic expression trees over phase-space variables
//! `x0..xn, xi0..xin`, with exact differentiation, evaluation, Poisson
//! brackets, and Hamilton fields.
//!
//! Simplification is deliberately light: constant folding and 0/1
//! elimination only. Identities are established by evaluation, not by
//! rewriting to a normal form.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

/// A phase-space variable: position `x_i` or frequency `xi_i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    X(usize),
    Xi(usize),
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::X(i) => write!(f, "x{i}"),
            Var::Xi(i) => write!(f, "xi{i}"),
        }
    }
}

#[derive(Debug)]
enum Node {
    Const(f64),
    Var(Var),
    Add(Expr, Expr),
    Sub(Expr, Expr),
    Mul(Expr, Expr),
    Div(Expr, Expr),
    Neg(Expr),
    Pow(Expr, u32),
    Sqrt(Expr),
}

/// Immutable expression tree. Cheap to clone and safe to share across
/// threads; evaluation is pure.
#[derive(Clone, Debug)]
pub struct Expr(Arc<Node>);

impl Expr {
    pub fn constant(c: f64) -> Expr {
        Expr(Arc::new(Node::Const(c)))
    }

    pub fn var(v: Var) -> Expr {
        Expr(Arc::new(Node::Var(v)))
    }

    pub fn x(i: usize) -> Expr {
        Expr::var(Var::X(i))
    }

    pub fn xi(i: usize) -> Expr {
        Expr::var(Var::Xi(i))
    }

    pub fn zero() -> Expr {
        Expr::constant(0.0)
    }

    pub fn one() -> Expr {
        Expr::constant(1.0)
    }

    fn as_const(&self) -> Option<f64> {
        match &*self.0 {
            Node::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.as_const(), Some(c) if c == 0.0)
    }

    fn is_one(&self) -> bool {
        matches!(self.as_const(), Some(c) if c == 1.0)
    }

    pub fn add(a: &Expr, b: &Expr) -> Expr {
        if a.is_zero() {
            return b.clone();
        }
        if b.is_zero() {
            return a.clone();
        }
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            return Expr::constant(x + y);
        }
        Expr(Arc::new(Node::Add(a.clone(), b.clone())))
    }

    pub fn sub(a: &Expr, b: &Expr) -> Expr {
        if b.is_zero() {
            return a.clone();
        }
        if a.is_zero() {
            return Expr::neg(b);
        }
        if Arc::ptr_eq(&a.0, &b.0) {
            return Expr::zero();
        }
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            return Expr::constant(x - y);
        }
        Expr(Arc::new(Node::Sub(a.clone(), b.clone())))
    }

    pub fn mul(a: &Expr, b: &Expr) -> Expr {
        if a.is_zero() || b.is_zero() {
            return Expr::zero();
        }
        if a.is_one() {
            return b.clone();
        }
        if b.is_one() {
            return a.clone();
        }
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            return Expr::constant(x * y);
        }
        Expr(Arc::new(Node::Mul(a.clone(), b.clone())))
    }

    pub fn div(a: &Expr, b: &Expr) -> Expr {
        if b.is_one() {
            return a.clone();
        }
        if a.is_zero() {
            return Expr::zero();
        }
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            if y != 0.0 {
                return Expr::constant(x / y);
            }
        }
        Expr(Arc::new(Node::Div(a.clone(), b.clone())))
    }

    pub fn neg(a: &Expr) -> Expr {
        if let Some(x) = a.as_const() {
            return Expr::constant(-x);
        }
        if let Node::Neg(inner) = &*a.0 {
            return inner.clone();
        }
        Expr(Arc::new(Node::Neg(a.clone())))
    }

    pub fn pow(a: &Expr, k: u32) -> Expr {
        match k {
            0 => Expr::one(),
            1 => a.clone(),
            _ => {
                if let Some(x) = a.as_const() {
                    return Expr::constant(x.powi(k as i32));
                }
                Expr(Arc::new(Node::Pow(a.clone(), k)))
            }
        }
    }

    pub fn sqrt(a: &Expr) -> Expr {
        if let Some(x) = a.as_const() {
            if x >= 0.0 {
                return Expr::constant(x.sqrt());
            }
        }
        Expr(Arc::new(Node::Sqrt(a.clone())))
    }

    /// Sum of a slice of expressions.
    pub fn sum(terms: &[Expr]) -> Expr {
        terms.iter().fold(Expr::zero(), |acc, t| Expr::add(&acc, t))
    }

    /// Exact partial derivative with respect to `v`.
    pub fn diff(&self, v: Var) -> Expr {
        match &*self.0 {
            Node::Const(_) => Expr::zero(),
            Node::Var(u) => {
                if *u == v {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Node::Add(a, b) => Expr::add(&a.diff(v), &b.diff(v)),
            Node::Sub(a, b) => Expr::sub(&a.diff(v), &b.diff(v)),
            Node::Mul(a, b) => {
                Expr::add(&Expr::mul(&a.diff(v), b), &Expr::mul(a, &b.diff(v)))
            }
            Node::Div(a, b) => {
                let num = Expr::sub(&Expr::mul(&a.diff(v), b), &Expr::mul(a, &b.diff(v)));
                Expr::div(&num, &Expr::pow(b, 2))
            }
            Node::Neg(a) => Expr::neg(&a.diff(v)),
            Node::Pow(a, k) => {
                let da = a.diff(v);
                if da.is_zero() {
                    return Expr::zero();
                }
                let kf = Expr::constant(*k as f64);
                Expr::mul(&Expr::mul(&kf, &Expr::pow(a, k - 1)), &da)
            }
            Node::Sqrt(a) => {
                let da = a.diff(v);
                if da.is_zero() {
                    return Expr::zero();
                }
                let two_sqrt = Expr::mul(&Expr::constant(2.0), &Expr::sqrt(a));
                Expr::div(&da, &two_sqrt)
            }
        }
    }

    /// Evaluate at a phase point.
    pub fn eval(&self, p: &PhasePoint) -> Result<f64> {
        let v = self.eval_inner(p)?;
        if !v.is_finite() {
            return Err(Error::Domain(format!("non-finite value {v}")));
        }
        Ok(v)
    }

    fn eval_inner(&self, p: &PhasePoint) -> Result<f64> {
        Ok(match &*self.0 {
            Node::Const(c) => *c,
            Node::Var(Var::X(i)) => *p
                .x
                .get(*i)
                .ok_or_else(|| Error::Domain(format!("x{i} out of range for dimension {}", p.dim())))?,
            Node::Var(Var::Xi(i)) => *p
                .xi
                .get(*i)
                .ok_or_else(|| Error::Domain(format!("xi{i} out of range for dimension {}", p.dim())))?,
            Node::Add(a, b) => a.eval_inner(p)? + b.eval_inner(p)?,
            Node::Sub(a, b) => a.eval_inner(p)? - b.eval_inner(p)?,
            Node::Mul(a, b) => a.eval_inner(p)? * b.eval_inner(p)?,
            Node::Div(a, b) => {
                let den = b.eval_inner(p)?;
                if den == 0.0 {
                    return Err(Error::Domain("division by zero".into()));
                }
                a.eval_inner(p)? / den
            }
            Node::Neg(a) => -a.eval_inner(p)?,
            Node::Pow(a, k) => a.eval_inner(p)?.powi(*k as i32),
            Node::Sqrt(a) => {
                let v = a.eval_inner(p)?;
                if v < 0.0 {
                    return Err(Error::Domain(format!("sqrt of negative value {v}")));
                }
                v.sqrt()
            }
        })
    }

    /// Largest variable index appearing in the tree (x and xi pooled).
    pub fn max_index(&self) -> usize {
        match &*self.0 {
            Node::Const(_) => 0,
            Node::Var(Var::X(i)) | Node::Var(Var::Xi(i)) => *i,
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                a.max_index().max(b.max_index())
            }
            Node::Neg(a) | Node::Pow(a, _) | Node::Sqrt(a) => a.max_index(),
        }
    }

    pub fn uses(&self, v: Var) -> bool {
        match &*self.0 {
            Node::Const(_) => false,
            Node::Var(u) => *u == v,
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                a.uses(v) || b.uses(v)
            }
            Node::Neg(a) | Node::Pow(a, _) | Node::Sqrt(a) => a.uses(v),
        }
    }

    /// Flatten to a postfix tape for fast repeated evaluation.
    pub fn compile(&self, n: usize) -> Result<CompiledExpr> {
        let mut ops = Vec::new();
        self.compile_into(n, &mut ops)?;
        let mut depth = 0usize;
        let mut max_depth = 0usize;
        for op in &ops {
            match op {
                Op::Const(_) | Op::Load(_) => depth += 1,
                Op::Add | Op::Sub | Op::Mul | Op::Div => depth -= 1,
                Op::Neg | Op::Pow(_) | Op::Sqrt => {}
            }
            max_depth = max_depth.max(depth);
        }
        Ok(CompiledExpr { ops, max_depth })
    }

    fn compile_into(&self, n: usize, ops: &mut Vec<Op>) -> Result<()> {
        match &*self.0 {
            Node::Const(c) => ops.push(Op::Const(*c)),
            Node::Var(Var::X(i)) => {
                if *i > n {
                    return Err(Error::Invalid(format!("x{i} exceeds dimension {n}")));
                }
                ops.push(Op::Load(*i));
            }
            Node::Var(Var::Xi(i)) => {
                if *i > n {
                    return Err(Error::Invalid(format!("xi{i} exceeds dimension {n}")));
                }
                ops.push(Op::Load(n + 1 + *i));
            }
            Node::Add(a, b) => {
                a.compile_into(n, ops)?;
                b.compile_into(n, ops)?;
                ops.push(Op::Add);
            }
            Node::Sub(a, b) => {
                a.compile_into(n, ops)?;
                b.compile_into(n, ops)?;
                ops.push(Op::Sub);
            }
            Node::Mul(a, b) => {
                a.compile_into(n, ops)?;
                b.compile_into(n, ops)?;
                ops.push(Op::Mul);
            }
            Node::Div(a, b) => {
                a.compile_into(n, ops)?;
                b.compile_into(n, ops)?;
                ops.push(Op::Div);
            }
            Node::Neg(a) => {
                a.compile_into(n, ops)?;
                ops.push(Op::Neg);
            }
            Node::Pow(a, k) => {
                a.compile_into(n, ops)?;
                ops.push(Op::Pow(*k));
            }
            Node::Sqrt(a) => {
                a.compile_into(n, ops)?;
                ops.push(Op::Sqrt);
            }
        }
        Ok(())
    }
}

impl std::ops::Add for &Expr {
    type Output = Expr;
    fn add(self, rhs: &Expr) -> Expr {
        Expr::add(self, rhs)
    }
}

impl std::ops::Sub for &Expr {
    type Output = Expr;
    fn sub(self, rhs: &Expr) -> Expr {
        Expr::sub(self, rhs)
    }
}

impl std::ops::Mul for &Expr {
    type Output = Expr;
    fn mul(self, rhs: &Expr) -> Expr {
        Expr::mul(self, rhs)
    }
}

impl std::ops::Div for &Expr {
    type Output = Expr;
    fn div(self, rhs: &Expr) -> Expr {
        Expr::div(self, rhs)
    }
}

impl std::ops::Neg for &Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::neg(self)
    }
}

// ---------------------------------------------------------------------------
// Printing
// ---------------------------------------------------------------------------

fn prec(e: &Expr) -> u8 {
    match &*e.0 {
        Node::Add(..) | Node::Sub(..) => 1,
        Node::Mul(..) | Node::Div(..) => 2,
        Node::Neg(_) => 3,
        Node::Const(c) if *c < 0.0 => 3,
        Node::Pow(..) => 4,
        _ => 5,
    }
}

fn write_wrapped(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
    if prec(e) < min_prec {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &*self.0 {
            Node::Const(c) => write!(f, "{c:?}"),
            Node::Var(v) => write!(f, "{v}"),
            Node::Add(a, b) => {
                write_wrapped(f, a, 1)?;
                write!(f, " + ")?;
                write_wrapped(f, b, 2)
            }
            Node::Sub(a, b) => {
                write_wrapped(f, a, 1)?;
                write!(f, " - ")?;
                write_wrapped(f, b, 2)
            }
            Node::Mul(a, b) => {
                write_wrapped(f, a, 2)?;
                write!(f, "*")?;
                write_wrapped(f, b, 3)
            }
            Node::Div(a, b) => {
                write_wrapped(f, a, 2)?;
                write!(f, "/")?;
                write_wrapped(f, b, 5)
            }
            Node::Neg(a) => {
                write!(f, "-")?;
                write_wrapped(f, a, 3)
            }
            Node::Pow(a, k) => {
                write_wrapped(f, a, 5)?;
                write!(f, "^{k}")
            }
            Node::Sqrt(a) => write!(f, "sqrt({a})"),
        }
    }
}

// ---------------------------------------------------------------------------
// Compiled form
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
enum Op {
    Const(f64),
    Load(usize),
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Pow(u32),
    Sqrt,
}

/// Postfix tape compiled against a fixed dimension; evaluation over a flat
/// state vector `[x0..xn, xi0..xin]` without tree walking.
#[derive(Clone, Debug)]
pub struct CompiledExpr {
    ops: Vec<Op>,
    max_depth: usize,
}

impl CompiledExpr {
    pub fn eval(&self, state: &[f64]) -> Result<f64> {
        let mut stack: Vec<f64> = Vec::with_capacity(self.max_depth);
        for op in &self.ops {
            match op {
                Op::Const(c) => stack.push(*c),
                Op::Load(i) => stack.push(state[*i]),
                Op::Add => {
                    let b = stack.pop().unwrap();
                    *stack.last_mut().unwrap() += b;
                }
                Op::Sub => {
                    let b = stack.pop().unwrap();
                    *stack.last_mut().unwrap() -= b;
                }
                Op::Mul => {
                    let b = stack.pop().unwrap();
                    *stack.last_mut().unwrap() *= b;
                }
                Op::Div => {
                    let b = stack.pop().unwrap();
                    if b == 0.0 {
                        return Err(Error::Domain("division by zero".into()));
                    }
                    *stack.last_mut().unwrap() /= b;
                }
                Op::Neg => {
                    let t = stack.last_mut().unwrap();
                    *t = -*t;
                }
                Op::Pow(k) => {
                    let t = stack.last_mut().unwrap();
                    *t = t.powi(*k as i32);
                }
                Op::Sqrt => {
                    let t = stack.last_mut().unwrap();
                    if *t < 0.0 {
                        return Err(Error::Domain(format!("sqrt of negative value {t}")));
                    }
                    *t = t.sqrt();
                }
            }
        }
        let v = stack.pop().unwrap();
        if !v.is_finite() {
            return Err(Error::Domain(format!("non-finite value {v}")));
        }
        Ok(v)
    }
}

// ---------------------------------------------------------------------------
// Poisson bracket and Hamilton field
// ---------------------------------------------------------------------------

/// Poisson bracket `{f, g} = sum_j (df/dxi_j dg/dx_j - df/dx_j dg/dxi_j)`.
///
/// The sign convention is pinned by `{xi0, x0} = 1` and by
/// `d/ds f(gamma(s)) = {p, f}` along `dx/ds = dp/dxi, dxi/ds = -dp/dx`.
pub fn poisson(f: &Expr, g: &Expr) -> Expr {
    let m = f.max_index().max(g.max_index());
    let mut acc = Expr::zero();
    for j in 0..=m {
        let term = Expr::sub(
            &Expr::mul(&f.diff(Var::Xi(j)), &g.diff(Var::X(j))),
            &Expr::mul(&f.diff(Var::X(j)), &g.diff(Var::Xi(j))),
        );
        acc = Expr::add(&acc, &term);
    }
    acc
}

/// Hamilton vector field of `f` with state ordering `[x, xi]`:
/// x-slots carry `df/dxi_i`, xi-slots carry `-df/dx_i`.
pub fn hamilton_field(f: &Expr, n: usize) -> Vec<Expr> {
    let mut field = Vec::with_capacity(2 * (n + 1));
    for i in 0..=n {
        field.push(f.diff(Var::Xi(i)));
    }
    for i in 0..=n {
        field.push(Expr::neg(&f.diff(Var::X(i))));
    }
    field
}

// ---------------------------------------------------------------------------
// Phase points
// ---------------------------------------------------------------------------

/// A point `(x, xi)` in phase space with `|xi'| = |(xi1..xin)| > 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhasePoint {
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
}

impl PhasePoint {
    pub fn new(x: Vec<f64>, xi: Vec<f64>) -> Result<Self> {
        if x.len() != xi.len() || x.is_empty() {
            return Err(Error::Invalid(format!(
                "phase point needs equal nonzero lengths, got {} and {}",
                x.len(),
                xi.len()
            )));
        }
        let p = PhasePoint { x, xi };
        if p.xi_prime_norm() == 0.0 {
            return Err(Error::Invalid("conic variable xi' must be nonzero".into()));
        }
        Ok(p)
    }

    /// Construct without the conic check (integrator internals).
    pub(crate) fn unchecked(x: Vec<f64>, xi: Vec<f64>) -> Self {
        PhasePoint { x, xi }
    }

    pub fn dim(&self) -> usize {
        self.x.len() - 1
    }

    pub fn xi_prime_norm(&self) -> f64 {
        self.xi[1..].iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Canonical representative on the cone: rescale `xi` so `|xi'| = 1`.
    pub fn normalized(&self) -> PhasePoint {
        let s = self.xi_prime_norm();
        PhasePoint {
            x: self.x.clone(),
            xi: self.xi.iter().map(|v| v / s).collect(),
        }
    }

    pub fn to_state(&self) -> Vec<f64> {
        let mut s = self.x.clone();
        s.extend_from_slice(&self.xi);
        s
    }

    pub fn from_state(state: &[f64]) -> PhasePoint {
        let half = state.len() / 2;
        PhasePoint::unchecked(state[..half].to_vec(), state[half..].to_vec())
    }

    pub fn dist(&self, other: &PhasePoint) -> f64 {
        self.x
            .iter()
            .zip(&other.x)
            .chain(self.xi.iter().zip(&other.xi))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

/// Parse an expression. `params` supplies named constants; exponents must
/// resolve to nonnegative integers.
pub fn parse(text: &str, params: &BTreeMap<String, f64>) -> Result<Expr> {
    let mut p = Parser { bytes: text.as_bytes(), pos: 0, params };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.bytes.len() {
        return Err(Error::Parse {
            pos: p.pos,
            msg: format!("unexpected trailing input `{}`", &text[p.pos..]),
        });
    }
    Ok(e)
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    params: &'a BTreeMap<String, f64>,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    let t = self.term()?;
                    acc = Expr::add(&acc, &t);
                }
                Some(b'-') => {
                    self.pos += 1;
                    let t = self.term()?;
                    acc = Expr::sub(&acc, &t);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut acc = self.unary()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    let t = self.unary()?;
                    acc = Expr::mul(&acc, &t);
                }
                Some(b'/') => {
                    self.pos += 1;
                    let t = self.unary()?;
                    acc = Expr::div(&acc, &t);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(b'-') => {
                self.pos += 1;
                let e = self.unary()?;
                Ok(Expr::neg(&e))
            }
            Some(b'+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let k = self.exponent()?;
            Ok(Expr::pow(&base, k))
        } else {
            Ok(base)
        }
    }

    fn exponent(&mut self) -> Result<u32> {
        self.skip_ws();
        let start = self.pos;
        let value = match self.peek() {
            Some(c) if c.is_ascii_digit() => self.number()?,
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let name = self.ident_text();
                match self.params.get(&name) {
                    Some(v) => *v,
                    None => {
                        return Err(Error::UnknownIdentifier { name, pos: start });
                    }
                }
            }
            _ => {
                return Err(Error::Parse { pos: start, msg: "expected integer exponent".into() });
            }
        };
        let k = value.round();
        if (value - k).abs() > 1e-9 || !(0.0..=60.0).contains(&k) {
            return Err(Error::Parse {
                pos: start,
                msg: format!("exponent must be an integer in 0..=60, got {value}"),
            });
        }
        Ok(k as u32)
    }

    fn atom(&mut self) -> Result<Expr> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(Error::Parse { pos: self.pos, msg: "expected `)`".into() });
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => Ok(Expr::constant(self.number()?)),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let name = self.ident_text();
                if name == "sqrt" {
                    if self.peek() != Some(b'(') {
                        return Err(Error::Parse { pos: self.pos, msg: "expected `(` after sqrt".into() });
                    }
                    self.pos += 1;
                    let e = self.expr()?;
                    if self.peek() != Some(b')') {
                        return Err(Error::Parse { pos: self.pos, msg: "expected `)`".into() });
                    }
                    self.pos += 1;
                    return Ok(Expr::sqrt(&e));
                }
                if let Some(v) = parse_var(&name) {
                    return Ok(Expr::var(v));
                }
                if let Some(v) = self.params.get(&name) {
                    return Ok(Expr::constant(*v));
                }
                Err(Error::UnknownIdentifier { name, pos: start })
            }
            Some(c) => Err(Error::Parse {
                pos: self.pos,
                msg: format!("unexpected character `{}`", c as char),
            }),
            None => Err(Error::Parse { pos: self.pos, msg: "unexpected end of input".into() }),
        }
    }

    fn ident_text(&mut self) -> String {
        let start = self.pos;
        while self.pos < self.bytes.len()
            && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_')
        {
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned()
    }

    fn number(&mut self) -> Result<f64> {
        let start = self.pos;
        while self.pos < self.bytes.len() && {
            let c = self.bytes[self.pos];
            c.is_ascii_digit() || c == b'.'
        } {
            self.pos += 1;
        }
        // exponent part of a float literal
        if self.pos < self.bytes.len() && (self.bytes[self.pos] | 32) == b'e' {
            let mut ahead = self.pos + 1;
            if ahead < self.bytes.len() && (self.bytes[ahead] == b'+' || self.bytes[ahead] == b'-')
            {
                ahead += 1;
            }
            if ahead < self.bytes.len() && self.bytes[ahead].is_ascii_digit() {
                self.pos = ahead;
                while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            }
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
        text.parse::<f64>().map_err(|_| Error::Parse {
            pos: start,
            msg: format!("invalid number `{text}`"),
        })
    }
}

/// Recognize `x<k>` / `xi<k>` identifiers.
fn parse_var(name: &str) -> Option<Var> {
    let (kind, digits) = if let Some(rest) = name.strip_prefix("xi") {
        (true, rest)
    } else if let Some(rest) = name.strip_prefix('x') {
        (false, rest)
    } else {
        return None;
    };
    if digits.is_empty() || !digits.bytes().all(|c| c.is_ascii_digit()) {
        return None;
    }
    let idx: usize = digits.parse().ok()?;
    Some(if kind { Var::Xi(idx) } else { Var::X(idx) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> BTreeMap<String, f64> {
        BTreeMap::new()
    }

    fn pt(x: &[f64], xi: &[f64]) -> PhasePoint {
        PhasePoint::new(x.to_vec(), xi.to_vec()).unwrap()
    }

    #[test]
    fn parse_basic() {
        let e = parse("xi1 + x0*xin", &[("xin".to_string(), 0.0)].into_iter().collect());
        // `xin` is not a variable (no digits); treated as a parameter here
        assert!(e.is_ok());
        let e = parse("xi1 + x0*xi2", &params()).unwrap();
        let p = pt(&[1.0, 0.0, 0.0], &[0.0, 2.0, 3.0]);
        assert_eq!(e.eval(&p).unwrap(), 2.0 + 3.0);
    }

    #[test]
    fn parse_unknown_identifier() {
        let err = parse("x1^2*(1 + x1 + nu)", &params()).unwrap_err();
        match err {
            Error::UnknownIdentifier { name, .. } => assert_eq!(name, "nu"),
            other => panic!("expected unknown identifier, got {other}"),
        }
    }

    #[test]
    fn parse_phi2_with_parameter_exponent() {
        let mut ps = params();
        ps.insert("k".into(), 2.0);
        let e = parse("(x0 + x1 - x0*x2^k/2)*xi3", &ps).unwrap();
        let p = pt(&[0.1, 0.2, 0.3, 0.0], &[0.0, 0.0, 0.0, 1.0]);
        let want = (0.1 + 0.2 - 0.1 * 0.3f64.powi(2) / 2.0) * 1.0;
        assert!((e.eval(&p).unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn parse_error_position() {
        let err = parse("x0 + * x1", &params()).unwrap_err();
        match err {
            Error::Parse { pos, .. } => assert_eq!(pos, 5),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn diff_power() {
        // d(xi1^2)/dxi1 = 2 xi1
        let e = parse("xi1^2", &params()).unwrap();
        let d = e.diff(Var::Xi(1));
        let p = pt(&[0.0, 0.0], &[0.0, 3.0]);
        assert_eq!(d.eval(&p).unwrap(), 6.0);
    }

    #[test]
    fn diff_product() {
        // d((x0+x1) xi2)/dx0 = xi2
        let e = parse("(x0+x1)*xi2", &params()).unwrap();
        let d = e.diff(Var::X(0));
        let p = pt(&[0.5, -0.2, 0.0], &[0.0, 0.0, 4.0]);
        assert_eq!(d.eval(&p).unwrap(), 4.0);
    }

    #[test]
    fn diff_transition_coefficient() {
        // theta(x1) = (1+k) x1^k + k^2 x1^(2k) / (4 (1+x1^k)) at k=1:
        // derivative at x1=0 equals 2
        let mut ps = params();
        ps.insert("k".into(), 1.0);
        let e = parse("(1+k)*x1^k + k^2*x1^2/(4*(1+x1^k))", &ps).unwrap();
        let d = e.diff(Var::X(1));
        let p = pt(&[0.0, 0.0, 0.0], &[0.0, 0.0, 1.0]);
        assert!((d.eval(&p).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn clairaut_mixed_partials() {
        let e = parse("x0^3*xi1^2 + sqrt(1 + x1^2)*xi2 - x0/(2 + xi1)", &params()).unwrap();
        let exy = e.diff(Var::X(0)).diff(Var::Xi(1));
        let eyx = e.diff(Var::Xi(1)).diff(Var::X(0));
        let mut rng = crate::rng::Rng::new(11);
        for _ in 0..50 {
            let p = pt(
                &[rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-1.0, 1.0)],
                &[rng.range(-1.0, 1.0), rng.range(-0.5, 0.5), rng.range(0.5, 1.5)],
            );
            let a = exy.eval(&p).unwrap();
            let b = eyx.eval(&p).unwrap();
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn diff_matches_finite_differences() {
        // independent oracle: central differences
        let e = parse("x0^2*xi1 + xi1^3/(1 + x1^2) + sqrt(2 + x0)", &params()).unwrap();
        let d = e.diff(Var::X(0));
        let h = 1e-5;
        let mut rng = crate::rng::Rng::new(3);
        for _ in 0..20 {
            let x0 = rng.range(-0.5, 0.5);
            let x1 = rng.range(-0.5, 0.5);
            let xi1 = rng.range(-1.0, 1.0);
            let at = |x0: f64| {
                e.eval(&pt(&[x0, x1], &[0.0, xi1])).unwrap()
            };
            let fd = (at(x0 + h) - at(x0 - h)) / (2.0 * h);
            let ex = d.eval(&pt(&[x0, x1], &[0.0, xi1])).unwrap();
            assert!((fd - ex).abs() < 1e-8 * (1.0 + ex.abs()), "{fd} vs {ex}");
        }
    }

    #[test]
    fn eval_domain_errors() {
        let e = parse("1/x0", &params()).unwrap();
        assert!(e.eval(&pt(&[0.0, 0.0], &[0.0, 1.0])).is_err());
        let s = parse("sqrt(x0)", &params()).unwrap();
        assert!(s.eval(&pt(&[-1.0, 0.0], &[0.0, 1.0])).is_err());
    }

    #[test]
    fn theta_hat_evaluation() {
        // -theta/(sqrt(1+theta) + 1 + theta) at theta=3 is -0.5
        let mut ps = params();
        ps.insert("theta".into(), 3.0);
        let e = parse("-theta/(sqrt(1+theta) + 1 + theta)", &ps).unwrap();
        let p = pt(&[0.0, 0.0], &[0.0, 1.0]);
        assert!((e.eval(&p).unwrap() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn poisson_canonical_pairs() {
        // {xi_i, x_j} = delta_ij, {x_i, x_j} = {xi_i, xi_j} = 0, exactly
        for i in 0..3usize {
            for j in 0..3usize {
                let b = poisson(&Expr::xi(i), &Expr::x(j));
                let want = if i == j { 1.0 } else { 0.0 };
                assert_eq!(b.as_const(), Some(want), "{{xi{i}, x{j}}}");
                assert_eq!(poisson(&Expr::x(i), &Expr::x(j)).as_const(), Some(0.0));
                assert_eq!(poisson(&Expr::xi(i), &Expr::xi(j)).as_const(), Some(0.0));
            }
        }
    }

    #[test]
    fn poisson_flow_anchor() {
        // {xi0, x0} = 1 pins the sign convention
        assert_eq!(poisson(&Expr::xi(0), &Expr::x(0)).as_const(), Some(1.0));
    }

    #[test]
    fn poisson_example_pair() {
        // {xi1, (x0+x1) xi2} = xi2, value 1 at x=0, xi=e2
        let f = Expr::xi(1);
        let g = parse("(x0+x1)*xi2", &params()).unwrap();
        let b = poisson(&f, &g);
        let p = pt(&[0.0, 0.0, 0.0], &[0.0, 0.0, 1.0]);
        assert_eq!(b.eval(&p).unwrap(), 1.0);
    }

    #[test]
    fn hamilton_field_components() {
        let f = Expr::xi(0);
        let field = hamilton_field(&f, 2);
        // x-slot 0 carries df/dxi0 = 1, everything else 0
        let p = pt(&[0.1, 0.2, 0.3], &[0.4, 0.5, 0.6]);
        let vals: Vec<f64> = field.iter().map(|e| e.eval(&p).unwrap()).collect();
        assert_eq!(vals, vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let g = Expr::x(0);
        let field = hamilton_field(&g, 2);
        let vals: Vec<f64> = field.iter().map(|e| e.eval(&p).unwrap()).collect();
        assert_eq!(vals, vec![0.0, 0.0, 0.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn euler_homogeneity() {
        // xi-homogeneous of degree 2: sum xi_j df/dxi_j = 2 f
        let f = parse("xi1^2 + (x0+x1)^2*xi2^2 - xi0^2", &params()).unwrap();
        let n = 2;
        let mut rng = crate::rng::Rng::new(5);
        for _ in 0..50 {
            let p = pt(
                &[rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-1.0, 1.0)],
                &[rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(0.5, 1.5)],
            );
            let mut acc = 0.0;
            for j in 0..=n {
                acc += p.xi[j] * f.diff(Var::Xi(j)).eval(&p).unwrap();
            }
            let fv = f.eval(&p).unwrap();
            assert!((acc - 2.0 * fv).abs() <= 1e-10 * (1.0 + fv.abs()));
        }
    }

    #[test]
    fn print_parse_roundtrip() {
        let sources = [
            "xi1 + x0*xi2",
            "(x0 + x1 - x0*x2^2/2)*xi3",
            "-x1*(1+x1)*xi3/(1 + 1.5*x1)",
            "sqrt(1 + x0^2*x2^2)",
            "2*x2^3/3 + x0^2*x2^4 - x2^6/9",
            "1/(1 - x2^3/3)^2",
            "-(x0 + x1)*(x0 - x1) + 0.25*xi1^2",
        ];
        let mut rng = crate::rng::Rng::new(17);
        for src in sources {
            let e = parse(src, &params()).unwrap();
            let printed = format!("{e}");
            let back = parse(&printed, &params()).unwrap_or_else(|err| {
                panic!("failed to reparse `{printed}`: {err}");
            });
            for _ in 0..20 {
                let p = pt(
                    &[rng.range(-0.4, 0.4), rng.range(-0.4, 0.4), rng.range(-0.4, 0.4), rng.range(-0.4, 0.4)],
                    &[rng.range(-0.4, 0.4), rng.range(-0.4, 0.4), rng.range(-0.4, 0.4), rng.range(0.6, 1.4)],
                );
                let a = e.eval(&p).unwrap();
                let b = back.eval(&p).unwrap();
                assert!((a - b).abs() <= 1e-14 * (1.0 + a.abs()), "`{src}` vs `{printed}`");
            }
        }
    }

    #[test]
    fn compiled_matches_tree() {
        let e = parse("x0^3*xi1^2/(2 + x2) + sqrt(1 + xi2^2) - x1", &params()).unwrap();
        let c = e.compile(2).unwrap();
        let mut rng = crate::rng::Rng::new(23);
        for _ in 0..100 {
            let p = pt(
                &[rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-1.0, 1.0)],
                &[rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), rng.range(-1.0, 1.0)],
            );
            let a = e.eval(&p).unwrap();
            let b = c.eval(&p.to_state()).unwrap();
            assert!((a - b).abs() <= 1e-15 * (1.0 + a.abs()));
        }
    }
}
