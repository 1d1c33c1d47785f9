//! Small symbolic expression language for potentials, test functions and
//! twist fields.
//!
//! Grammar: `+ - * / ^`, parentheses, numeric literals, the functions
//! `sin cos exp ln tanh sqrt`, the constants `pi` and `e`, coordinates
//! (`x y z`, `x1 .. x9`, `theta phi`) and free parameters `p0 .. p99`.
//! Exponents must reduce to numeric constants. Every expression can be
//! differentiated exactly with respect to a coordinate.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Ln,
    Tanh,
    Sqrt,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Ln => "ln",
            Func::Tanh => "tanh",
            Func::Sqrt => "sqrt",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "ln" | "log" => Func::Ln,
            "tanh" => Func::Tanh,
            "sqrt" => Func::Sqrt,
            _ => return None,
        })
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func::Sin => v.sin(),
            Func::Cos => v.cos(),
            Func::Exp => v.exp(),
            Func::Ln => v.ln(),
            Func::Tanh => v.tanh(),
            Func::Sqrt => v.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    /// Chart coordinate by index.
    Var(usize),
    /// Free parameter by index.
    Param(usize),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Pow(Box<Expr>, f64),
    Call(Func, Box<Expr>),
}

impl Expr {
    pub fn parse(input: &str) -> Result<Expr> {
        let mut p = Parser {
            src: input,
            toks: tokenize(input)?,
            pos: 0,
        };
        let e = p.expr()?;
        if p.pos != p.toks.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(e)
    }

    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn var(i: usize) -> Expr {
        Expr::Var(i)
    }

    pub fn eval(&self, x: &[f64], params: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => x.get(*i).copied().unwrap_or(f64::NAN),
            Expr::Param(i) => params.get(*i).copied().unwrap_or(f64::NAN),
            Expr::Add(a, b) => a.eval(x, params) + b.eval(x, params),
            Expr::Sub(a, b) => a.eval(x, params) - b.eval(x, params),
            Expr::Mul(a, b) => a.eval(x, params) * b.eval(x, params),
            Expr::Div(a, b) => a.eval(x, params) / b.eval(x, params),
            Expr::Neg(a) => -a.eval(x, params),
            Expr::Pow(a, k) => powf(a.eval(x, params), *k),
            Expr::Call(f, a) => f.apply(a.eval(x, params)),
        }
    }

    /// Exact partial derivative with respect to coordinate `var`.
    pub fn diff(&self, var: usize) -> Expr {
        match self {
            Expr::Const(_) | Expr::Param(_) => Expr::Const(0.0),
            Expr::Var(i) => Expr::Const(if *i == var { 1.0 } else { 0.0 }),
            Expr::Add(a, b) => add(a.diff(var), b.diff(var)),
            Expr::Sub(a, b) => sub(a.diff(var), b.diff(var)),
            Expr::Mul(a, b) => add(mul(a.diff(var), (**b).clone()), mul((**a).clone(), b.diff(var))),
            Expr::Div(a, b) => {
                // (a'b - ab') / b^2
                let num = sub(mul(a.diff(var), (**b).clone()), mul((**a).clone(), b.diff(var)));
                div(num, pow((**b).clone(), 2.0))
            }
            Expr::Neg(a) => neg(a.diff(var)),
            Expr::Pow(a, k) => mul(mul(Expr::Const(*k), pow((**a).clone(), k - 1.0)), a.diff(var)),
            Expr::Call(f, a) => {
                let inner = a.diff(var);
                let u = (**a).clone();
                let outer = match f {
                    Func::Sin => call(Func::Cos, u),
                    Func::Cos => neg(call(Func::Sin, u)),
                    Func::Exp => call(Func::Exp, u),
                    Func::Ln => div(Expr::Const(1.0), u),
                    Func::Tanh => sub(Expr::Const(1.0), pow(call(Func::Tanh, u), 2.0)),
                    Func::Sqrt => div(Expr::Const(0.5), call(Func::Sqrt, u)),
                };
                mul(outer, inner)
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    /// Largest coordinate index referenced, if any.
    pub fn max_var(&self) -> Option<usize> {
        self.fold_indices(&|e| match e {
            Expr::Var(i) => Some(*i),
            _ => None,
        })
    }

    /// Largest parameter index referenced, if any.
    pub fn max_param(&self) -> Option<usize> {
        self.fold_indices(&|e| match e {
            Expr::Param(i) => Some(*i),
            _ => None,
        })
    }

    fn fold_indices(&self, leaf: &dyn Fn(&Expr) -> Option<usize>) -> Option<usize> {
        match self {
            Expr::Const(_) | Expr::Var(_) | Expr::Param(_) => leaf(self),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                match (a.fold_indices(leaf), b.fold_indices(leaf)) {
                    (Some(x), Some(y)) => Some(x.max(y)),
                    (x, y) => x.or(y),
                }
            }
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.fold_indices(leaf),
        }
    }
}

fn powf(base: f64, k: f64) -> f64 {
    if k == 2.0 {
        base * base
    } else if k.fract() == 0.0 && k.abs() < 64.0 {
        base.powi(k as i32)
    } else {
        base.powf(k)
    }
}

// Smart constructors with light constant folding; they keep derivative
// trees small enough for the hot path.

pub fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
        _ if a.is_zero() => b,
        _ if b.is_zero() => a,
        _ => Expr::Add(Box::new(a), Box::new(b)),
    }
}

pub fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
        _ if b.is_zero() => a,
        _ if a.is_zero() => neg(b),
        _ => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

pub fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
        _ if a.is_zero() || b.is_zero() => Expr::Const(0.0),
        (Expr::Const(x), _) if *x == 1.0 => b,
        (_, Expr::Const(y)) if *y == 1.0 => a,
        (Expr::Const(x), _) if *x == -1.0 => neg(b),
        (_, Expr::Const(y)) if *y == -1.0 => neg(a),
        _ => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

pub fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) if *y != 0.0 => Expr::Const(x / y),
        _ if a.is_zero() => Expr::Const(0.0),
        (_, Expr::Const(y)) if *y == 1.0 => a,
        _ => Expr::Div(Box::new(a), Box::new(b)),
    }
}

pub fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(x) => Expr::Const(-x),
        Expr::Neg(inner) => *inner,
        other => Expr::Neg(Box::new(other)),
    }
}

pub fn pow(a: Expr, k: f64) -> Expr {
    if k == 0.0 {
        return Expr::Const(1.0);
    }
    if k == 1.0 {
        return a;
    }
    match a {
        Expr::Const(x) => Expr::Const(powf(x, k)),
        other => Expr::Pow(Box::new(other), k),
    }
}

pub fn call(f: Func, a: Expr) -> Expr {
    match a {
        Expr::Const(x) => Expr::Const(f.apply(x)),
        other => Expr::Call(f, Box::new(other)),
    }
}

// Printing: fully parenthesised binary nodes so the output reparses to an
// identical tree.

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => {
                if *c < 0.0 {
                    write!(f, "({c:?})")
                } else {
                    write!(f, "{c:?}")
                }
            }
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Param(i) => write!(f, "p{i}"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Pow(a, k) => {
                if *k < 0.0 {
                    write!(f, "({a}^({k:?}))")
                } else {
                    write!(f, "({a}^{k:?})")
                }
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<(Tok, usize)>> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < bytes.len() && ((bytes[i] as char).is_ascii_digit() || bytes[i] == b'.') {
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
            let v: f64 = text.parse().map_err(|_| Error::Parse {
                input: src.to_string(),
                pos: start,
                msg: format!("bad number `{text}`"),
            })?;
            out.push((Tok::Num(v), start));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((Tok::Ident(src[start..i].to_string()), start));
        } else if "+-*/^()".contains(c) {
            out.push((Tok::Op(c), i));
            i += 1;
        } else {
            return Err(Error::Parse {
                input: src.to_string(),
                pos: i,
                msg: format!("unexpected character `{c}`"),
            });
        }
    }
    Ok(out)
}

struct Parser<'a> {
    src: &'a str,
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, msg: &str) -> Error {
        let at = self.toks.get(self.pos).map(|t| t.1).unwrap_or(self.src.len());
        Error::Parse {
            input: self.src.to_string(),
            pos: at,
            msg: msg.to_string(),
        }
    }

    fn peek_op(&self) -> Option<char> {
        match self.toks.get(self.pos) {
            Some((Tok::Op(c), _)) => Some(*c),
            _ => None,
        }
    }

    fn expect_op(&mut self, c: char) -> Result<()> {
        if self.peek_op() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected `{c}`")))
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(op @ ('+' | '-')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == '+' { add(lhs, rhs) } else { sub(lhs, rhs) };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(op @ ('*' | '/')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if op == '*' { mul(lhs, rhs) } else { div(lhs, rhs) };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        match self.peek_op() {
            Some('-') => {
                self.pos += 1;
                Ok(neg(self.unary()?))
            }
            Some('+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.peek_op() == Some('^') {
            self.pos += 1;
            let at = self.pos;
            let exponent = self.unary()?;
            return match exponent {
                Expr::Const(k) => Ok(pow(base, k)),
                _ => {
                    self.pos = at;
                    Err(self.error("exponent must be a numeric constant"))
                }
            };
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        let Some((tok, _)) = self.toks.get(self.pos).cloned() else {
            return Err(self.error("unexpected end of input"));
        };
        match tok {
            Tok::Num(v) => {
                self.pos += 1;
                Ok(Expr::Const(v))
            }
            Tok::Op('(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect_op(')')?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if let Some(f) = Func::from_name(&name) {
                    self.pos += 1;
                    self.expect_op('(')?;
                    let arg = self.expr()?;
                    self.expect_op(')')?;
                    return Ok(call(f, arg));
                }
                let e = ident(&name).ok_or_else(|| self.error(&format!("unknown identifier `{name}`")))?;
                self.pos += 1;
                Ok(e)
            }
            Tok::Op(c) => Err(self.error(&format!("unexpected `{c}`"))),
        }
    }
}

fn ident(name: &str) -> Option<Expr> {
    Some(match name {
        "x" | "theta" => Expr::Var(0),
        "y" | "phi" => Expr::Var(1),
        "z" => Expr::Var(2),
        "pi" => Expr::Const(std::f64::consts::PI),
        "e" => Expr::Const(std::f64::consts::E),
        _ => {
            if let Some(rest) = name.strip_prefix('x') {
                let k: usize = rest.parse().ok()?;
                if (1..=9).contains(&k) {
                    return Some(Expr::Var(k - 1));
                }
                return None;
            }
            if let Some(rest) = name.strip_prefix('p') {
                let k: usize = rest.parse().ok()?;
                if k < 100 {
                    return Some(Expr::Param(k));
                }
            }
            return None;
        }
    })
}

/// Scalar field with cached exact gradient and Hessian expressions.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothField {
    pub source: String,
    pub expr: Expr,
    pub grad: Vec<Expr>,
    pub hess: Vec<Vec<Expr>>,
}

impl SmoothField {
    pub fn parse(source: &str, dim: usize) -> Result<Self> {
        let expr = Expr::parse(source)?;
        Self::from_expr(source.to_string(), expr, dim)
    }

    pub fn from_expr(source: String, expr: Expr, dim: usize) -> Result<Self> {
        if let Some(v) = expr.max_var() {
            if v >= dim {
                return Err(Error::Config(format!(
                    "expression `{source}` uses coordinate {} but the chart has dimension {dim}",
                    v + 1
                )));
            }
        }
        let grad: Vec<Expr> = (0..dim).map(|i| expr.diff(i)).collect();
        let mut hess = vec![vec![Expr::Const(0.0); dim]; dim];
        for i in 0..dim {
            for j in i..dim {
                let h = grad[i].diff(j);
                hess[j][i] = h.clone();
                hess[i][j] = h;
            }
        }
        Ok(SmoothField {
            source,
            expr,
            grad,
            hess,
        })
    }

    pub fn dim(&self) -> usize {
        self.grad.len()
    }

    pub fn value(&self, x: &[f64], params: &[f64]) -> f64 {
        self.expr.eval(x, params)
    }

    pub fn gradient_into(&self, x: &[f64], params: &[f64], out: &mut [f64]) {
        for (o, g) in out.iter_mut().zip(&self.grad) {
            *o = g.eval(x, params);
        }
    }

    pub fn gradient(&self, x: &[f64], params: &[f64]) -> Vec<f64> {
        self.grad.iter().map(|g| g.eval(x, params)).collect()
    }

    pub fn hessian(&self, x: &[f64], params: &[f64]) -> nalgebra::DMatrix<f64> {
        let n = self.dim();
        nalgebra::DMatrix::from_fn(n, n, |i, j| self.hess[i][j].eval(x, params))
    }
}
