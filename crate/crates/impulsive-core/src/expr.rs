//! Symbolic scalar expressions over a fixed list of named variables.
//!
//! Expressions are immutable trees built from constants, variables, the
//! arithmetic operators `+ - * /`, integer powers `^`, unary negation and
//! the functions `sin cos exp log abs`. They support evaluation, exact
//! symbolic differentiation and printing; the printed form parses back to
//! an expression with identical values.
//!
//! `abs` is differentiated as the sign function, written as `u / abs(u)` so
//! that no extra node kind is needed; evaluating the derivative at a point
//! where `u == 0` therefore reports a division-by-zero domain error, which
//! matches the true non-differentiability of `abs` at the origin.

use std::fmt;

use thiserror::Error;

/// Error produced while parsing an expression source string.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    /// Malformed syntax at a byte offset of the source string.
    #[error("syntax error at offset {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    /// An identifier that is neither a declared variable nor a function.
    #[error("unknown variable `{name}` at offset {pos}")]
    UnknownVariable { pos: usize, name: String },
}

/// Error produced while evaluating an expression.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    /// A quotient or negative power whose denominator evaluates to zero.
    /// Carries the printed offending subexpression.
    #[error("division by zero in `{0}`")]
    DivisionByZero(String),
    /// `log` applied to a nonpositive argument. Carries the printed
    /// offending subexpression and the argument value.
    #[error("log of nonpositive value {1} in `{0}`")]
    LogDomain(String, f64),
    /// The environment slice has fewer entries than the largest variable
    /// index appearing in the expression.
    #[error("environment has {got} values but variable index {index} occurs")]
    EnvTooShort { index: usize, got: usize },
}

/// An immutable expression tree.
///
/// Variables are stored by index into the list of names supplied to
/// [`Expr::parse`], together with the name itself for printing.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var { index: usize, name: String },
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    /// Integer power. `0^0` evaluates to `1`; a negative exponent with zero
    /// base is a division-by-zero domain error.
    Pow(Box<Expr>, i32),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
    Log(Box<Expr>),
    Abs(Box<Expr>),
}

impl Expr {
    /// Parses `source` over the declared variable names `vars`.
    ///
    /// Grammar, loosest to tightest binding: `+ -`, then `* /` (all four
    /// left-associative), then unary minus, then `^` with a literal integer
    /// exponent, then atoms (numbers, variables, function calls,
    /// parenthesized expressions).
    pub fn parse(source: &str, vars: &[&str]) -> Result<Expr, ParseError> {
        let mut p = Parser {
            src: source.as_bytes(),
            pos: 0,
            vars,
        };
        p.skip_ws();
        let e = p.parse_sum()?;
        p.skip_ws();
        if p.pos < p.src.len() {
            return Err(ParseError::Syntax {
                pos: p.pos,
                msg: format!("unexpected `{}`", p.src[p.pos] as char),
            });
        }
        Ok(e)
    }

    /// Builds a constant.
    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    /// Builds a variable node.
    pub fn var(index: usize, name: &str) -> Expr {
        Expr::Var {
            index,
            name: name.to_string(),
        }
    }

    /// Evaluates the expression with `env[i]` as the value of variable `i`.
    pub fn eval(&self, env: &[f64]) -> Result<f64, EvalError> {
        match self {
            Expr::Const(c) => Ok(*c),
            Expr::Var { index, .. } => env.get(*index).copied().ok_or(EvalError::EnvTooShort {
                index: *index,
                got: env.len(),
            }),
            Expr::Neg(a) => Ok(-a.eval(env)?),
            Expr::Add(a, b) => Ok(a.eval(env)? + b.eval(env)?),
            Expr::Sub(a, b) => Ok(a.eval(env)? - b.eval(env)?),
            Expr::Mul(a, b) => Ok(a.eval(env)? * b.eval(env)?),
            Expr::Div(a, b) => {
                let d = b.eval(env)?;
                if d == 0.0 {
                    return Err(EvalError::DivisionByZero(self.to_string()));
                }
                Ok(a.eval(env)? / d)
            }
            Expr::Pow(a, k) => {
                let base = a.eval(env)?;
                if base == 0.0 && *k < 0 {
                    return Err(EvalError::DivisionByZero(self.to_string()));
                }
                Ok(base.powi(*k))
            }
            Expr::Sin(a) => Ok(a.eval(env)?.sin()),
            Expr::Cos(a) => Ok(a.eval(env)?.cos()),
            Expr::Exp(a) => Ok(a.eval(env)?.exp()),
            Expr::Log(a) => {
                let v = a.eval(env)?;
                if v <= 0.0 {
                    return Err(EvalError::LogDomain(self.to_string(), v));
                }
                Ok(v.ln())
            }
            Expr::Abs(a) => Ok(a.eval(env)?.abs()),
        }
    }

    /// Exact symbolic partial derivative with respect to variable `var`.
    ///
    /// Applies the usual calculus rules and folds constant subexpressions;
    /// no other rewriting is performed. `abs(u)` differentiates to
    /// `(u / abs(u)) * u'`.
    pub fn differentiate(&self, var: usize) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var { index, .. } => {
                Expr::Const(if *index == var { 1.0 } else { 0.0 })
            }
            Expr::Neg(a) => neg(a.differentiate(var)),
            Expr::Add(a, b) => add(a.differentiate(var), b.differentiate(var)),
            Expr::Sub(a, b) => sub(a.differentiate(var), b.differentiate(var)),
            Expr::Mul(a, b) => add(
                mul(a.differentiate(var), (**b).clone()),
                mul((**a).clone(), b.differentiate(var)),
            ),
            Expr::Div(a, b) => div(
                sub(
                    mul(a.differentiate(var), (**b).clone()),
                    mul((**a).clone(), b.differentiate(var)),
                ),
                pow((**b).clone(), 2),
            ),
            Expr::Pow(a, k) => mul(
                mul(Expr::Const(*k as f64), pow((**a).clone(), *k - 1)),
                a.differentiate(var),
            ),
            Expr::Sin(a) => mul(cos((**a).clone()), a.differentiate(var)),
            Expr::Cos(a) => neg(mul(sin((**a).clone()), a.differentiate(var))),
            Expr::Exp(a) => mul(exp((**a).clone()), a.differentiate(var)),
            Expr::Log(a) => div(a.differentiate(var), (**a).clone()),
            Expr::Abs(a) => mul(
                div((**a).clone(), abs((**a).clone())),
                a.differentiate(var),
            ),
        }
    }

    /// True if the expression is the literal constant `c`.
    pub fn is_const(&self, c: f64) -> bool {
        matches!(self, Expr::Const(v) if *v == c)
    }

    /// Largest variable index occurring in the tree, if any.
    pub fn max_var_index(&self) -> Option<usize> {
        match self {
            Expr::Const(_) => None,
            Expr::Var { index, .. } => Some(*index),
            Expr::Neg(a)
            | Expr::Pow(a, _)
            | Expr::Sin(a)
            | Expr::Cos(a)
            | Expr::Exp(a)
            | Expr::Log(a)
            | Expr::Abs(a) => a.max_var_index(),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                match (a.max_var_index(), b.max_var_index()) {
                    (Some(x), Some(y)) => Some(x.max(y)),
                    (x, y) => x.or(y),
                }
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(..) => 3,
            Expr::Pow(..) => 4,
            _ => 5,
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, parent: u8, right: bool) -> fmt::Result {
        let prec = self.precedence();
        // Right operands of - and / need parens at equal precedence because
        // the printed form re-parses left-associatively.
        let need = prec < parent || (prec == parent && right);
        if need {
            write!(f, "(")?;
        }
        match self {
            Expr::Const(c) => {
                if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) {
                    write!(f, "({})", fmt_f64(*c))?;
                } else {
                    write!(f, "{}", fmt_f64(*c))?;
                }
            }
            Expr::Var { name, .. } => write!(f, "{name}")?,
            Expr::Neg(a) => {
                write!(f, "-")?;
                a.fmt_prec(f, 3, true)?;
            }
            Expr::Add(a, b) => {
                a.fmt_prec(f, 1, false)?;
                write!(f, " + ")?;
                b.fmt_prec(f, 1, false)?;
            }
            Expr::Sub(a, b) => {
                a.fmt_prec(f, 1, false)?;
                write!(f, " - ")?;
                b.fmt_prec(f, 1, true)?;
            }
            Expr::Mul(a, b) => {
                a.fmt_prec(f, 2, false)?;
                write!(f, " * ")?;
                b.fmt_prec(f, 2, false)?;
            }
            Expr::Div(a, b) => {
                a.fmt_prec(f, 2, false)?;
                write!(f, " / ")?;
                b.fmt_prec(f, 2, true)?;
            }
            Expr::Pow(a, k) => {
                a.fmt_prec(f, 5, false)?;
                if *k < 0 {
                    write!(f, "^({k})")?;
                } else {
                    write!(f, "^{k}")?;
                }
            }
            Expr::Sin(a) => write!(f, "sin({a})")?,
            Expr::Cos(a) => write!(f, "cos({a})")?,
            Expr::Exp(a) => write!(f, "exp({a})")?,
            Expr::Log(a) => write!(f, "log({a})")?,
            Expr::Abs(a) => write!(f, "abs({a})")?,
        }
        if need {
            write!(f, ")")?;
        }
        Ok(())
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0, false)
    }
}

fn fmt_f64(c: f64) -> String {
    if c == c.trunc() && c.abs() < 1e15 {
        format!("{c:.1}")
    } else {
        // 17 significant digits round-trip every f64 exactly.
        format!("{c:.17e}")
    }
}

// Folding constructors. They fold operations whose operands are constants
// and eliminate trivial identities with the literal constants 0 and 1, so
// derivative trees stay reasonably small. `0 * e` is only dropped for the
// literal constant produced by differentiation, which is safe because `e`
// is a subtree of the original expression and evaluated elsewhere anyway.

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(c) => Expr::Const(-c),
        Expr::Neg(inner) => *inner,
        a => Expr::Neg(Box::new(a)),
    }
}

fn add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
        (a, b) if a.is_const(0.0) => b,
        (a, b) if b.is_const(0.0) => a,
        (a, b) => Expr::Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
        (a, b) if b.is_const(0.0) => a,
        (a, b) if a.is_const(0.0) => neg(b),
        (a, b) => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
        (a, _) | (_, a) if a.is_const(0.0) => Expr::Const(0.0),
        (a, b) if a.is_const(1.0) => b,
        (a, b) if b.is_const(1.0) => a,
        (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) if y != 0.0 => Expr::Const(x / y),
        (a, b) if b.is_const(1.0) => a,
        (a, b) if a.is_const(0.0) && !b.is_const(0.0) => Expr::Const(0.0),
        (a, b) => Expr::Div(Box::new(a), Box::new(b)),
    }
}

fn pow(a: Expr, k: i32) -> Expr {
    match (a, k) {
        (_, 0) => Expr::Const(1.0),
        (a, 1) => a,
        (Expr::Const(c), k) if !(c == 0.0 && k < 0) => Expr::Const(c.powi(k)),
        (a, k) => Expr::Pow(Box::new(a), k),
    }
}

fn sin(a: Expr) -> Expr {
    match a {
        Expr::Const(c) => Expr::Const(c.sin()),
        a => Expr::Sin(Box::new(a)),
    }
}

fn cos(a: Expr) -> Expr {
    match a {
        Expr::Const(c) => Expr::Const(c.cos()),
        a => Expr::Cos(Box::new(a)),
    }
}

fn exp(a: Expr) -> Expr {
    match a {
        Expr::Const(c) => Expr::Const(c.exp()),
        a => Expr::Exp(Box::new(a)),
    }
}

fn abs(a: Expr) -> Expr {
    match a {
        Expr::Const(c) => Expr::Const(c.abs()),
        a => Expr::Abs(Box::new(a)),
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    vars: &'a [&'a str],
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn parse_sum(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.parse_term()?;
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    acc = add(acc, self.parse_term()?);
                }
                Some(b'-') => {
                    self.pos += 1;
                    acc = sub(acc, self.parse_term()?);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn parse_term(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.parse_factor()?;
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    acc = mul(acc, self.parse_factor()?);
                }
                Some(b'/') => {
                    self.pos += 1;
                    acc = div(acc, self.parse_factor()?);
                }
                _ => return Ok(acc),
            }
        }
    }

    fn parse_factor(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(neg(self.parse_factor()?));
        }
        self.parse_power()
    }

    fn parse_power(&mut self) -> Result<Expr, ParseError> {
        let mut acc = self.parse_atom()?;
        loop {
            self.skip_ws();
            if self.peek() != Some(b'^') {
                return Ok(acc);
            }
            self.pos += 1;
            let k = self.parse_int_exponent()?;
            acc = pow(acc, k);
        }
    }

    fn parse_int_exponent(&mut self) -> Result<i32, ParseError> {
        self.skip_ws();
        let start = self.pos;
        let mut parens = false;
        if self.peek() == Some(b'(') {
            parens = true;
            self.pos += 1;
            self.skip_ws();
        }
        let mut sign = 1i64;
        if self.peek() == Some(b'-') {
            sign = -1;
            self.pos += 1;
        }
        let digits_start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == digits_start {
            return Err(ParseError::Syntax {
                pos: start,
                msg: "integer exponent expected after `^`".to_string(),
            });
        }
        if self.peek() == Some(b'.') {
            return Err(ParseError::Syntax {
                pos: self.pos,
                msg: "exponent must be an integer".to_string(),
            });
        }
        let text = std::str::from_utf8(&self.src[digits_start..self.pos]).unwrap();
        let value: i64 = text.parse().map_err(|_| ParseError::Syntax {
            pos: start,
            msg: "exponent out of range".to_string(),
        })?;
        if parens {
            self.skip_ws();
            if self.peek() != Some(b')') {
                return Err(ParseError::Syntax {
                    pos: self.pos,
                    msg: "expected `)` closing exponent".to_string(),
                });
            }
            self.pos += 1;
        }
        let value = sign * value;
        i32::try_from(value).map_err(|_| ParseError::Syntax {
            pos: start,
            msg: "exponent out of range".to_string(),
        })
    }

    fn parse_atom(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        match self.peek() {
            None => Err(ParseError::Syntax {
                pos: self.pos,
                msg: "unexpected end of input".to_string(),
            }),
            Some(b'(') => {
                self.pos += 1;
                let e = self.parse_sum()?;
                self.skip_ws();
                if self.peek() != Some(b')') {
                    return Err(ParseError::Syntax {
                        pos: self.pos,
                        msg: "expected `)`".to_string(),
                    });
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() => self.parse_number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.parse_ident(),
            Some(c) => Err(ParseError::Syntax {
                pos: self.pos,
                msg: format!("unexpected `{}`", c as char),
            }),
        }
    }

    fn parse_number(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.peek() == Some(b'.') {
            self.pos += 1;
            while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                self.pos += 1;
            }
        }
        if matches!(self.peek(), Some(b'e' | b'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.peek(), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                    self.pos += 1;
                }
            } else {
                // Not an exponent suffix; leave `e...` for the caller, it
                // will fail as an unexpected token with a clear position.
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let value: f64 = text.parse().map_err(|_| ParseError::Syntax {
            pos: start,
            msg: format!("malformed number `{text}`"),
        })?;
        Ok(Expr::Const(value))
    }

    fn parse_ident(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == b'_') {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        self.skip_ws();
        if self.peek() == Some(b'(') {
            let builder: fn(Expr) -> Expr = match name {
                "sin" => sin,
                "cos" => cos,
                "exp" => exp,
                "log" => |a| match a {
                    Expr::Const(c) if c > 0.0 => Expr::Const(c.ln()),
                    a => Expr::Log(Box::new(a)),
                },
                "abs" => abs,
                _ => {
                    return Err(ParseError::Syntax {
                        pos: start,
                        msg: format!("unknown function `{name}`"),
                    })
                }
            };
            self.pos += 1;
            let arg = self.parse_sum()?;
            self.skip_ws();
            if self.peek() != Some(b')') {
                return Err(ParseError::Syntax {
                    pos: self.pos,
                    msg: "expected `)` closing function argument".to_string(),
                });
            }
            self.pos += 1;
            return Ok(builder(arg));
        }
        match self.vars.iter().position(|v| *v == name) {
            Some(index) => Ok(Expr::var(index, name)),
            None => Err(ParseError::UnknownVariable {
                pos: start,
                name: name.to_string(),
            }),
        }
    }
}

/// A flattened form of [`Expr`] for fast repeated evaluation.
///
/// Instructions operate on a value stack; evaluation performs no
/// allocation. Domain errors are detected exactly as in [`Expr::eval`] and
/// rendered from the original tree only when they occur.
#[derive(Debug, Clone)]
pub struct Compiled {
    code: Vec<Instr>,
    stack_depth: usize,
    source: Expr,
}

#[derive(Debug, Clone, Copy)]
enum Instr {
    Const(f64),
    Var(usize),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Pow(i32),
    Sin,
    Cos,
    Exp,
    Log,
    Abs,
}

impl Compiled {
    /// Compiles an expression tree.
    pub fn new(expr: &Expr) -> Compiled {
        let mut code = Vec::new();
        let mut depth = 0usize;
        let mut max_depth = 0usize;
        fn walk(e: &Expr, code: &mut Vec<Instr>, depth: &mut usize, max: &mut usize) {
            match e {
                Expr::Const(c) => {
                    code.push(Instr::Const(*c));
                    *depth += 1;
                }
                Expr::Var { index, .. } => {
                    code.push(Instr::Var(*index));
                    *depth += 1;
                }
                Expr::Neg(a) => {
                    walk(a, code, depth, max);
                    code.push(Instr::Neg);
                }
                Expr::Add(a, b) => {
                    walk(a, code, depth, max);
                    walk(b, code, depth, max);
                    code.push(Instr::Add);
                    *depth -= 1;
                }
                Expr::Sub(a, b) => {
                    walk(a, code, depth, max);
                    walk(b, code, depth, max);
                    code.push(Instr::Sub);
                    *depth -= 1;
                }
                Expr::Mul(a, b) => {
                    walk(a, code, depth, max);
                    walk(b, code, depth, max);
                    code.push(Instr::Mul);
                    *depth -= 1;
                }
                Expr::Div(a, b) => {
                    walk(a, code, depth, max);
                    walk(b, code, depth, max);
                    code.push(Instr::Div);
                    *depth -= 1;
                }
                Expr::Pow(a, k) => {
                    walk(a, code, depth, max);
                    code.push(Instr::Pow(*k));
                }
                Expr::Sin(a) => {
                    walk(a, code, depth, max);
                    code.push(Instr::Sin);
                }
                Expr::Cos(a) => {
                    walk(a, code, depth, max);
                    code.push(Instr::Cos);
                }
                Expr::Exp(a) => {
                    walk(a, code, depth, max);
                    code.push(Instr::Exp);
                }
                Expr::Log(a) => {
                    walk(a, code, depth, max);
                    code.push(Instr::Log);
                }
                Expr::Abs(a) => {
                    walk(a, code, depth, max);
                    code.push(Instr::Abs);
                }
            }
            *max = (*max).max(*depth);
        }
        walk(expr, &mut code, &mut depth, &mut max_depth);
        Compiled {
            code,
            stack_depth: max_depth,
            source: expr.clone(),
        }
    }

    /// Evaluates using `stack` as scratch space; the slice must hold at
    /// least [`Compiled::stack_depth`] values.
    pub fn eval_with(&self, env: &[f64], stack: &mut [f64]) -> Result<f64, EvalError> {
        let mut top = 0usize;
        for instr in &self.code {
            match instr {
                Instr::Const(c) => {
                    stack[top] = *c;
                    top += 1;
                }
                Instr::Var(i) => {
                    stack[top] = *env.get(*i).ok_or(EvalError::EnvTooShort {
                        index: *i,
                        got: env.len(),
                    })?;
                    top += 1;
                }
                Instr::Neg => stack[top - 1] = -stack[top - 1],
                Instr::Add => {
                    top -= 1;
                    stack[top - 1] += stack[top];
                }
                Instr::Sub => {
                    top -= 1;
                    stack[top - 1] -= stack[top];
                }
                Instr::Mul => {
                    top -= 1;
                    stack[top - 1] *= stack[top];
                }
                Instr::Div => {
                    top -= 1;
                    if stack[top] == 0.0 {
                        return self.source.eval(env);
                    }
                    stack[top - 1] /= stack[top];
                }
                Instr::Pow(k) => {
                    if stack[top - 1] == 0.0 && *k < 0 {
                        return self.source.eval(env);
                    }
                    stack[top - 1] = stack[top - 1].powi(*k);
                }
                Instr::Sin => stack[top - 1] = stack[top - 1].sin(),
                Instr::Cos => stack[top - 1] = stack[top - 1].cos(),
                Instr::Exp => stack[top - 1] = stack[top - 1].exp(),
                Instr::Log => {
                    if stack[top - 1] <= 0.0 {
                        return self.source.eval(env);
                    }
                    stack[top - 1] = stack[top - 1].ln();
                }
                Instr::Abs => stack[top - 1] = stack[top - 1].abs(),
            }
        }
        Ok(stack[top - 1])
    }

    /// Evaluates with a freshly allocated stack.
    pub fn eval(&self, env: &[f64]) -> Result<f64, EvalError> {
        let mut stack = vec![0.0; self.stack_depth];
        self.eval_with(env, &mut stack)
    }

    /// Number of stack slots required by [`Compiled::eval_with`].
    pub fn stack_depth(&self) -> usize {
        self.stack_depth
    }

    /// The expression this program was compiled from.
    pub fn source(&self) -> &Expr {
        &self.source
    }
}
