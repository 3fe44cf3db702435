//! Small symbolic expression language used for coefficient fields, state
//! equations and Hamiltonian densities.
//!
//! The node set is deliberately restricted: constants, named variables,
//! `neg/exp/ln/sqrt/abs`, the four arithmetic operations and powers with a
//! constant real exponent. There is no simplification engine beyond constant
//! folding; correctness is by evaluation, not canonical form.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(String),
    Neg(Arc<Expr>),
    Exp(Arc<Expr>),
    Ln(Arc<Expr>),
    Sqrt(Arc<Expr>),
    Abs(Arc<Expr>),
    Add(Arc<Expr>, Arc<Expr>),
    Sub(Arc<Expr>, Arc<Expr>),
    Mul(Arc<Expr>, Arc<Expr>),
    Div(Arc<Expr>, Arc<Expr>),
    /// Power with a constant real exponent, fixed at parse/build time.
    Pow(Arc<Expr>, f64),
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("non-constant exponent at offset {offset}")]
    NonConstantExponent { offset: usize },
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
    #[error("domain error: {op}({arg})")]
    Domain { op: &'static str, arg: f64 },
}

/// Antiderivatives are only available for sums of power terms (exponent
/// != -1) and `exp(k*var)` terms times var-free factors. Everything else
/// signals this error so callers can fall back to numeric quadrature.
#[derive(Debug, Error, PartialEq)]
#[error("unsupported antiderivative with respect to `{var}`")]
pub struct UnsupportedAntiderivative {
    pub var: String,
}

pub fn constant(value: f64) -> Expr {
    Expr::Const(value)
}

pub fn var(name: &str) -> Expr {
    Expr::Var(name.to_string())
}

// Smart constructors with trivial constant folding. `differentiate` relies
// on these to keep derivative trees from filling up with 0*... terms.
pub fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
        (Expr::Const(x), _) if *x == 0.0 => b,
        (_, Expr::Const(y)) if *y == 0.0 => a,
        _ => Expr::Add(Arc::new(a), Arc::new(b)),
    }
}

pub fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
        (_, Expr::Const(y)) if *y == 0.0 => a,
        (Expr::Const(x), _) if *x == 0.0 => neg(b),
        _ => Expr::Sub(Arc::new(a), Arc::new(b)),
    }
}

pub fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
        (Expr::Const(x), _) if *x == 0.0 => Expr::Const(0.0),
        (_, Expr::Const(y)) if *y == 0.0 => Expr::Const(0.0),
        (Expr::Const(x), _) if *x == 1.0 => b,
        (_, Expr::Const(y)) if *y == 1.0 => a,
        _ => Expr::Mul(Arc::new(a), Arc::new(b)),
    }
}

pub fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) if *y != 0.0 => Expr::Const(x / y),
        (Expr::Const(x), _) if *x == 0.0 => Expr::Const(0.0),
        (_, Expr::Const(y)) if *y == 1.0 => a,
        _ => Expr::Div(Arc::new(a), Arc::new(b)),
    }
}

pub fn neg(a: Expr) -> Expr {
    match &a {
        Expr::Const(x) => Expr::Const(-x),
        Expr::Neg(inner) => inner.as_ref().clone(),
        _ => Expr::Neg(Arc::new(a)),
    }
}

pub fn pow(base: Expr, exponent: f64) -> Expr {
    if exponent == 0.0 {
        return Expr::Const(1.0);
    }
    if exponent == 1.0 {
        return base;
    }
    if let Expr::Const(x) = &base {
        return Expr::Const(x.powf(exponent));
    }
    Expr::Pow(Arc::new(base), exponent)
}

pub fn exp(a: Expr) -> Expr {
    if let Expr::Const(x) = &a {
        return Expr::Const(x.exp());
    }
    Expr::Exp(Arc::new(a))
}

pub fn ln(a: Expr) -> Expr {
    Expr::Ln(Arc::new(a))
}

pub fn sqrt(a: Expr) -> Expr {
    if let Expr::Const(x) = &a {
        if *x >= 0.0 {
            return Expr::Const(x.sqrt());
        }
    }
    Expr::Sqrt(Arc::new(a))
}

impl Expr {
    /// Evaluate with a name -> value map.
    pub fn eval_map(&self, bindings: &HashMap<String, f64>) -> Result<f64, EvalError> {
        self.eval_with(&mut |name| bindings.get(name).copied())
    }

    pub fn eval_with(&self, lookup: &mut dyn FnMut(&str) -> Option<f64>) -> Result<f64, EvalError> {
        match self {
            Expr::Const(c) => Ok(*c),
            Expr::Var(name) => lookup(name).ok_or_else(|| EvalError::UnboundVariable(name.clone())),
            Expr::Neg(a) => Ok(-a.eval_with(lookup)?),
            Expr::Exp(a) => Ok(a.eval_with(lookup)?.exp()),
            Expr::Ln(a) => {
                let x = a.eval_with(lookup)?;
                if x <= 0.0 {
                    return Err(EvalError::Domain { op: "ln", arg: x });
                }
                Ok(x.ln())
            }
            Expr::Sqrt(a) => {
                let x = a.eval_with(lookup)?;
                if x < 0.0 {
                    return Err(EvalError::Domain { op: "sqrt", arg: x });
                }
                Ok(x.sqrt())
            }
            Expr::Abs(a) => Ok(a.eval_with(lookup)?.abs()),
            Expr::Add(a, b) => Ok(a.eval_with(lookup)? + b.eval_with(lookup)?),
            Expr::Sub(a, b) => Ok(a.eval_with(lookup)? - b.eval_with(lookup)?),
            Expr::Mul(a, b) => Ok(a.eval_with(lookup)? * b.eval_with(lookup)?),
            Expr::Div(a, b) => {
                let num = a.eval_with(lookup)?;
                let den = b.eval_with(lookup)?;
                if den == 0.0 {
                    return Err(EvalError::Domain { op: "div", arg: den });
                }
                Ok(num / den)
            }
            Expr::Pow(a, p) => {
                let x = a.eval_with(lookup)?;
                let v = x.powf(*p);
                if v.is_nan() {
                    return Err(EvalError::Domain { op: "pow", arg: x });
                }
                Ok(v)
            }
        }
    }

    /// Exact symbolic derivative with respect to `name`, constant-folded
    /// where trivially possible. `abs` differentiates to sign with the
    /// subgradient convention abs'(0) = 0.
    pub fn differentiate(&self, name: &str) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(v) => {
                if v == name {
                    Expr::Const(1.0)
                } else {
                    Expr::Const(0.0)
                }
            }
            Expr::Neg(a) => neg(a.differentiate(name)),
            Expr::Exp(a) => mul(a.differentiate(name), exp(a.as_ref().clone())),
            Expr::Ln(a) => div(a.differentiate(name), a.as_ref().clone()),
            Expr::Sqrt(a) => {
                let da = a.differentiate(name);
                div(
                    da,
                    mul(Expr::Const(2.0), sqrt(a.as_ref().clone())),
                )
            }
            Expr::Abs(a) => {
                // sign(a) * a' via a/abs(a); documented subgradient 0 at 0
                // is enforced at evaluation sites through `eval_signum`.
                let da = a.differentiate(name);
                mul(signum(a.as_ref().clone()), da)
            }
            Expr::Add(a, b) => add(a.differentiate(name), b.differentiate(name)),
            Expr::Sub(a, b) => sub(a.differentiate(name), b.differentiate(name)),
            Expr::Mul(a, b) => add(
                mul(a.differentiate(name), b.as_ref().clone()),
                mul(a.as_ref().clone(), b.differentiate(name)),
            ),
            Expr::Div(a, b) => {
                let num = sub(
                    mul(a.differentiate(name), b.as_ref().clone()),
                    mul(a.as_ref().clone(), b.differentiate(name)),
                );
                div(num, pow(b.as_ref().clone(), 2.0))
            }
            Expr::Pow(a, p) => {
                let da = a.differentiate(name);
                mul(
                    mul(Expr::Const(*p), pow(a.as_ref().clone(), p - 1.0)),
                    da,
                )
            }
        }
    }

    pub fn contains_var(&self, name: &str) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(v) => v == name,
            Expr::Neg(a) | Expr::Exp(a) | Expr::Ln(a) | Expr::Sqrt(a) | Expr::Abs(a) => {
                a.contains_var(name)
            }
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.contains_var(name) || b.contains_var(name)
            }
            Expr::Pow(a, _) => a.contains_var(name),
        }
    }

    pub fn variables(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut Vec<String>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(v) => {
                if !out.iter().any(|x| x == v) {
                    out.push(v.clone());
                }
            }
            Expr::Neg(a) | Expr::Exp(a) | Expr::Ln(a) | Expr::Sqrt(a) | Expr::Abs(a) => {
                a.collect_vars(out)
            }
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Expr::Pow(a, _) => a.collect_vars(out),
        }
    }

    /// Substitute a variable by an expression.
    pub fn substitute(&self, name: &str, replacement: &Expr) -> Expr {
        match self {
            Expr::Const(c) => Expr::Const(*c),
            Expr::Var(v) => {
                if v == name {
                    replacement.clone()
                } else {
                    Expr::Var(v.clone())
                }
            }
            Expr::Neg(a) => neg(a.substitute(name, replacement)),
            Expr::Exp(a) => exp(a.substitute(name, replacement)),
            Expr::Ln(a) => ln(a.substitute(name, replacement)),
            Expr::Sqrt(a) => sqrt(a.substitute(name, replacement)),
            Expr::Abs(a) => Expr::Abs(Arc::new(a.substitute(name, replacement))),
            Expr::Add(a, b) => add(a.substitute(name, replacement), b.substitute(name, replacement)),
            Expr::Sub(a, b) => sub(a.substitute(name, replacement), b.substitute(name, replacement)),
            Expr::Mul(a, b) => mul(a.substitute(name, replacement), b.substitute(name, replacement)),
            Expr::Div(a, b) => div(a.substitute(name, replacement), b.substitute(name, replacement)),
            Expr::Pow(a, p) => pow(a.substitute(name, replacement), *p),
        }
    }

    /// Antiderivative F with dF/dvar = self and F(lower) = 0.
    ///
    /// Supported class: sums/differences of products whose var-dependent part
    /// is a power `var^p` (p != -1 after collecting all factors) or a single
    /// `exp(k*var)`.
    pub fn antiderivative(&self, name: &str, lower: f64) -> Result<Expr, UnsupportedAntiderivative> {
        let raw = self.antiderivative_raw(name)?;
        let at_lower = raw.substitute(name, &Expr::Const(lower));
        Ok(sub(raw, at_lower))
    }

    fn antiderivative_raw(&self, name: &str) -> Result<Expr, UnsupportedAntiderivative> {
        match self {
            Expr::Add(a, b) => Ok(add(a.antiderivative_raw(name)?, b.antiderivative_raw(name)?)),
            Expr::Sub(a, b) => Ok(sub(a.antiderivative_raw(name)?, b.antiderivative_raw(name)?)),
            Expr::Neg(a) => Ok(neg(a.antiderivative_raw(name)?)),
            _ => integrate_term(self, name),
        }
    }

    pub fn compile(&self, vars: &[&str]) -> Result<Compiled, EvalError> {
        let root = compile_node(self, vars)?;
        Ok(Compiled { root })
    }
}

fn signum(a: Expr) -> Expr {
    // a/abs(a) would divide by zero at 0; keep an explicit node-free form.
    div(a.clone(), Expr::Abs(Arc::new(a)))
}

// ---------------------------------------------------------------------------
// term integration
// ---------------------------------------------------------------------------

/// One multiplicative term, factored as coeff * var^power [* exp(k*var)].
struct TermShape {
    coeff: Expr,
    power: f64,
    exp_rate: Option<f64>,
}

fn integrate_term(term: &Expr, name: &str) -> Result<Expr, UnsupportedAntiderivative> {
    let unsupported = || UnsupportedAntiderivative {
        var: name.to_string(),
    };
    if !term.contains_var(name) {
        // constant in var: c -> c*var
        return Ok(mul(term.clone(), var(name)));
    }
    let mut shape = TermShape {
        coeff: Expr::Const(1.0),
        power: 0.0,
        exp_rate: None,
    };
    collect_factors(term, name, false, &mut shape)?;
    match shape.exp_rate {
        None => {
            if shape.power == -1.0 {
                return Err(unsupported());
            }
            let p1 = shape.power + 1.0;
            Ok(mul(div(shape.coeff, Expr::Const(p1)), pow(var(name), p1)))
        }
        Some(k) => {
            if shape.power != 0.0 || k == 0.0 {
                return Err(unsupported());
            }
            Ok(mul(
                div(shape.coeff, Expr::Const(k)),
                exp(mul(Expr::Const(k), var(name))),
            ))
        }
    }
}

fn collect_factors(
    e: &Expr,
    name: &str,
    inverted: bool,
    shape: &mut TermShape,
) -> Result<(), UnsupportedAntiderivative> {
    let unsupported = || UnsupportedAntiderivative {
        var: name.to_string(),
    };
    if !e.contains_var(name) {
        let factor = e.clone();
        shape.coeff = if inverted {
            div(shape.coeff.clone(), factor)
        } else {
            mul(shape.coeff.clone(), factor)
        };
        return Ok(());
    }
    match e {
        Expr::Var(_) => {
            shape.power += if inverted { -1.0 } else { 1.0 };
            Ok(())
        }
        Expr::Pow(base, p) => match base.as_ref() {
            Expr::Var(v) if v == name => {
                shape.power += if inverted { -*p } else { *p };
                Ok(())
            }
            _ => Err(unsupported()),
        },
        Expr::Sqrt(inner) => match inner.as_ref() {
            Expr::Var(v) if v == name => {
                shape.power += if inverted { -0.5 } else { 0.5 };
                Ok(())
            }
            _ => Err(unsupported()),
        },
        Expr::Mul(a, b) => {
            collect_factors(a, name, inverted, shape)?;
            collect_factors(b, name, inverted, shape)
        }
        Expr::Div(a, b) => {
            collect_factors(a, name, inverted, shape)?;
            collect_factors(b, name, !inverted, shape)
        }
        Expr::Neg(a) => {
            shape.coeff = neg(shape.coeff.clone());
            collect_factors(a, name, inverted, shape)
        }
        Expr::Exp(arg) => {
            if inverted || shape.exp_rate.is_some() {
                return Err(unsupported());
            }
            // accepted shapes: exp(k*var), exp(var), exp(var*k)
            let rate = linear_rate(arg, name).ok_or_else(unsupported)?;
            shape.exp_rate = Some(rate);
            Ok(())
        }
        _ => Err(unsupported()),
    }
}

/// Match `k*var`, `var*k`, `var`, `var/k`, `-var`, returning k.
fn linear_rate(e: &Expr, name: &str) -> Option<f64> {
    match e {
        Expr::Var(v) if v == name => Some(1.0),
        Expr::Neg(a) => linear_rate(a, name).map(|k| -k),
        Expr::Mul(a, b) => match (a.as_ref(), b.as_ref()) {
            (Expr::Const(k), rest) => linear_rate(rest, name).map(|r| k * r),
            (rest, Expr::Const(k)) => linear_rate(rest, name).map(|r| k * r),
            _ => None,
        },
        Expr::Div(a, b) => match b.as_ref() {
            Expr::Const(k) if *k != 0.0 => linear_rate(a, name).map(|r| r / k),
            _ => None,
        },
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// compiled form (slot-indexed) for hot loops
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Compiled {
    root: CNode,
}

#[derive(Debug, Clone)]
enum CNode {
    Const(f64),
    Slot(usize),
    Neg(Box<CNode>),
    Exp(Box<CNode>),
    Ln(Box<CNode>),
    Sqrt(Box<CNode>),
    Abs(Box<CNode>),
    Add(Box<CNode>, Box<CNode>),
    Sub(Box<CNode>, Box<CNode>),
    Mul(Box<CNode>, Box<CNode>),
    Div(Box<CNode>, Box<CNode>),
    Pow(Box<CNode>, f64),
}

fn compile_node(e: &Expr, vars: &[&str]) -> Result<CNode, EvalError> {
    Ok(match e {
        Expr::Const(c) => CNode::Const(*c),
        Expr::Var(v) => {
            let slot = vars
                .iter()
                .position(|x| x == v)
                .ok_or_else(|| EvalError::UnboundVariable(v.clone()))?;
            CNode::Slot(slot)
        }
        Expr::Neg(a) => CNode::Neg(Box::new(compile_node(a, vars)?)),
        Expr::Exp(a) => CNode::Exp(Box::new(compile_node(a, vars)?)),
        Expr::Ln(a) => CNode::Ln(Box::new(compile_node(a, vars)?)),
        Expr::Sqrt(a) => CNode::Sqrt(Box::new(compile_node(a, vars)?)),
        Expr::Abs(a) => CNode::Abs(Box::new(compile_node(a, vars)?)),
        Expr::Add(a, b) => CNode::Add(Box::new(compile_node(a, vars)?), Box::new(compile_node(b, vars)?)),
        Expr::Sub(a, b) => CNode::Sub(Box::new(compile_node(a, vars)?), Box::new(compile_node(b, vars)?)),
        Expr::Mul(a, b) => CNode::Mul(Box::new(compile_node(a, vars)?), Box::new(compile_node(b, vars)?)),
        Expr::Div(a, b) => CNode::Div(Box::new(compile_node(a, vars)?), Box::new(compile_node(b, vars)?)),
        Expr::Pow(a, p) => CNode::Pow(Box::new(compile_node(a, vars)?), *p),
    })
}

impl Compiled {
    pub fn eval(&self, values: &[f64]) -> Result<f64, EvalError> {
        eval_cnode(&self.root, values)
    }
}

fn eval_cnode(n: &CNode, values: &[f64]) -> Result<f64, EvalError> {
    Ok(match n {
        CNode::Const(c) => *c,
        CNode::Slot(i) => values[*i],
        CNode::Neg(a) => -eval_cnode(a, values)?,
        CNode::Exp(a) => eval_cnode(a, values)?.exp(),
        CNode::Ln(a) => {
            let x = eval_cnode(a, values)?;
            if x <= 0.0 {
                return Err(EvalError::Domain { op: "ln", arg: x });
            }
            x.ln()
        }
        CNode::Sqrt(a) => {
            let x = eval_cnode(a, values)?;
            if x < 0.0 {
                return Err(EvalError::Domain { op: "sqrt", arg: x });
            }
            x.sqrt()
        }
        CNode::Abs(a) => eval_cnode(a, values)?.abs(),
        CNode::Add(a, b) => eval_cnode(a, values)? + eval_cnode(b, values)?,
        CNode::Sub(a, b) => eval_cnode(a, values)? - eval_cnode(b, values)?,
        CNode::Mul(a, b) => eval_cnode(a, values)? * eval_cnode(b, values)?,
        CNode::Div(a, b) => {
            let den = eval_cnode(b, values)?;
            if den == 0.0 {
                return Err(EvalError::Domain { op: "div", arg: den });
            }
            eval_cnode(a, values)? / den
        }
        CNode::Pow(a, p) => {
            let x = eval_cnode(a, values)?;
            let v = x.powf(*p);
            if v.is_nan() {
                return Err(EvalError::Domain { op: "pow", arg: x });
            }
            v
        }
    })
}

// ---------------------------------------------------------------------------
// parser
// ---------------------------------------------------------------------------

/// Parse `source` over the declared variables. `params` are named constants
/// substituted at parse time, so power exponents may reference them.
pub fn parse(
    source: &str,
    variables: &[&str],
    params: &HashMap<String, f64>,
) -> Result<Expr, ParseError> {
    let tokens = lex(source)?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        variables,
        params,
    };
    let expr = parser.expression()?;
    if parser.pos < parser.tokens.len() {
        let t = &parser.tokens[parser.pos];
        return Err(ParseError::Syntax {
            offset: t.offset,
            message: format!("unexpected `{}`", t.text),
        });
    }
    Ok(expr)
}

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Number(f64),
    Ident,
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    text: String,
    offset: usize,
}

fn lex(source: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = source.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let kind = match c {
            '+' => Some(TokenKind::Plus),
            '-' => Some(TokenKind::Minus),
            '*' => Some(TokenKind::Star),
            '/' => Some(TokenKind::Slash),
            '^' => Some(TokenKind::Caret),
            '(' => Some(TokenKind::LParen),
            ')' => Some(TokenKind::RParen),
            _ => None,
        };
        if let Some(kind) = kind {
            tokens.push(Token {
                kind,
                text: c.to_string(),
                offset: start,
            });
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || c == '.' {
            let mut j = i;
            while j < bytes.len() && ((bytes[j] as char).is_ascii_digit() || bytes[j] == b'.') {
                j += 1;
            }
            // exponent part 1e-3
            if j < bytes.len() && (bytes[j] == b'e' || bytes[j] == b'E') {
                let mut k = j + 1;
                if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                    k += 1;
                }
                if k < bytes.len() && (bytes[k] as char).is_ascii_digit() {
                    while k < bytes.len() && (bytes[k] as char).is_ascii_digit() {
                        k += 1;
                    }
                    j = k;
                }
            }
            let text = &source[i..j];
            let value: f64 = text.parse().map_err(|_| ParseError::Syntax {
                offset: start,
                message: format!("bad number `{text}`"),
            })?;
            tokens.push(Token {
                kind: TokenKind::Number(value),
                text: text.to_string(),
                offset: start,
            });
            i = j;
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let mut j = i;
            while j < bytes.len()
                && ((bytes[j] as char).is_ascii_alphanumeric() || bytes[j] == b'_')
            {
                j += 1;
            }
            tokens.push(Token {
                kind: TokenKind::Ident,
                text: source[i..j].to_string(),
                offset: start,
            });
            i = j;
            continue;
        }
        return Err(ParseError::Syntax {
            offset: start,
            message: format!("unexpected character `{c}`"),
        });
    }
    Ok(tokens)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    variables: &'a [&'a str],
    params: &'a HashMap<String, f64>,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn eof_offset(&self) -> usize {
        self.tokens
            .last()
            .map(|t| t.offset + t.text.len())
            .unwrap_or(0)
    }

    fn expression(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Some(t) = self.peek() {
            let op = t.kind.clone();
            match op {
                TokenKind::Plus => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expr::Add(Arc::new(lhs), Arc::new(rhs));
                }
                TokenKind::Minus => {
                    self.pos += 1;
                    let rhs = self.term()?;
                    lhs = Expr::Sub(Arc::new(lhs), Arc::new(rhs));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(t) = self.peek() {
            let op = t.kind.clone();
            match op {
                TokenKind::Star => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = Expr::Mul(Arc::new(lhs), Arc::new(rhs));
                }
                TokenKind::Slash => {
                    self.pos += 1;
                    let rhs = self.unary()?;
                    lhs = Expr::Div(Arc::new(lhs), Arc::new(rhs));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if let Some(t) = self.peek() {
            if t.kind == TokenKind::Minus {
                self.pos += 1;
                let inner = self.unary()?;
                return Ok(neg(inner));
            }
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let mut base = self.atom()?;
        while let Some(t) = self.peek() {
            if t.kind != TokenKind::Caret {
                break;
            }
            let caret_offset = t.offset;
            self.pos += 1;
            // The exponent is a unary-level expression that must fold to a
            // constant at parse time.
            let exp_expr = self.exponent_operand()?;
            let value = fold_constant(&exp_expr).ok_or(ParseError::NonConstantExponent {
                offset: caret_offset,
            })?;
            base = Expr::Pow(Arc::new(base), value);
        }
        Ok(base)
    }

    /// Operand of `^`: either a parenthesized expression or a signed atom.
    fn exponent_operand(&mut self) -> Result<Expr, ParseError> {
        if let Some(t) = self.peek() {
            if t.kind == TokenKind::Minus {
                self.pos += 1;
                let inner = self.exponent_operand()?;
                return Ok(neg(inner));
            }
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let Some(t) = self.peek().cloned() else {
            return Err(ParseError::Syntax {
                offset: self.eof_offset(),
                message: "unexpected end of input".to_string(),
            });
        };
        match t.kind {
            TokenKind::Number(v) => {
                self.pos += 1;
                Ok(Expr::Const(v))
            }
            TokenKind::LParen => {
                self.pos += 1;
                let inner = self.expression()?;
                self.expect_rparen()?;
                Ok(inner)
            }
            TokenKind::Ident => {
                self.pos += 1;
                let name = t.text.as_str();
                let is_call = matches!(
                    self.peek(),
                    Some(Token {
                        kind: TokenKind::LParen,
                        ..
                    })
                );
                if is_call && matches!(name, "exp" | "ln" | "sqrt" | "abs") {
                    self.pos += 1; // consume (
                    let arg = self.expression()?;
                    self.expect_rparen()?;
                    return Ok(match name {
                        "exp" => Expr::Exp(Arc::new(arg)),
                        "ln" => Expr::Ln(Arc::new(arg)),
                        "sqrt" => Expr::Sqrt(Arc::new(arg)),
                        _ => Expr::Abs(Arc::new(arg)),
                    });
                }
                if let Some(value) = self.params.get(name) {
                    return Ok(Expr::Const(*value));
                }
                if self.variables.iter().any(|v| *v == name) {
                    return Ok(Expr::Var(name.to_string()));
                }
                Err(ParseError::UnknownIdentifier {
                    name: name.to_string(),
                    offset: t.offset,
                })
            }
            _ => Err(ParseError::Syntax {
                offset: t.offset,
                message: format!("unexpected `{}`", t.text),
            }),
        }
    }

    fn expect_rparen(&mut self) -> Result<(), ParseError> {
        match self.peek() {
            Some(t) if t.kind == TokenKind::RParen => {
                self.pos += 1;
                Ok(())
            }
            Some(t) => Err(ParseError::Syntax {
                offset: t.offset,
                message: format!("expected `)`, found `{}`", t.text),
            }),
            None => Err(ParseError::Syntax {
                offset: self.eof_offset(),
                message: "expected `)`".to_string(),
            }),
        }
    }
}

fn fold_constant(e: &Expr) -> Option<f64> {
    e.eval_with(&mut |_| None).ok()
}

// ---------------------------------------------------------------------------
// printer (emits parseable text)
// ---------------------------------------------------------------------------

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(self, f, 0)
    }
}

// precedence levels: 0 add/sub, 1 mul/div, 2 unary, 3 pow/atom
fn write_expr(e: &Expr, f: &mut fmt::Formatter<'_>, parent: u8) -> fmt::Result {
    let prec = match e {
        Expr::Add(..) | Expr::Sub(..) => 0,
        Expr::Mul(..) | Expr::Div(..) => 1,
        Expr::Neg(..) => 2,
        _ => 3,
    };
    let needs_paren = prec < parent;
    if needs_paren {
        write!(f, "(")?;
    }
    match e {
        Expr::Const(c) => {
            if *c < 0.0 || (*c == 0.0 && c.is_sign_negative()) {
                write!(f, "({c})")?;
            } else {
                write!(f, "{c}")?;
            }
        }
        Expr::Var(v) => write!(f, "{v}")?,
        Expr::Neg(a) => {
            write!(f, "-")?;
            write_expr(a, f, 3)?;
        }
        Expr::Exp(a) => {
            write!(f, "exp(")?;
            write_expr(a, f, 0)?;
            write!(f, ")")?;
        }
        Expr::Ln(a) => {
            write!(f, "ln(")?;
            write_expr(a, f, 0)?;
            write!(f, ")")?;
        }
        Expr::Sqrt(a) => {
            write!(f, "sqrt(")?;
            write_expr(a, f, 0)?;
            write!(f, ")")?;
        }
        Expr::Abs(a) => {
            write!(f, "abs(")?;
            write_expr(a, f, 0)?;
            write!(f, ")")?;
        }
        Expr::Add(a, b) => {
            write_expr(a, f, 0)?;
            write!(f, " + ")?;
            write_expr(b, f, 1)?;
        }
        Expr::Sub(a, b) => {
            write_expr(a, f, 0)?;
            write!(f, " - ")?;
            write_expr(b, f, 1)?;
        }
        Expr::Mul(a, b) => {
            write_expr(a, f, 1)?;
            write!(f, "*")?;
            write_expr(b, f, 2)?;
        }
        Expr::Div(a, b) => {
            write_expr(a, f, 1)?;
            write!(f, "/")?;
            write_expr(b, f, 2)?;
        }
        Expr::Pow(a, p) => {
            write_expr(a, f, 3)?;
            if *p < 0.0 || p.fract() != 0.0 {
                write!(f, "^({p})")?;
            } else {
                write!(f, "^{p}")?;
            }
        }
    }
    if needs_paren {
        write!(f, ")")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(src: &str, vars: &[&str]) -> Expr {
        parse(src, vars, &HashMap::new()).unwrap()
    }

    fn eval1(e: &Expr, bindings: &[(&str, f64)]) -> f64 {
        let map: HashMap<String, f64> = bindings
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        e.eval_map(&map).unwrap()
    }

    #[test]
    fn linear_arithmetic() {
        let e = p("u1 + 2*u2", &["u1", "u2"]);
        assert_eq!(eval1(&e, &[("u1", 1.0), ("u2", 3.0)]), 7.0);
    }

    #[test]
    fn sqrt_power_hand_value() {
        let e = p("sqrt(2)*rho^(-1/2)", &["rho"]);
        let v = eval1(&e, &[("rho", 2.0)]);
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn syntax_error_offset() {
        let err = parse("u1*(", &["u1"], &HashMap::new()).unwrap_err();
        match err {
            ParseError::Syntax { offset, .. } => assert_eq!(offset, 4),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_identifier() {
        let err = parse("u1 + w", &["u1"], &HashMap::new()).unwrap_err();
        match err {
            ParseError::UnknownIdentifier { name, offset } => {
                assert_eq!(name, "w");
                assert_eq!(offset, 5);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nonconstant_exponent_rejected() {
        let err = parse("u1^u1", &["u1"], &HashMap::new()).unwrap_err();
        assert!(matches!(err, ParseError::NonConstantExponent { .. }));
    }

    #[test]
    fn params_fold_into_exponents() {
        let mut params = HashMap::new();
        params.insert("g".to_string(), 2.0);
        params.insert("a".to_string(), 1.0);
        let e = parse("a*sqrt(g)*rho^((g-3)/2)", &["rho"], &params).unwrap();
        // at rho = 1: sqrt(2)
        let v = eval1(&e, &[("rho", 1.0)]);
        assert!((v - 2.0_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn polytropic_alpha_derivative() {
        // d/drho of sqrt(2)*rho^(-1/2) at rho=1 is -sqrt(2)/2
        let mut params = HashMap::new();
        params.insert("g".to_string(), 2.0);
        params.insert("a".to_string(), 1.0);
        let e = parse("a*sqrt(g)*rho^((g-3)/2)", &["rho"], &params).unwrap();
        let d = e.differentiate("rho");
        let v = eval1(&d, &[("rho", 1.0)]);
        assert!((v - (-0.7071067811865476)).abs() < 1e-12, "{v}");
    }

    #[test]
    fn derivative_of_constant_and_power() {
        let e = p("5", &["u"]);
        assert_eq!(e.differentiate("u"), Expr::Const(0.0));
        let e = p("u^2", &["u"]);
        let d = e.differentiate("u");
        assert_eq!(eval1(&d, &[("u", 3.0)]), 6.0);
    }

    #[test]
    fn precedence_pow_over_unary_minus() {
        // -x^2 parses as -(x^2)
        let e = p("-u^2", &["u"]);
        assert_eq!(eval1(&e, &[("u", 3.0)]), -9.0);
    }

    #[test]
    fn antiderivative_of_one() {
        let e = p("1", &["u"]);
        let f = e.antiderivative("u", 0.0).unwrap();
        assert_eq!(eval1(&f, &[("u", 4.0)]), 4.0);
    }

    #[test]
    fn antiderivative_inverse_square_from_one() {
        // int_1^rho 2/sigma^2 dsigma = 2(1 - 1/rho)
        let e = p("2/rho^2", &["rho"]);
        let f = e.antiderivative("rho", 1.0).unwrap();
        let v = eval1(&f, &[("rho", 4.0)]);
        assert!((v - 2.0 * (1.0 - 0.25)).abs() < 1e-14);
    }

    #[test]
    fn antiderivative_chaplygin_quartic() {
        // int_1^rho 2 sigma^-4 dsigma = 2(1 - rho^-3)/3
        let e = p("2*rho^(-4)", &["rho"]);
        let f = e.antiderivative("rho", 1.0).unwrap();
        let v = eval1(&f, &[("rho", 2.0)]);
        assert!((v - 2.0 * (1.0 - 2.0_f64.powi(-3)) / 3.0).abs() < 1e-14);
    }

    #[test]
    fn antiderivative_rejects_log() {
        let e = p("ln(u)", &["u"]);
        assert!(e.antiderivative("u", 0.0).is_err());
    }

    #[test]
    fn antiderivative_exp_term() {
        let e = p("3*exp(2*u)", &["u"]);
        let f = e.antiderivative("u", 0.0).unwrap();
        let expect = 1.5 * ((2.0_f64 * 0.7).exp() - 1.0);
        assert!((eval1(&f, &[("u", 0.7)]) - expect).abs() < 1e-12);
    }

    #[test]
    fn derivative_of_antiderivative_is_identity() {
        let e = p("2*u^3 + u - 4 + 0.5*u^(-2)", &["u"]);
        let f = e.antiderivative("u", 1.0).unwrap();
        let d = f.differentiate("u");
        for x in [0.5, 1.0, 2.0, 3.7] {
            let lhs = eval1(&d, &[("u", x)]);
            let rhs = eval1(&e, &[("u", x)]);
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn print_parse_round_trip() {
        let exprs = [
            "u1 + 2*u2",
            "sqrt(2)*rho^(-1/2)",
            "-(u1 - u2)/(u1 + u2)",
            "exp(-u1)*ln(u2) - abs(u1*u2)",
            "u1^3/(1 + u2^2)",
        ];
        for src in exprs {
            let e = p(src, &["u1", "u2", "rho"]);
            let printed = format!("{e}");
            let reparsed = p(&printed, &["u1", "u2", "rho"]);
            let reprinted = format!("{reparsed}");
            assert_eq!(printed, reprinted, "round trip for `{src}`");
            for (a, b) in [(1.3, 0.4), (0.2, 2.0), (3.0, 1.5)] {
                let v1 = eval1(&e, &[("u1", a), ("u2", b), ("rho", a + b)]);
                let v2 = eval1(&reparsed, &[("u1", a), ("u2", b), ("rho", a + b)]);
                assert_eq!(v1.to_bits(), v2.to_bits());
            }
        }
    }

    #[test]
    fn compiled_matches_map_eval() {
        let e = p("exp(u1)*u2 - u1/u2 + u2^(1/3)", &["u1", "u2"]);
        let c = e.compile(&["u1", "u2"]).unwrap();
        let v1 = eval1(&e, &[("u1", 0.3), ("u2", 1.7)]);
        let v2 = c.eval(&[0.3, 1.7]).unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
    }
}
