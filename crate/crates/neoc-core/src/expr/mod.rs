//! Scalar math expressions in named variables: parsing, evaluation, symbolic
//! differentiation, and simplification.
//!
//! This is how dynamics `f`, `g` and cost integrands `m` are written in
//! problem files, and how the toolkit obtains their parameter derivatives and
//! origin linearizations. Trees are immutable; every operation returns a new
//! tree.
//!
//! Grammar notes: `^` is power with a constant (integer or real) exponent and
//! binds tightest, then unary minus, then `*` `/`, then `+` `-`. Unary minus
//! applies to a whole product, so `-a*x` parses as `-(a*x)`. Chained powers
//! need parentheses (`(x^2)^3`).

mod compile;
mod parse;

pub use compile::CompiledExpr;
pub use parse::parse;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Exp,
    Sqrt,
    Abs,
    Sgn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

/// Expression tree. `Pow` right operands are always `Const` (the parser folds
/// them and the constructors below keep it that way).
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(String),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Error)]
pub enum ExprError {
    #[error("syntax error at offset {offset}: {msg}")]
    Syntax { offset: usize, msg: String },
    #[error("unknown function '{name}' at offset {offset}")]
    UnknownFunction { name: String, offset: usize },
    #[error("unbound variable '{name}'")]
    Unbound { name: String },
    #[error("domain error in '{subexpr}': {msg}")]
    Domain { subexpr: String, msg: String },
}

/// Result of `Expr::diff`. `nonsmooth` flags that an `abs` or `sgn` node was
/// differentiated, so the tree is only valid almost everywhere (the kink gets
/// the zero derivative). Consumers decide whether that matters.
#[derive(Debug, Clone)]
pub struct Derivative {
    pub expr: Expr,
    pub nonsmooth: bool,
}

/// Sign with `sgn(0) = 0`, unlike `f64::signum`.
pub(crate) fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn as_int_exponent(c: f64) -> Option<i32> {
    if c.fract() == 0.0 && c.abs() <= i32::MAX as f64 {
        Some(c as i32)
    } else {
        None
    }
}

impl Expr {
    pub fn var(name: &str) -> Expr {
        Expr::Var(name.to_string())
    }

    pub fn is_const(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(n) => {
                out.insert(n.clone());
            }
            Expr::Unary(_, a) => a.collect_vars(out),
            Expr::Binary(_, a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    pub fn eval(&self, bindings: &HashMap<String, f64>) -> Result<f64, ExprError> {
        self.eval_with(&|name| bindings.get(name).copied())
    }

    pub fn eval_with(&self, lookup: &dyn Fn(&str) -> Option<f64>) -> Result<f64, ExprError> {
        match self {
            Expr::Const(c) => Ok(*c),
            Expr::Var(name) => lookup(name).ok_or_else(|| ExprError::Unbound { name: name.clone() }),
            Expr::Unary(op, a) => {
                let v = a.eval_with(lookup)?;
                match op {
                    UnaryOp::Neg => Ok(-v),
                    UnaryOp::Sin => Ok(v.sin()),
                    UnaryOp::Cos => Ok(v.cos()),
                    UnaryOp::Exp => Ok(v.exp()),
                    UnaryOp::Sqrt => {
                        if v < 0.0 {
                            Err(self.domain_error(format!("sqrt of negative number {v}")))
                        } else {
                            Ok(v.sqrt())
                        }
                    }
                    UnaryOp::Abs => Ok(v.abs()),
                    UnaryOp::Sgn => Ok(sgn(v)),
                }
            }
            Expr::Binary(op, a, b) => {
                let x = a.eval_with(lookup)?;
                let y = b.eval_with(lookup)?;
                match op {
                    BinOp::Add => Ok(x + y),
                    BinOp::Sub => Ok(x - y),
                    BinOp::Mul => Ok(x * y),
                    BinOp::Div => {
                        if y == 0.0 {
                            Err(self.domain_error("division by zero".to_string()))
                        } else {
                            Ok(x / y)
                        }
                    }
                    BinOp::Pow => self.pow_eval(x, y),
                }
            }
        }
    }

    fn pow_eval(&self, base: f64, expo: f64) -> Result<f64, ExprError> {
        match as_int_exponent(expo) {
            Some(k) => {
                if base == 0.0 && k < 0 {
                    Err(self.domain_error("zero raised to a negative power".to_string()))
                } else {
                    Ok(base.powi(k))
                }
            }
            None => {
                if base < 0.0 {
                    Err(self.domain_error(format!(
                        "negative base {base} with non-integer exponent {expo}"
                    )))
                } else if base == 0.0 && expo < 0.0 {
                    Err(self.domain_error("zero raised to a negative power".to_string()))
                } else {
                    Ok(base.powf(expo))
                }
            }
        }
    }

    fn domain_error(&self, msg: String) -> ExprError {
        ExprError::Domain {
            subexpr: self.to_string(),
            msg,
        }
    }

    /// Symbolic derivative with respect to `var`, constant-folded.
    pub fn diff(&self, var: &str) -> Derivative {
        let mut nonsmooth = false;
        let expr = self.diff_inner(var, &mut nonsmooth);
        Derivative { expr, nonsmooth }
    }

    fn diff_inner(&self, var: &str, nonsmooth: &mut bool) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(n) => Expr::Const(if n == var { 1.0 } else { 0.0 }),
            Expr::Unary(op, a) => {
                let da = a.diff_inner(var, nonsmooth);
                match op {
                    UnaryOp::Neg => neg(da),
                    UnaryOp::Sin => mul(Expr::Unary(UnaryOp::Cos, a.clone()), da),
                    UnaryOp::Cos => neg(mul(Expr::Unary(UnaryOp::Sin, a.clone()), da)),
                    UnaryOp::Exp => mul(Expr::Unary(UnaryOp::Exp, a.clone()), da),
                    UnaryOp::Sqrt => div(
                        da,
                        mul(Expr::Const(2.0), Expr::Unary(UnaryOp::Sqrt, a.clone())),
                    ),
                    UnaryOp::Abs => {
                        *nonsmooth = true;
                        mul(Expr::Unary(UnaryOp::Sgn, a.clone()), da)
                    }
                    UnaryOp::Sgn => {
                        *nonsmooth = true;
                        // Zero almost everywhere; the jump at the kink is dropped.
                        mul(Expr::Const(0.0), da)
                    }
                }
            }
            Expr::Binary(op, a, b) => {
                let da = a.diff_inner(var, nonsmooth);
                match op {
                    BinOp::Add => add(da, b.diff_inner(var, nonsmooth)),
                    BinOp::Sub => sub(da, b.diff_inner(var, nonsmooth)),
                    BinOp::Mul => {
                        let db = b.diff_inner(var, nonsmooth);
                        add(mul(da, (**b).clone()), mul((**a).clone(), db))
                    }
                    BinOp::Div => {
                        let db = b.diff_inner(var, nonsmooth);
                        div(
                            sub(mul(da, (**b).clone()), mul((**a).clone(), db)),
                            pow((**b).clone(), 2.0),
                        )
                    }
                    BinOp::Pow => {
                        let c = b
                            .is_const()
                            .expect("power exponent must be constant (parser enforces this)");
                        mul(mul(Expr::Const(c), pow((**a).clone(), c - 1.0)), da)
                    }
                }
            }
        }
    }

    /// Constant folding plus 0/1 identity elimination. Evaluation-equivalent
    /// to the input everywhere both are defined.
    pub fn simplify(&self) -> Expr {
        match self {
            Expr::Const(_) | Expr::Var(_) => self.clone(),
            Expr::Unary(op, a) => {
                let sa = a.simplify();
                match (op, &sa) {
                    (UnaryOp::Neg, Expr::Unary(UnaryOp::Neg, inner)) => (**inner).clone(),
                    _ => {
                        if let Some(v) = fold_unary(*op, &sa) {
                            return v;
                        }
                        Expr::Unary(*op, Box::new(sa))
                    }
                }
            }
            Expr::Binary(op, a, b) => {
                let sa = a.simplify();
                let sb = b.simplify();
                match op {
                    BinOp::Add => add(sa, sb),
                    BinOp::Sub => sub(sa, sb),
                    BinOp::Mul => mul(sa, sb),
                    BinOp::Div => div(sa, sb),
                    BinOp::Pow => pow_expr(sa, sb),
                }
            }
        }
    }

    /// True when the tree is a polynomial in its variables: only +, -, *, and
    /// nonnegative integer powers. Quadrature is exact for these; anything
    /// else deserves a raised order.
    pub fn is_polynomial(&self) -> bool {
        match self {
            Expr::Const(_) | Expr::Var(_) => true,
            Expr::Unary(UnaryOp::Neg, a) => a.is_polynomial(),
            Expr::Unary(_, _) => false,
            Expr::Binary(BinOp::Add | BinOp::Sub | BinOp::Mul, a, b) => {
                a.is_polynomial() && b.is_polynomial()
            }
            Expr::Binary(BinOp::Div, a, b) => a.is_polynomial() && b.is_const().is_some(),
            Expr::Binary(BinOp::Pow, a, b) => {
                a.is_polynomial()
                    && matches!(b.is_const().and_then(as_int_exponent), Some(k) if k >= 0)
            }
        }
    }

    /// Replaces every occurrence of variable `name` with `replacement`.
    pub fn substitute(&self, name: &str, replacement: &Expr) -> Expr {
        match self {
            Expr::Const(_) => self.clone(),
            Expr::Var(n) => {
                if n == name {
                    replacement.clone()
                } else {
                    self.clone()
                }
            }
            Expr::Unary(op, a) => Expr::Unary(*op, Box::new(a.substitute(name, replacement))),
            Expr::Binary(op, a, b) => Expr::Binary(
                *op,
                Box::new(a.substitute(name, replacement)),
                Box::new(b.substitute(name, replacement)),
            ),
        }
    }
}

/// Folds a unary op on a constant when the result is finite and in-domain.
fn fold_unary(op: UnaryOp, a: &Expr) -> Option<Expr> {
    let c = a.is_const()?;
    let v = match op {
        UnaryOp::Neg => -c,
        UnaryOp::Sin => c.sin(),
        UnaryOp::Cos => c.cos(),
        UnaryOp::Exp => c.exp(),
        UnaryOp::Sqrt => {
            if c < 0.0 {
                return None;
            }
            c.sqrt()
        }
        UnaryOp::Abs => c.abs(),
        UnaryOp::Sgn => sgn(c),
    };
    v.is_finite().then_some(Expr::Const(v))
}

// Folding constructors shared by diff and simplify. They apply exact rewrites
// only, so evaluation is preserved bit for bit wherever the input is defined.

pub(crate) fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(c) => Expr::Const(-c),
        Expr::Unary(UnaryOp::Neg, inner) => *inner,
        _ => Expr::Unary(UnaryOp::Neg, Box::new(a)),
    }
}

pub(crate) fn add(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) if (x + y).is_finite() => return Expr::Const(x + y),
        (Expr::Const(x), _) if *x == 0.0 => return b,
        (_, Expr::Const(y)) if *y == 0.0 => return a,
        _ => {}
    }
    Expr::Binary(BinOp::Add, Box::new(a), Box::new(b))
}

pub(crate) fn sub(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) if (x - y).is_finite() => return Expr::Const(x - y),
        (Expr::Const(x), _) if *x == 0.0 => return neg(b),
        (_, Expr::Const(y)) if *y == 0.0 => return a,
        _ => {}
    }
    Expr::Binary(BinOp::Sub, Box::new(a), Box::new(b))
}

pub(crate) fn mul(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) if (x * y).is_finite() => return Expr::Const(x * y),
        (Expr::Const(x), _) if *x == 0.0 => return Expr::Const(0.0),
        (_, Expr::Const(y)) if *y == 0.0 => return Expr::Const(0.0),
        (Expr::Const(x), _) if *x == 1.0 => return b,
        (_, Expr::Const(y)) if *y == 1.0 => return a,
        _ => {}
    }
    Expr::Binary(BinOp::Mul, Box::new(a), Box::new(b))
}

pub(crate) fn div(a: Expr, b: Expr) -> Expr {
    match (&a, &b) {
        (Expr::Const(x), Expr::Const(y)) if *y != 0.0 && (x / y).is_finite() => {
            return Expr::Const(x / y)
        }
        (_, Expr::Const(y)) if *y == 1.0 => return a,
        _ => {}
    }
    Expr::Binary(BinOp::Div, Box::new(a), Box::new(b))
}

pub(crate) fn pow(a: Expr, c: f64) -> Expr {
    pow_expr(a, Expr::Const(c))
}

fn pow_expr(a: Expr, b: Expr) -> Expr {
    let c = match b.is_const() {
        Some(c) => c,
        None => return Expr::Binary(BinOp::Pow, Box::new(a), Box::new(b)),
    };
    if c == 1.0 {
        return a;
    }
    if c == 0.0 {
        return Expr::Const(1.0);
    }
    if let Some(x) = a.is_const() {
        if let Ok(v) = Expr::Const(x).pow_eval(x, c) {
            if v.is_finite() {
                return Expr::Const(v);
            }
        }
    }
    Expr::Binary(BinOp::Pow, Box::new(a), Box::new(Expr::Const(c)))
}

// Printer. Parenthesization preserves evaluation exactly: every no-paren case
// reparses either to the identical tree or to one whose evaluation is
// bit-identical (unary minus and negative literals interchange).

fn needs_parens_unary_child(child: &Expr) -> bool {
    matches!(
        child,
        Expr::Binary(BinOp::Add, _, _) | Expr::Binary(BinOp::Sub, _, _)
    )
}

fn is_additive(e: &Expr) -> bool {
    matches!(
        e,
        Expr::Binary(BinOp::Add, _, _) | Expr::Binary(BinOp::Sub, _, _)
    )
}

fn is_mul_div(e: &Expr) -> bool {
    matches!(
        e,
        Expr::Binary(BinOp::Mul, _, _) | Expr::Binary(BinOp::Div, _, _)
    )
}

fn is_neg_like(e: &Expr) -> bool {
    match e {
        Expr::Unary(UnaryOp::Neg, _) => true,
        Expr::Const(c) => *c < 0.0,
        _ => false,
    }
}

fn fmt_child(f: &mut fmt::Formatter<'_>, child: &Expr, parens: bool) -> fmt::Result {
    if parens {
        write!(f, "({child})")
    } else {
        write!(f, "{child}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(n) => write!(f, "{n}"),
            Expr::Unary(UnaryOp::Neg, a) => {
                write!(f, "-")?;
                fmt_child(f, a, needs_parens_unary_child(a))
            }
            Expr::Unary(op, a) => {
                let name = match op {
                    UnaryOp::Sin => "sin",
                    UnaryOp::Cos => "cos",
                    UnaryOp::Exp => "exp",
                    UnaryOp::Sqrt => "sqrt",
                    UnaryOp::Abs => "abs",
                    UnaryOp::Sgn => "sgn",
                    UnaryOp::Neg => unreachable!(),
                };
                write!(f, "{name}({a})")
            }
            Expr::Binary(op, a, b) => match op {
                BinOp::Add => {
                    write!(f, "{a}+")?;
                    fmt_child(f, b, is_additive(b))
                }
                BinOp::Sub => {
                    write!(f, "{a}-")?;
                    fmt_child(f, b, is_additive(b))
                }
                BinOp::Mul => {
                    fmt_child(f, a, is_additive(a) || is_neg_like(a))?;
                    write!(f, "*")?;
                    fmt_child(f, b, is_additive(b) || is_mul_div(b))
                }
                BinOp::Div => {
                    fmt_child(f, a, is_additive(a) || is_neg_like(a))?;
                    write!(f, "/")?;
                    fmt_child(f, b, is_additive(b) || is_mul_div(b))
                }
                BinOp::Pow => {
                    let atom_base = matches!(
                        a.as_ref(),
                        Expr::Var(_)
                            | Expr::Const(_)
                            | Expr::Unary(
                                UnaryOp::Sin
                                    | UnaryOp::Cos
                                    | UnaryOp::Exp
                                    | UnaryOp::Sqrt
                                    | UnaryOp::Abs
                                    | UnaryOp::Sgn,
                                _
                            )
                    );
                    let base_parens = !atom_base || is_neg_like(a);
                    fmt_child(f, a, base_parens)?;
                    write!(f, "^{b}")
                }
            },
        }
    }
}
