//! Flat postfix form of an expression for hot evaluation loops (quadrature
//! node sweeps, RK4 stages). Variable names are resolved to slot indices once
//! at compile time; evaluation is pure IEEE arithmetic with no lookups and no
//! error paths (out-of-domain inputs yield NaN/inf and are caught by the
//! callers' finiteness guards).
//!
//! Integer powers use `powi`, everything else `powf`, matching `Expr::eval`
//! bit for bit on shared inputs.

use super::{as_int_exponent, sgn, BinOp, Expr, ExprError, UnaryOp};

#[derive(Debug, Clone, Copy)]
enum Op {
    Const(f64),
    Load(u32),
    Neg,
    Sin,
    Cos,
    Exp,
    Sqrt,
    Abs,
    Sgn,
    Add,
    Sub,
    Mul,
    Div,
    Powi(i32),
    Powf(f64),
}

#[derive(Debug, Clone)]
pub struct CompiledExpr {
    ops: Vec<Op>,
    max_stack: usize,
}

impl CompiledExpr {
    /// Compiles against a fixed variable ordering; evaluation later takes a
    /// slice of values in that same order.
    pub fn compile(e: &Expr, vars: &[String]) -> Result<CompiledExpr, ExprError> {
        let mut ops = Vec::new();
        emit(e, vars, &mut ops)?;
        let mut depth = 0usize;
        let mut max_stack = 0usize;
        for op in &ops {
            match op {
                Op::Const(_) | Op::Load(_) => depth += 1,
                Op::Add | Op::Sub | Op::Mul | Op::Div => depth -= 1,
                _ => {}
            }
            max_stack = max_stack.max(depth);
        }
        Ok(CompiledExpr { ops, max_stack })
    }

    pub fn eval(&self, vals: &[f64]) -> f64 {
        let mut stack = Vec::with_capacity(self.max_stack);
        self.eval_scratch(vals, &mut stack)
    }

    /// Same as `eval` but reuses a caller-owned stack buffer.
    pub fn eval_scratch(&self, vals: &[f64], stack: &mut Vec<f64>) -> f64 {
        stack.clear();
        for op in &self.ops {
            match *op {
                Op::Const(c) => stack.push(c),
                Op::Load(i) => stack.push(vals[i as usize]),
                Op::Neg => {
                    let a = stack.last_mut().unwrap();
                    *a = -*a;
                }
                Op::Sin => {
                    let a = stack.last_mut().unwrap();
                    *a = a.sin();
                }
                Op::Cos => {
                    let a = stack.last_mut().unwrap();
                    *a = a.cos();
                }
                Op::Exp => {
                    let a = stack.last_mut().unwrap();
                    *a = a.exp();
                }
                Op::Sqrt => {
                    let a = stack.last_mut().unwrap();
                    *a = a.sqrt();
                }
                Op::Abs => {
                    let a = stack.last_mut().unwrap();
                    *a = a.abs();
                }
                Op::Sgn => {
                    let a = stack.last_mut().unwrap();
                    *a = sgn(*a);
                }
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
                    *stack.last_mut().unwrap() /= b;
                }
                Op::Powi(k) => {
                    let a = stack.last_mut().unwrap();
                    *a = a.powi(k);
                }
                Op::Powf(c) => {
                    let a = stack.last_mut().unwrap();
                    *a = a.powf(c);
                }
            }
        }
        debug_assert_eq!(stack.len(), 1);
        stack[0]
    }
}

fn emit(e: &Expr, vars: &[String], ops: &mut Vec<Op>) -> Result<(), ExprError> {
    match e {
        Expr::Const(c) => ops.push(Op::Const(*c)),
        Expr::Var(name) => {
            let slot = vars
                .iter()
                .position(|v| v == name)
                .ok_or_else(|| ExprError::Unbound { name: name.clone() })?;
            ops.push(Op::Load(slot as u32));
        }
        Expr::Unary(op, a) => {
            emit(a, vars, ops)?;
            ops.push(match op {
                UnaryOp::Neg => Op::Neg,
                UnaryOp::Sin => Op::Sin,
                UnaryOp::Cos => Op::Cos,
                UnaryOp::Exp => Op::Exp,
                UnaryOp::Sqrt => Op::Sqrt,
                UnaryOp::Abs => Op::Abs,
                UnaryOp::Sgn => Op::Sgn,
            });
        }
        Expr::Binary(BinOp::Pow, a, b) => {
            emit(a, vars, ops)?;
            let c = b
                .is_const()
                .expect("power exponent must be constant (parser enforces this)");
            ops.push(match as_int_exponent(c) {
                Some(k) => Op::Powi(k),
                None => Op::Powf(c),
            });
        }
        Expr::Binary(op, a, b) => {
            emit(a, vars, ops)?;
            emit(b, vars, ops)?;
            ops.push(match op {
                BinOp::Add => Op::Add,
                BinOp::Sub => Op::Sub,
                BinOp::Mul => Op::Mul,
                BinOp::Div => Op::Div,
                BinOp::Pow => unreachable!(),
            });
        }
    }
    Ok(())
}
