//! Property tests for the expression module: derivative vs finite difference,
//! simplification equivalence, printer round-trip, and compiled-vs-interpreted
//! agreement.

use std::collections::HashMap;

use neoc_core::expr::{parse, BinOp, CompiledExpr, Expr, UnaryOp};
use proptest::prelude::*;

fn leaf() -> impl Strategy<Value = Expr> {
    prop_oneof![
        3 => (-3.0..3.0f64).prop_map(Expr::Const),
        4 => prop_oneof![Just("x"), Just("y"), Just("z")].prop_map(Expr::var),
    ]
}

/// Random expression trees kept numerically tame: sqrt arguments and divisors
/// are bounded away from zero by construction, exp arguments are damped.
fn arb_expr() -> impl Strategy<Value = Expr> {
    leaf().prop_recursive(4, 48, 2, |inner| {
        let unary = |op: UnaryOp| {
            move |e: Expr| Expr::Unary(op, Box::new(e))
        };
        prop_oneof![
            inner.clone().prop_map(unary(UnaryOp::Neg)),
            inner.clone().prop_map(unary(UnaryOp::Sin)),
            inner.clone().prop_map(unary(UnaryOp::Cos)),
            inner.clone().prop_map(unary(UnaryOp::Abs)),
            inner.clone().prop_map(unary(UnaryOp::Sgn)),
            (inner.clone(), 0.2..2.0f64).prop_map(|(e, c)| {
                Expr::Unary(
                    UnaryOp::Exp,
                    Box::new(Expr::Binary(
                        BinOp::Mul,
                        Box::new(Expr::Const(0.2)),
                        Box::new(Expr::Binary(
                            BinOp::Add,
                            Box::new(e),
                            Box::new(Expr::Const(c)),
                        )),
                    )),
                )
            }),
            (inner.clone(), 0.2..2.0f64).prop_map(|(e, c)| {
                Expr::Unary(
                    UnaryOp::Sqrt,
                    Box::new(Expr::Binary(
                        BinOp::Add,
                        Box::new(Expr::Binary(
                            BinOp::Pow,
                            Box::new(e),
                            Box::new(Expr::Const(2.0)),
                        )),
                        Box::new(Expr::Const(c)),
                    )),
                )
            }),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| {
                Expr::Binary(BinOp::Add, Box::new(a), Box::new(b))
            }),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| {
                Expr::Binary(BinOp::Sub, Box::new(a), Box::new(b))
            }),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| {
                Expr::Binary(BinOp::Mul, Box::new(a), Box::new(b))
            }),
            // Divisor d^2 + c stays positive.
            (inner.clone(), inner.clone(), 0.2..2.0f64).prop_map(|(a, d, c)| {
                Expr::Binary(
                    BinOp::Div,
                    Box::new(a),
                    Box::new(Expr::Binary(
                        BinOp::Add,
                        Box::new(Expr::Binary(
                            BinOp::Pow,
                            Box::new(d),
                            Box::new(Expr::Const(2.0)),
                        )),
                        Box::new(Expr::Const(c)),
                    )),
                )
            }),
            (inner.clone(), prop_oneof![Just(2.0), Just(3.0), Just(4.0), Just(0.5), Just(-1.0), Just(-2.5)])
                .prop_map(|(a, c)| Expr::Binary(BinOp::Pow, Box::new(a), Box::new(Expr::Const(c)))),
        ]
    })
}

fn bindings(x: f64, y: f64, z: f64) -> HashMap<String, f64> {
    [("x", x), ("y", y), ("z", z)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

/// Smallest |value| over all abs/sgn arguments; used to stay off kinks where
/// the a.e. derivative is not the two-sided limit.
fn kink_distance(e: &Expr, b: &HashMap<String, f64>) -> f64 {
    match e {
        Expr::Const(_) | Expr::Var(_) => f64::INFINITY,
        Expr::Unary(op, a) => {
            let inner = kink_distance(a, b);
            if matches!(op, UnaryOp::Abs | UnaryOp::Sgn) {
                match a.eval(b) {
                    Ok(v) => inner.min(v.abs()),
                    Err(_) => 0.0,
                }
            } else {
                inner
            }
        }
        Expr::Binary(_, a, c) => kink_distance(a, b).min(kink_distance(c, b)),
    }
}

fn ulp_eq(a: f64, b: f64) -> bool {
    if a == b {
        return true;
    }
    (a - b).abs() <= a.abs().max(b.abs()) * f64::EPSILON
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]
    #[test]
    fn derivative_matches_central_difference(
        e in arb_expr(),
        x in -1.5..1.5f64,
        y in -1.5..1.5f64,
        z in -1.5..1.5f64,
    ) {
        let b = bindings(x, y, z);
        prop_assume!(kink_distance(&e, &b) > 0.05);
        let h = 1e-5;
        let sym = e.diff("x").expr;
        let dsym = match sym.eval(&b) {
            Ok(v) if v.is_finite() => v,
            _ => return Err(TestCaseError::Reject("derivative not evaluable".into())),
        };
        let at = |xv: f64| e.eval(&bindings(xv, y, z));
        let (fp, fm) = match (at(x + h), at(x - h)) {
            (Ok(a), Ok(bv)) if a.is_finite() && bv.is_finite() => (a, bv),
            _ => return Err(TestCaseError::Reject("function not evaluable".into())),
        };
        let dfd = (fp - fm) / (2.0 * h);
        // Self-consistency filter: a half-step estimate must agree, otherwise
        // the finite difference itself is unreliable at this point.
        let (fp2, fm2) = match (at(x + h / 2.0), at(x - h / 2.0)) {
            (Ok(a), Ok(bv)) if a.is_finite() && bv.is_finite() => (a, bv),
            _ => return Err(TestCaseError::Reject("function not evaluable".into())),
        };
        let dfd2 = (fp2 - fm2) / h;
        prop_assume!((dfd - dfd2).abs() <= 1e-6 * (1.0 + dfd.abs()));
        prop_assert!(
            (dsym - dfd).abs() <= 1e-6 * (1.0 + dsym.abs()),
            "sym={dsym}, fd={dfd}, expr={e}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn simplify_preserves_evaluation(
        e in arb_expr(),
        x in -2.0..2.0f64,
        y in -2.0..2.0f64,
        z in -2.0..2.0f64,
    ) {
        let b = bindings(x, y, z);
        let before = match e.eval(&b) {
            Ok(v) if v.is_finite() => v,
            _ => return Err(TestCaseError::Reject("not evaluable".into())),
        };
        let after = e.simplify().eval(&b).expect("simplified expression must evaluate");
        prop_assert!(ulp_eq(before, after), "before={before}, after={after}, expr={e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]
    #[test]
    fn printer_round_trip_is_fixed_point(e in arb_expr()) {
        let s1 = e.to_string();
        let t2 = parse(&s1).unwrap_or_else(|err| panic!("'{s1}' failed to reparse: {err}"));
        let s2 = t2.to_string();
        prop_assert_eq!(&s1, &s2);
        // One more round for good measure: the printed form is stable.
        let t3 = parse(&s2).unwrap();
        prop_assert_eq!(s2, t3.to_string());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]
    #[test]
    fn compiled_matches_interpreted(
        e in arb_expr(),
        x in -2.0..2.0f64,
        y in -2.0..2.0f64,
        z in -2.0..2.0f64,
    ) {
        let b = bindings(x, y, z);
        let interp = match e.eval(&b) {
            Ok(v) => v,
            _ => return Err(TestCaseError::Reject("not evaluable".into())),
        };
        let vars: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let c = CompiledExpr::compile(&e, &vars).unwrap();
        let compiled = c.eval(&[x, y, z]);
        prop_assert_eq!(interp.to_bits(), compiled.to_bits(), "expr={}", e);
    }
}
