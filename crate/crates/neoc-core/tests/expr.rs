use std::collections::HashMap;

use neoc_core::expr::{parse, BinOp, CompiledExpr, Expr, ExprError, UnaryOp};

fn bind(pairs: &[(&str, f64)]) -> HashMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

#[test]
fn parse_power_and_function() {
    let e = parse("x1^2 + sin(x1)").unwrap();
    let expected = Expr::Binary(
        BinOp::Add,
        Box::new(Expr::Binary(
            BinOp::Pow,
            Box::new(Expr::var("x1")),
            Box::new(Expr::Const(2.0)),
        )),
        Box::new(Expr::Unary(UnaryOp::Sin, Box::new(Expr::var("x1")))),
    );
    assert_eq!(e, expected);
}

#[test]
fn unary_minus_wraps_product() {
    let e = parse("-alpha*x").unwrap();
    let expected = Expr::Unary(
        UnaryOp::Neg,
        Box::new(Expr::Binary(
            BinOp::Mul,
            Box::new(Expr::var("alpha")),
            Box::new(Expr::var("x")),
        )),
    );
    assert_eq!(e, expected);
}

#[test]
fn syntax_error_offset_is_one_based() {
    match parse("x**") {
        Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 3),
        other => panic!("expected syntax error, got {other:?}"),
    }
}

#[test]
fn unknown_function_reported_with_offset() {
    match parse("foo(x)") {
        Err(ExprError::UnknownFunction { name, offset }) => {
            assert_eq!(name, "foo");
            assert_eq!(offset, 1);
        }
        other => panic!("expected unknown function error, got {other:?}"),
    }
}

#[test]
fn unclosed_paren_reports_end_of_input() {
    match parse("(x") {
        Err(ExprError::Syntax { offset, msg }) => {
            assert_eq!(offset, 3);
            assert!(msg.contains("expected ')'"), "{msg}");
        }
        other => panic!("expected syntax error, got {other:?}"),
    }
}

#[test]
fn exponent_must_be_constant() {
    match parse("x^(a)") {
        Err(ExprError::Syntax { msg, .. }) => {
            assert!(msg.contains("constant"), "{msg}");
        }
        other => panic!("expected syntax error, got {other:?}"),
    }
    // Constant subexpressions are folded into the exponent.
    let e = parse("x^(1+1)").unwrap();
    assert_eq!(
        e,
        Expr::Binary(
            BinOp::Pow,
            Box::new(Expr::var("x")),
            Box::new(Expr::Const(2.0))
        )
    );
}

#[test]
fn eval_cost_integrand() {
    let e = parse("(1+alpha)*x^2 + x^4").unwrap();
    let v = e.eval(&bind(&[("alpha", 1.0), ("x", 1.0)])).unwrap();
    assert_eq!(v, 3.0);
}

#[test]
fn eval_sin_at_zero() {
    let e = parse("sin(x1)").unwrap();
    assert_eq!(e.eval(&bind(&[("x1", 0.0)])).unwrap(), 0.0);
}

#[test]
fn eval_domain_errors_name_subexpression() {
    let e = parse("1 + sqrt(x)").unwrap();
    match e.eval(&bind(&[("x", -1.0)])) {
        Err(ExprError::Domain { subexpr, .. }) => assert_eq!(subexpr, "sqrt(x)"),
        other => panic!("expected domain error, got {other:?}"),
    }
    let e = parse("x/(x-1)").unwrap();
    match e.eval(&bind(&[("x", 1.0)])) {
        Err(ExprError::Domain { subexpr, msg }) => {
            assert_eq!(subexpr, "x/(x-1)");
            assert!(msg.contains("division by zero"));
        }
        other => panic!("expected domain error, got {other:?}"),
    }
}

#[test]
fn eval_unbound_variable() {
    let e = parse("x + y").unwrap();
    match e.eval(&bind(&[("x", 1.0)])) {
        Err(ExprError::Unbound { name }) => assert_eq!(name, "y"),
        other => panic!("expected unbound error, got {other:?}"),
    }
}

#[test]
fn diff_power_rule_matches_closed_form() {
    let e = parse("alpha*x^2").unwrap();
    let d = e.diff("x");
    assert!(!d.nonsmooth);
    let closed = parse("2*alpha*x").unwrap();
    for i in 0..20 {
        let x = -2.0 + 0.21 * i as f64;
        let a = 0.5 + 0.13 * i as f64;
        let b = bind(&[("x", x), ("alpha", a)]);
        let got = d.expr.eval(&b).unwrap();
        let want = closed.eval(&b).unwrap();
        assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()));
    }
}

#[test]
fn diff_cost_wrt_alpha_folds_to_x_squared() {
    let e = parse("(1+alpha)*x^2 + x^4").unwrap();
    let d = e.diff("alpha");
    assert_eq!(d.expr.to_string(), "x^2");
}

#[test]
fn diff_sin_at_zero() {
    let e = parse("sin(x1)").unwrap();
    let d = e.diff("x1");
    assert_eq!(d.expr.eval(&bind(&[("x1", 0.0)])).unwrap(), 1.0);
}

#[test]
fn diff_abs_and_sgn_flag_nonsmooth() {
    let d = parse("abs(x)").unwrap().diff("x");
    assert!(d.nonsmooth);
    assert_eq!(d.expr.eval(&bind(&[("x", -2.0)])).unwrap(), -1.0);
    assert_eq!(d.expr.eval(&bind(&[("x", 3.0)])).unwrap(), 1.0);

    let d = parse("sgn(x)").unwrap().diff("x");
    assert!(d.nonsmooth);
    assert_eq!(d.expr.eval(&bind(&[("x", 2.0)])).unwrap(), 0.0);

    let d = parse("x^2 + x").unwrap().diff("x");
    assert!(!d.nonsmooth);
}

#[test]
fn diff_quotient_and_sqrt() {
    let e = parse("sqrt(x)/(1+x)").unwrap();
    let d = e.diff("x").expr;
    let x = 2.3;
    let b = bind(&[("x", x)]);
    let got = d.eval(&b).unwrap();
    let want = (1.0 / (2.0 * x.sqrt()) * (1.0 + x) - x.sqrt()) / (1.0 + x).powi(2);
    assert!((got - want).abs() <= 1e-12);
}

#[test]
fn simplify_examples() {
    assert_eq!(parse("0*x + y").unwrap().simplify().to_string(), "y");
    assert_eq!(parse("x^1").unwrap().simplify().to_string(), "x");
    assert_eq!(parse("2*3").unwrap().simplify().to_string(), "6");
    assert_eq!(parse("x*1 + 0/7").unwrap().simplify().to_string(), "x");
    assert_eq!(parse("-(-x)").unwrap().simplify().to_string(), "x");
}

#[test]
fn simplify_keeps_out_of_domain_constants_unfolded() {
    // Folding sqrt(-2) or 1/0 would turn an eval error into a number.
    let e = parse("sqrt(0-2)").unwrap().simplify();
    assert!(e.eval(&bind(&[])).is_err());
    let e = parse("1/(2-2)").unwrap().simplify();
    assert!(e.eval(&bind(&[])).is_err());
}

#[test]
fn display_round_trips_structurally() {
    for src in [
        "x1^2+sin(x1)",
        "-alpha*x",
        "a-(b-c)",
        "a/(b*c)",
        "x^-2",
        "x^0.5",
        "(x+y)^3",
        "a*-b",
        "-(a+b)",
        "sqrt(abs(x))^3",
        "1.5e-3*x",
    ] {
        let t = parse(src).unwrap();
        let s1 = t.to_string();
        let t2 = parse(&s1).unwrap();
        assert_eq!(t, t2, "reparse of '{s1}' changed the tree");
        assert_eq!(s1, t2.to_string());
    }
}

#[test]
fn substitute_replaces_variables() {
    let e = parse("sin(x1) + x2^2").unwrap();
    let s = e.substitute("x1", &Expr::Const(0.0)).simplify();
    assert_eq!(s.to_string(), "x2^2");
}

#[test]
fn free_vars_collects_names() {
    let e = parse("sin(x1)*a1 + x2").unwrap();
    let vars: Vec<String> = e.free_vars().into_iter().collect();
    assert_eq!(vars, ["a1", "x1", "x2"]);
}

#[test]
fn compiled_matches_interpreted_bitwise() {
    let vars: Vec<String> = ["x", "y"].iter().map(|s| s.to_string()).collect();
    for src in [
        "x^2 + 3*y",
        "sin(x)*cos(y) - exp(x/(y^2+1))",
        "sqrt(x^2 + 0.3) / (abs(y) + 1)",
        "sgn(x)*y^3 - x^0.5",
        "-x*y + 2^-2",
    ] {
        let t = parse(src).unwrap();
        let c = CompiledExpr::compile(&t, &vars).unwrap();
        for (x, y) in [(0.7, -1.3), (2.0, 0.4), (0.01, 3.0)] {
            let interp = t.eval(&bind(&[("x", x), ("y", y)])).unwrap();
            let compiled = c.eval(&[x, y]);
            assert_eq!(interp.to_bits(), compiled.to_bits(), "{src} at ({x},{y})");
        }
    }
}

#[test]
fn compile_rejects_unknown_variables() {
    let t = parse("x + q").unwrap();
    let vars: Vec<String> = ["x".to_string()].into();
    match CompiledExpr::compile(&t, &vars) {
        Err(ExprError::Unbound { name }) => assert_eq!(name, "q"),
        other => panic!("expected unbound error, got {other:?}"),
    }
}

#[test]
fn scientific_notation_and_whitespace() {
    let e = parse(" 1e2 + 2.5E-1 ").unwrap();
    assert_eq!(e.eval(&bind(&[])).unwrap(), 100.25);
}
