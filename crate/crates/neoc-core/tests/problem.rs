use nalgebra::DMatrix;
use neoc_core::problem::{builtin, derived_fields, load_problem, ParamPerturbation, ProblemError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

const SCALAR_FILE: &str = "\
# first-order plant with a damping parameter
[dims]
state = 1
control = 1
params = 1
[dynamics]
f1 = -a1*x1
g11 = 1
[cost]
m = (1+a1)*x1^2 + x1^4
R = 1
[domain]
lo = -1
hi = 1
[params]
names = a1
nominal = 1
";

#[test]
fn loads_scalar_problem_file() {
    let p = load_problem(SCALAR_FILE).unwrap();
    assert_eq!(
        (p.state_dim, p.control_dim, p.param_dim),
        (1, 1, 1)
    );
    assert_eq!(p.alpha_names, ["a1"]);
    assert_eq!(p.alpha_nominal, [1.0]);
    assert_eq!((p.lo[0], p.hi[0]), (-1.0, 1.0));
    assert_eq!(p.eval_f(&[0.5], &[2.0]), [-1.0]);
    assert_eq!(p.eval_g(&[0.5], &[2.0])[(0, 0)], 1.0);
    assert_eq!(p.eval_m(&[0.5], &[1.0]), 2.0 * 0.25 + 0.0625);
}

#[test]
fn rejects_non_spd_r() {
    let bad = SCALAR_FILE.replace("R = 1", "R = 0");
    let err = load_problem(&bad).unwrap_err();
    assert!(err.to_string().contains("R not positive definite"), "{err}");
}

#[test]
fn rejects_asymmetric_r() {
    let two = SCALAR_FILE
        .replace("control = 1", "control = 2")
        .replace("g11 = 1", "g11 = 1\ng12 = 0")
        .replace("R = 1", "R = 1 2; 0 1");
    let err = load_problem(&two).unwrap_err();
    assert!(err.to_string().contains("R not symmetric"), "{err}");
}

#[test]
fn rejects_non_equilibrium_drift() {
    let bad = SCALAR_FILE.replace("f1 = -a1*x1", "f1 = 1");
    let err = load_problem(&bad).unwrap_err();
    assert!(err.to_string().contains("f(0,alpha) != 0"), "{err}");
}

#[test]
fn rejects_cost_nonzero_at_origin() {
    let bad = SCALAR_FILE.replace("m = (1+a1)*x1^2 + x1^4", "m = x1^2 + 1");
    let err = load_problem(&bad).unwrap_err();
    assert!(err.to_string().contains("m(0,alpha) != 0"), "{err}");
}

#[test]
fn rejects_sign_indefinite_cost() {
    let bad = SCALAR_FILE.replace("m = (1+a1)*x1^2 + x1^4", "m = x1^3");
    let err = load_problem(&bad).unwrap_err();
    assert!(err.to_string().contains("m not positive"), "{err}");
}

#[test]
fn reports_unknown_keys_and_sections_with_line_numbers() {
    let bad = SCALAR_FILE.replace("g11 = 1", "g11 = 1\ngg1 = 2");
    match load_problem(&bad).unwrap_err() {
        ProblemError::Parse { line, msg } => {
            assert_eq!(line, 9);
            assert!(msg.contains("unknown key `gg1`"), "{msg}");
        }
        other => panic!("expected parse error, got {other}"),
    }
    let bad = format!("[typo]\nx = 1\n{SCALAR_FILE}");
    match load_problem(&bad).unwrap_err() {
        ProblemError::Parse { line, msg } => {
            assert_eq!(line, 1);
            assert!(msg.contains("unknown section [typo]"), "{msg}");
        }
        other => panic!("expected parse error, got {other}"),
    }
}

#[test]
fn reports_expression_errors_with_line_numbers() {
    let bad = SCALAR_FILE.replace("f1 = -a1*x1", "f1 = -a1*x1 + sin(");
    match load_problem(&bad).unwrap_err() {
        ProblemError::Parse { line, msg } => {
            assert_eq!(line, 7);
            assert!(msg.starts_with("f1:"), "{msg}");
        }
        other => panic!("expected parse error, got {other}"),
    }
}

#[test]
fn rejects_unbound_symbols() {
    let bad = SCALAR_FILE.replace("f1 = -a1*x1", "f1 = -a1*x2");
    let err = load_problem(&bad).unwrap_err();
    assert!(err.to_string().contains("unbound symbol `x2`"), "{err}");
}

#[test]
fn missing_pieces_are_named() {
    let bad = SCALAR_FILE.replace("hi = 1\n", "");
    assert!(load_problem(&bad)
        .unwrap_err()
        .to_string()
        .contains("key `hi` in [domain]"));
    let bad = SCALAR_FILE.replace("[domain]\nlo = -1\nhi = 1\n", "");
    assert!(load_problem(&bad)
        .unwrap_err()
        .to_string()
        .contains("section [domain]"));
}

#[test]
fn duplicate_keys_rejected() {
    let bad = SCALAR_FILE.replace("lo = -1", "lo = -1\nlo = -2");
    assert!(load_problem(&bad)
        .unwrap_err()
        .to_string()
        .contains("duplicate key `lo`"));
}

#[test]
fn lqr_section_loads_and_defaults_to_zero() {
    let text = format!("{SCALAR_FILE}[lqr]\nA11 = -a1\nB11 = 1\n");
    let p = load_problem(&text).unwrap();
    let sec = p.lqr.as_ref().unwrap();
    assert_eq!(sec.a[0].to_string(), "-a1");
    assert_eq!(sec.b[0].to_string(), "1");
    // Q was never given, so it fills with zeros.
    assert_eq!(sec.q[0].to_string(), "0");

    let bad = format!("{SCALAR_FILE}[lqr]\nZ11 = 1\n");
    assert!(load_problem(&bad)
        .unwrap_err()
        .to_string()
        .contains("unknown key `Z11`"));

    let bad = format!("{SCALAR_FILE}[lqr]\nA11 = -x1\n");
    assert!(load_problem(&bad)
        .unwrap_err()
        .to_string()
        .contains("parameters only"));
}

#[test]
fn builtin_catalog_validates() {
    for name in ["cartpole_lqr", "scalar_siso", "bilinear", "pendulum"] {
        builtin(name).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    let err = builtin("does_not_exist").unwrap_err();
    for name in ["cartpole_lqr", "scalar_siso", "bilinear", "pendulum"] {
        assert!(err.to_string().contains(name), "{err}");
    }
}

#[test]
fn pendulum_builtin_matches_catalog() {
    let p = builtin("pendulum").unwrap();
    assert_eq!((p.state_dim, p.control_dim, p.param_dim), (2, 1, 2));
    assert_eq!(p.alpha_names, ["m", "l"]);
    assert_eq!(p.alpha_nominal, [1.0, 1.0]);
    let x = [0.3, -0.2];
    let alpha = [1.2, 0.8];
    let f = p.eval_f(&x, &alpha);
    assert_eq!(f[0], -0.2);
    assert!((f[1] - (0.3f64.sin() - (1.2 / 0.8) * (-0.2))).abs() < 1e-15);
    let g = p.eval_g(&x, &alpha);
    assert_eq!(g[(0, 0)], 0.0);
    assert_eq!(g[(1, 0)], 1.0 / 1.2);
    let m = p.eval_m(&x, &alpha);
    assert!((m - 0.8f64.powi(2) * (0.09 + 0.04)).abs() < 1e-15);
}

#[test]
fn cartpole_builtin_matches_catalog() {
    let p = builtin("cartpole_lqr").unwrap();
    assert_eq!((p.state_dim, p.control_dim, p.param_dim), (4, 1, 1));
    assert_eq!(p.alpha_names, ["b"]);
    assert_eq!(p.alpha_nominal, [0.1]);
    let f = p.eval_f(&[0.0, 1.0, 0.0, 0.0], &[0.1]);
    assert_eq!(f, [1.0, -(20.0 / 11.0) * 0.1, 0.0, -(50.0 / 11.0) * 0.1]);
    let f = p.eval_f(&[0.0, 0.0, 1.0, 0.0], &[0.1]);
    assert_eq!(f, [0.0, 147.0 / 55.0, 0.0, 343.0 / 11.0]);
    let g = p.eval_g(&[0.2; 4], &[0.1]);
    assert_eq!(
        [g[(0, 0)], g[(1, 0)], g[(2, 0)], g[(3, 0)]],
        [0.0, 20.0 / 11.0, 0.0, 50.0 / 11.0]
    );
    // Cost touches only cart position and pole angle; the even sample grid
    // must not flag the x2/x4 zero axes.
    assert_eq!(
        p.eval_m(&[0.5, 0.3, -0.2, 0.7], &[0.1]),
        0.5f64.powi(2) + (-0.2f64).powi(2)
    );
}

#[test]
fn bilinear_builtin_matches_catalog() {
    let p = builtin("bilinear").unwrap();
    assert_eq!(p.eval_f(&[0.7], &[1.0]), [0.0]);
    assert_eq!(p.eval_g(&[0.7], &[2.0])[(0, 0)], 2.0 * 0.7f64.powi(2));
    assert_eq!(
        p.eval_m(&[0.7], &[1.0]),
        0.7f64.powi(2) + 0.7f64.powi(4)
    );
}

#[test]
fn derived_fields_examples() {
    let scalar = builtin("scalar_siso").unwrap();
    let d = derived_fields(&scalar).unwrap();
    assert_eq!(d.dm_dalpha[0].to_string(), "x1^2");
    assert_eq!(d.df_dalpha[0].to_string(), "-x1");

    let bilinear = builtin("bilinear").unwrap();
    let d = derived_fields(&bilinear).unwrap();
    assert_eq!(d.dg_dalpha[0][0].to_string(), "x1^2");

    let pendulum = builtin("pendulum").unwrap();
    let d = derived_fields(&pendulum).unwrap();
    let alpha = [1.3, 0.7];
    let eval = |e: &neoc_core::Expr| {
        e.eval_with(&|n| match n {
            "m" => Some(alpha[0]),
            "l" => Some(alpha[1]),
            _ => None,
        })
        .unwrap()
    };
    // Hessian of l^2 (x1^2 + x2^2) at the origin is 2 l^2 I.
    assert!((eval(&d.hess_m0[0]) - 2.0 * 0.49).abs() < 1e-15);
    assert_eq!(eval(&d.hess_m0[1]), 0.0);
    assert_eq!(eval(&d.hess_m0[2]), 0.0);
    assert!((eval(&d.hess_m0[3]) - 2.0 * 0.49).abs() < 1e-15);
    // Linearization of the drift at the upright equilibrium.
    assert_eq!(eval(&d.dfdx0[0]), 0.0);
    assert_eq!(eval(&d.dfdx0[1]), 1.0);
    assert_eq!(eval(&d.dfdx0[2]), 1.0); // d sin(x1)/dx1 at 0
    assert!((eval(&d.dfdx0[3]) + 1.3 / 0.7).abs() < 1e-15);
}

#[test]
fn derived_fields_match_finite_differences() {
    let mut rng = ChaCha12Rng::seed_from_u64(42);
    for name in ["scalar_siso", "bilinear", "pendulum", "cartpole_lqr"] {
        let p = builtin(name).unwrap();
        let d = derived_fields(&p).unwrap();
        let (n, pp, q) = (p.state_dim, p.control_dim, p.param_dim);
        for _ in 0..20 {
            let x: Vec<f64> = (0..n).map(|i| rng.random_range(p.lo[i]..p.hi[i])).collect();
            let alpha: Vec<f64> = p
                .alpha_nominal
                .iter()
                .map(|&a| a + rng.random_range(-0.3..0.3))
                .collect();
            let vars = p.var_names();
            let bind = |e: &neoc_core::Expr, x: &[f64], a: &[f64]| {
                e.eval_with(&|s| {
                    vars.iter()
                        .position(|v| v == s)
                        .map(|k| if k < n { x[k] } else { a[k - n] })
                })
                .unwrap()
            };
            for l in 0..q {
                let h = 1e-5;
                let mut ap = alpha.clone();
                let mut am = alpha.clone();
                ap[l] += h;
                am[l] -= h;
                let close = |sym: f64, plus: f64, minus: f64| {
                    let fd = (plus - minus) / (2.0 * h);
                    assert!(
                        (sym - fd).abs() <= 1e-6 * (1.0 + sym.abs()),
                        "{name}: sym {sym} vs fd {fd}"
                    );
                };
                for i in 0..n {
                    close(
                        bind(&d.df_dalpha[i * q + l], &x, &alpha),
                        p.eval_f(&x, &ap)[i],
                        p.eval_f(&x, &am)[i],
                    );
                    for j in 0..pp {
                        close(
                            bind(&d.dg_dalpha[l][i * pp + j], &x, &alpha),
                            p.eval_g(&x, &ap)[(i, j)],
                            p.eval_g(&x, &am)[(i, j)],
                        );
                    }
                }
                close(
                    bind(&d.dm_dalpha[l], &x, &alpha),
                    p.eval_m(&x, &ap),
                    p.eval_m(&x, &am),
                );
            }
        }
    }
}

#[test]
fn nonsmooth_cost_is_rejected_by_derived_fields() {
    let text = SCALAR_FILE.replace("m = (1+a1)*x1^2 + x1^4", "m = abs(x1)*(1+a1)");
    let p = load_problem(&text).unwrap();
    let err = derived_fields(&p).unwrap_err();
    assert!(err.to_string().contains("abs(x1)"), "{err}");
    assert!(err.to_string().contains("non-differentiable"), "{err}");
}

#[test]
fn perturbation_length_must_match() {
    assert!(ParamPerturbation::new(vec![0.1, 0.2]).validate(2).is_ok());
    assert!(ParamPerturbation::new(vec![0.1]).validate(2).is_err());
    assert!(ParamPerturbation::new(vec![f64::NAN]).validate(1).is_err());
    let bad = ParamPerturbation::with_bounds(vec![0.1], vec![(2.0, 1.0)]);
    assert!(bad.validate(1).is_err());
}

#[test]
fn default_alpha_box_and_domain_helpers() {
    let p = builtin("cartpole_lqr").unwrap();
    assert_eq!(p.default_alpha_box(), [(0.1 - 0.5, 0.1 + 0.5)]);
    assert_eq!(p.domain_radius(), 2.0);
    assert!(p.in_scaled_domain(&[1.9, 0.0, 0.0, 0.0], 2.0));
    assert!(!p.in_scaled_domain(&[2.1, 0.0, 0.0, 0.0], 2.0));

    let file = SCALAR_FILE.replace("nominal = 1", "nominal = 4");
    let p = load_problem(&file).unwrap();
    assert_eq!(p.default_alpha_box(), [(2.0, 6.0)]);
}

#[test]
fn rejects_state_symbol_as_parameter_name() {
    let bad = SCALAR_FILE
        .replace("names = a1", "names = x1")
        .replace("f1 = -a1*x1", "f1 = -x1*x1")
        .replace("m = (1+a1)*x1^2 + x1^4", "m = x1^2");
    let err = load_problem(&bad).unwrap_err();
    assert!(err.to_string().contains("collides with a state symbol"), "{err}");
}
