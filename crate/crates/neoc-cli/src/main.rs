//! Command-line front end for the solver toolkit: load a builtin or file
//! problem, run Galerkin policy iteration, parametric sensitivity, homotopy
//! continuation, or the Riccati fast path, and write CSV/JSON artifacts.
//! Artifacts are deterministic: the same inputs and seed produce the same
//! bytes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use neoc_core::basis::{gauss_grid, monomial_basis, parse_basis_spec, BasisSet, QuadratureGrid};
use neoc_core::expr::parse as parse_expr;
use neoc_core::hjb::{GateMode, HjbSolution, PolicyOptions, DEFAULT_TOL_RES};
use neoc_core::lqr::{care_solve, check_assumptions, neoc_gain, riccati_sensitivity, LqrProblem};
use neoc_core::problem::{builtin, builtin_names, derived_fields, load_problem, ProblemSpec};
use neoc_core::sensitivity::{homotopy_neoc, neoc_law, weight_sensitivity, HomotopyResult};
use neoc_core::sim::{compare_laws, SimOptions};
use neoc_core::{ControlLaw, DerivedProblem};

/// Grid cap across all axes: 201 squared, the 2-D default.
const GRID_TOTAL_CAP: usize = 201 * 201;

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

/// Usage errors exit 2, runtime failures exit 1; clap's own parse errors
/// also exit 2.
enum CliError {
    Usage(String),
    Run(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Run(m) => f.write_str(m),
        }
    }
}

fn usage(msg: impl fmt::Display) -> CliError {
    CliError::Usage(msg.to_string())
}

fn failure(msg: impl fmt::Display) -> CliError {
    CliError::Run(msg.to_string())
}

/// Galerkin solver toolkit for closed-loop optimal control.
#[derive(Parser)]
#[command(name = "neoc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve by Galerkin policy iteration; write value and control grids.
    Solve(SolveArgs),
    /// Weight sensitivity and the adjusted control law for a parameter
    /// change, optionally compared against a full re-solve.
    Neoc(NeocArgs),
    /// Split a large parameter change into first-order steps.
    Homotopy(HomotopyArgs),
    /// Riccati gains of the linearized problem: nominal, adjusted, and
    /// optionally recalculated.
    Lqr(LqrArgs),
    /// Evaluate the solved law against reference expressions on a grid.
    Compare(CompareArgs),
    /// List the builtin problems.
    ListBuiltins,
}

#[derive(Args)]
struct Source {
    /// Builtin problem name; see list-builtins.
    #[arg(long, value_name = "NAME", conflicts_with = "problem")]
    builtin: Option<String>,
    /// Problem definition file.
    #[arg(long, value_name = "FILE")]
    problem: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GateArg {
    /// Reject initial laws whose probe trajectories fail to contract.
    Enforce,
    /// Record probe failures in the solution diagnostics instead.
    Warn,
    /// Skip the probes.
    Off,
}

impl From<GateArg> for GateMode {
    fn from(g: GateArg) -> GateMode {
        match g {
            GateArg::Enforce => GateMode::Enforce,
            GateArg::Warn => GateMode::Warn,
            GateArg::Off => GateMode::Off,
        }
    }
}

#[derive(Args)]
struct SolverFlags {
    /// Basis spec: "even:D" for every monomial of even total degree up to
    /// D, or explicit multi-indices like "2 0;1 1;0 2".
    #[arg(long, value_name = "SPEC")]
    basis: String,
    /// Gauss-Legendre points per axis; defaults to the basis degree plus 2.
    #[arg(long, value_name = "K")]
    quad_order: Option<usize>,
    /// Policy iteration cap.
    #[arg(long, default_value_t = 100, value_name = "I")]
    max_iter: usize,
    /// Weight-change stopping tolerance.
    #[arg(long, default_value_t = 1e-10, value_name = "T")]
    tol: f64,
    /// Initial control law: one expression per input channel, comma
    /// separated, in x1..xn; or the word "riccati" to start from the gain
    /// of the linearized problem.
    #[arg(long, value_name = "EXPR[,EXPR]", allow_hyphen_values = true)]
    u0: Option<String>,
    /// Admissibility probe on the initial law.
    #[arg(long, value_enum, default_value_t = GateArg::Enforce)]
    gate: GateArg,
}

#[derive(Args)]
struct OutputFlags {
    /// Output directory for artifacts.
    #[arg(long, default_value = ".", value_name = "DIR")]
    out: PathBuf,
    /// Evaluation grid points per axis; the total across axes is capped at
    /// 40401.
    #[arg(long, default_value_t = 201, value_name = "P")]
    grid_pts: usize,
}

#[derive(Args)]
struct SimFlags {
    /// Time step for probe simulations.
    #[arg(long, default_value_t = 1e-3, value_name = "DT")]
    dt: f64,
    /// Horizon for probe simulations.
    #[arg(long, default_value_t = 50.0, value_name = "T")]
    horizon: f64,
}

impl SimFlags {
    fn options(&self) -> Result<SimOptions, CliError> {
        if !(self.dt > 0.0) || !(self.horizon > self.dt) {
            return Err(usage("need --dt > 0 and --horizon > --dt"));
        }
        Ok(SimOptions {
            dt: self.dt,
            t_max: self.horizon,
            ..SimOptions::default()
        })
    }
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    solver: SolverFlags,
    #[command(flatten)]
    output: OutputFlags,
    /// Seed for the randomized residual spot checks.
    #[arg(long, default_value_t = 0, value_name = "S")]
    seed: u64,
}

#[derive(Args)]
struct NeocArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    solver: SolverFlags,
    #[command(flatten)]
    output: OutputFlags,
    #[command(flatten)]
    sim: SimFlags,
    /// Parameter change, space separated for several parameters.
    #[arg(long, value_name = "VEC", allow_hyphen_values = true)]
    delta: String,
    /// Also re-solve at the shifted parameters and compare the laws.
    #[arg(long)]
    recalc: bool,
    /// Seed for the randomized residual spot checks.
    #[arg(long, default_value_t = 0, value_name = "S")]
    seed: u64,
}

#[derive(Args)]
struct HomotopyArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    solver: SolverFlags,
    #[command(flatten)]
    output: OutputFlags,
    #[command(flatten)]
    sim: SimFlags,
    /// Parameter change, space separated for several parameters.
    #[arg(long, value_name = "VEC", allow_hyphen_values = true)]
    delta: String,
    /// Step counts to run, comma separated, e.g. "1,10,50,100".
    #[arg(long, value_name = "LIST")]
    steps: String,
    /// Refit the weights with one Galerkin step after each update.
    #[arg(long)]
    polish: bool,
    /// Also re-solve at the shifted parameters and compare each step count
    /// against the re-solve.
    #[arg(long)]
    recalc: bool,
    /// Seed for the randomized residual spot checks.
    #[arg(long, default_value_t = 0, value_name = "S")]
    seed: u64,
}

#[derive(Args)]
struct LqrArgs {
    #[command(flatten)]
    source: Source,
    /// Parameter change: scalar with --delta-param, else one value per
    /// parameter, space separated.
    #[arg(long, value_name = "VEC", allow_hyphen_values = true)]
    delta: Option<String>,
    /// Apply --delta to this single named parameter.
    #[arg(long, value_name = "NAME")]
    delta_param: Option<String>,
    /// Also solve the Riccati equation at the shifted parameters.
    #[arg(long)]
    recalc: bool,
    /// Output directory for artifacts.
    #[arg(long, default_value = ".", value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    solver: SolverFlags,
    #[command(flatten)]
    output: OutputFlags,
    #[command(flatten)]
    sim: SimFlags,
    /// Reference law: one expression per input channel, comma separated.
    /// Repeat for several laws.
    #[arg(long, value_name = "EXPR[,EXPR]", allow_hyphen_values = true)]
    law: Vec<String>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Cmd::Solve(a) => cmd_solve(a),
        Cmd::Neoc(a) => cmd_neoc(a),
        Cmd::Homotopy(a) => cmd_homotopy(a),
        Cmd::Lqr(a) => cmd_lqr(a),
        Cmd::Compare(a) => cmd_compare(a),
        Cmd::ListBuiltins => {
            cmd_list_builtins();
            Ok(())
        }
    }
}

// ---------------------------------------------------------------- loading

fn load_spec(src: &Source) -> Result<(Arc<ProblemSpec>, Option<String>, Option<String>), CliError> {
    match (&src.builtin, &src.problem) {
        (Some(name), None) => {
            let spec = builtin(name).map_err(usage)?;
            Ok((Arc::new(spec), Some(name.clone()), None))
        }
        (None, Some(path)) => {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
            let spec = load_problem(&text)
                .map_err(|e| usage(format!("{}: {e}", path.display())))?;
            Ok((Arc::new(spec), None, Some(path.display().to_string())))
        }
        (None, None) => Err(usage("pass --builtin NAME or --problem FILE")),
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    }
}

fn build_basis(spec: &ProblemSpec, text: &str) -> Result<Arc<BasisSet>, CliError> {
    let indices = parse_basis_spec(text, spec.state_dim).map_err(usage)?;
    Ok(Arc::new(monomial_basis(spec.state_dim, &indices).map_err(usage)?))
}

fn initial_law(
    spec: &Arc<ProblemSpec>,
    flag: &Option<String>,
) -> Result<(ControlLaw, Vec<String>), CliError> {
    let text = flag.as_deref().ok_or_else(|| {
        usage("an initial control law is required: pass --u0 (or --u0 riccati)")
    })?;
    if text.trim() == "riccati" {
        let lp = LqrProblem::from_spec(spec).map_err(usage)?;
        let sol = care_solve(&lp, &lp.alpha_nominal, None).map_err(|e| {
            usage(format!("no Riccati initial law for this problem: {e}"))
        })?;
        let law = ControlLaw::linear_gain(sol.k).map_err(failure)?;
        return Ok((law, vec!["riccati".into()]));
    }
    let parts: Vec<String> = text.split(',').map(|s| s.trim().to_string()).collect();
    if parts.len() != spec.control_dim {
        return Err(usage(format!(
            "--u0 has {} expressions, problem has {} input channels",
            parts.len(),
            spec.control_dim
        )));
    }
    let exprs = parts
        .iter()
        .map(|s| parse_expr(s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(format!("--u0: {e}")))?;
    let law = ControlLaw::from_exprs(exprs, spec.state_dim)
        .map_err(|e| usage(format!("--u0: {e}")))?;
    Ok((law, parts))
}

fn parse_delta(spec: &ProblemSpec, text: &str) -> Result<Vec<f64>, CliError> {
    let vals = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<Result<Vec<f64>, _>>()
        .map_err(|e| usage(format!("--delta: {e}")))?;
    if vals.len() != spec.param_dim {
        return Err(usage(format!(
            "--delta has {} entries, problem has {} parameters",
            vals.len(),
            spec.param_dim
        )));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(usage("--delta entries must be finite"));
    }
    Ok(vals)
}

fn parse_steps(text: &str) -> Result<Vec<usize>, CliError> {
    let steps = text
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<Vec<usize>, _>>()
        .map_err(|e| usage(format!("--steps: {e}")))?;
    if steps.is_empty() || steps.contains(&0) {
        return Err(usage("--steps needs positive step counts"));
    }
    Ok(steps)
}

// ------------------------------------------------------------- solve core

struct Solved {
    spec: Arc<ProblemSpec>,
    basis: Arc<BasisSet>,
    grid: QuadratureGrid,
    quad_order: usize,
    opts: PolicyOptions,
    u0_texts: Vec<String>,
    solution: HjbSolution,
    law: ControlLaw,
}

fn solve_nominal(src: &Source, sf: &SolverFlags) -> Result<(Solved, RunConfigSource), CliError> {
    let (spec, builtin_name, file_name) = load_spec(src)?;
    let basis = build_basis(&spec, &sf.basis)?;
    let quad_order = sf.quad_order.unwrap_or(basis.max_degree as usize + 2);
    let grid = gauss_grid(&spec.lo, &spec.hi, quad_order).map_err(usage)?;
    let (u0, u0_texts) = initial_law(&spec, &sf.u0)?;
    if sf.max_iter == 0 {
        return Err(usage("--max-iter must be at least 1"));
    }
    if !(sf.tol > 0.0) {
        return Err(usage("--tol must be positive"));
    }
    let opts = PolicyOptions {
        max_iter: sf.max_iter,
        tol_w: sf.tol,
        tol_res: DEFAULT_TOL_RES,
        gate: sf.gate.into(),
    };
    let solution =
        neoc_core::policy_iteration(&spec, &spec.alpha_nominal, &basis, &grid, &u0, &opts)
            .map_err(failure)?;
    let law = solution.law().map_err(failure)?;
    let source = RunConfigSource { builtin_name, file_name };
    Ok((
        Solved { spec, basis, grid, quad_order, opts, u0_texts, solution, law },
        source,
    ))
}

struct RunConfigSource {
    builtin_name: Option<String>,
    file_name: Option<String>,
}

fn base_config(
    command: &str,
    src: &RunConfigSource,
    solved: &Solved,
    out: &OutputFlags,
) -> serde_json::Value {
    json!({
        "command": command,
        "builtin": src.builtin_name,
        "problem_file": src.file_name,
        "basis": solved.basis.exprs.iter().map(|e| e.to_string()).collect::<Vec<_>>(),
        "quad_order": solved.quad_order,
        "max_iter": solved.opts.max_iter,
        "tol": solved.opts.tol_w,
        "u0": solved.u0_texts,
        "gate": match solved.opts.gate {
            GateMode::Enforce => "enforce",
            GateMode::Warn => "warn",
            GateMode::Off => "off",
        },
        "grid_pts": out.grid_pts,
    })
}

fn solution_json(solved: &Solved, seed: u64) -> serde_json::Value {
    let s = &solved.solution;
    json!({
        "alpha": s.alpha,
        "weights": s.weights.as_slice(),
        "iterations": s.iterations,
        "converged": s.converged,
        "weight_change_norms": s.weight_change_norms,
        "residual_norms": s.residual_norms,
        "monotonicity": {
            "pairs_checked": s.monotonicity.pairs_checked,
            "violations": s.monotonicity.violations,
            "worst_relative_increase": s.monotonicity.worst_relative_increase,
        },
        "gate_warnings": s.gate_warnings,
        "spot_checks": spot_checks(solved, seed),
    })
}

/// Pointwise steady-state defect of the solved value function at seeded
/// random interior points; small values corroborate the projected solve.
fn spot_checks(solved: &Solved, seed: u64) -> Vec<serde_json::Value> {
    let spec = &solved.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::with_capacity(8);
    for _ in 0..8 {
        let x: Vec<f64> = spec
            .lo
            .iter()
            .zip(&spec.hi)
            .map(|(&lo, &hi)| rng.random_range(lo..=hi))
            .collect();
        let residual = solved.solution.hjb_residual(&x).expect("point has state dimension");
        checks.push(json!({ "x": x, "residual": residual }));
    }
    checks
}

// ------------------------------------------------------------- grid / csv

fn axis_points(n: usize, requested: usize) -> usize {
    let req = requested.max(2);
    if n <= 1 {
        return req.min(GRID_TOTAL_CAP);
    }
    let mut per = (GRID_TOTAL_CAP as f64).powf(1.0 / n as f64).floor() as usize;
    while per > 2 && (per as f64).powi(n as i32) > GRID_TOTAL_CAP as f64 {
        per -= 1;
    }
    req.min(per.max(2))
}

/// Uniform grid over the domain, flat, row-major with the last axis
/// fastest; matches the comparison report's ordering.
fn uniform_grid(lo: &[f64], hi: &[f64], per_axis: usize) -> Vec<f64> {
    let n = lo.len();
    let total = per_axis.pow(n as u32);
    let mut grid = Vec::with_capacity(total * n);
    let mut idx = vec![0usize; n];
    for _ in 0..total {
        for d in 0..n {
            let t = idx[d] as f64 / (per_axis - 1) as f64;
            grid.push(lo[d] + t * (hi[d] - lo[d]));
        }
        for d in (0..n).rev() {
            idx[d] += 1;
            if idx[d] < per_axis {
                break;
            }
            idx[d] = 0;
        }
    }
    grid
}

fn csv_value_grid(solved: &Solved, per_axis: usize) -> String {
    let n = solved.spec.state_dim;
    let pts = uniform_grid(&solved.spec.lo, &solved.spec.hi, per_axis);
    let mut out = String::new();
    for i in 0..n {
        out.push_str(&format!("x{},", i + 1));
    }
    out.push_str("value\n");
    for x in pts.chunks(n) {
        for v in x {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{}\n", solved.solution.eval_value_unchecked(x)));
    }
    out
}

fn csv_control_grid(spec: &ProblemSpec, law: &ControlLaw, per_axis: usize) -> String {
    let n = spec.state_dim;
    let pc = spec.control_dim;
    let pts = uniform_grid(&spec.lo, &spec.hi, per_axis);
    let mut out = String::new();
    for i in 0..n {
        out.push_str(&format!("x{},", i + 1));
    }
    for c in 0..pc {
        if c > 0 {
            out.push(',');
        }
        out.push_str(&format!("u{}", c + 1));
    }
    out.push('\n');
    let mut scratch = neoc_core::hjb::LawScratch::default();
    let mut u = vec![0.0; pc];
    for x in pts.chunks(n) {
        for v in x {
            out.push_str(&format!("{v},"));
        }
        law.eval_into(x, &mut u, &mut scratch);
        for (c, uv) in u.iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format!("{uv}"));
        }
        out.push('\n');
    }
    out
}

fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| usage(format!("output directory {}: {e}", dir.display())))
}

fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::write(dir.join(name), contents)
        .map_err(|e| failure(format!("writing {name}: {e}")))
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| failure(format!("encoding {name}: {e}")))?;
    text.push('\n');
    write_artifact(dir, name, &text)
}

fn fmt_gain_row(k: &nalgebra::DMatrix<f64>, row: usize) -> String {
    let cells: Vec<String> = (0..k.ncols()).map(|j| format!("{:.6}", k[(row, j)])).collect();
    format!("[{}]", cells.join(", "))
}

// ---------------------------------------------------------------- commands

fn cmd_solve(args: SolveArgs) -> Result<(), CliError> {
    ensure_out_dir(&args.output.out)?;
    let (solved, src) = solve_nominal(&args.source, &args.solver)?;
    let per_axis = axis_points(solved.spec.state_dim, args.output.grid_pts);

    let mut config = base_config("solve", &src, &solved, &args.output);
    config["seed"] = json!(args.seed);
    let doc = json!({
        "config": config,
        "solution": solution_json(&solved, args.seed),
    });
    write_json(&args.output.out, "solution.json", &doc)?;
    write_artifact(&args.output.out, "value_grid.csv", &csv_value_grid(&solved, per_axis))?;
    write_artifact(
        &args.output.out,
        "control_grid.csv",
        &csv_control_grid(&solved.spec, &solved.law, per_axis),
    )?;

    let s = &solved.solution;
    println!(
        "solved in {} iterations ({}), final weight change {:.3e}",
        s.iterations,
        if s.converged { "converged" } else { "iteration cap" },
        s.weight_change_norms.last().copied().unwrap_or(f64::NAN),
    );
    for w in &s.gate_warnings {
        println!("gate warning: {w}");
    }
    Ok(())
}

fn derived_for(spec: &Arc<ProblemSpec>) -> Result<Arc<DerivedProblem>, CliError> {
    Ok(Arc::new(derived_fields(spec).map_err(|e| {
        usage(format!("problem is not differentiable in its parameters: {e}"))
    })?))
}

fn cmd_neoc(args: NeocArgs) -> Result<(), CliError> {
    ensure_out_dir(&args.output.out)?;
    let (solved, src) = solve_nominal(&args.source, &args.solver)?;
    let delta = parse_delta(&solved.spec, &args.delta)?;
    let sim = args.sim.options()?;
    let derived = derived_for(&solved.spec)?;
    let sens = weight_sensitivity(&solved.solution, &derived, &solved.grid).map_err(failure)?;
    let adjusted = neoc_law(&solved.solution, &sens, &derived, &delta).map_err(failure)?;

    let per_axis = axis_points(solved.spec.state_dim, args.output.grid_pts);
    write_artifact(
        &args.output.out,
        "neoc_grid.csv",
        &csv_control_grid(&solved.spec, &adjusted, per_axis),
    )?;

    let mut config = base_config("neoc", &src, &solved, &args.output);
    config["seed"] = json!(args.seed);
    config["delta"] = json!(delta);
    config["recalc"] = json!(args.recalc);
    config["dt"] = json!(sim.dt);
    config["horizon"] = json!(sim.t_max);

    let jr: Vec<Vec<f64>> = (0..sens.j_w_alpha.nrows())
        .map(|i| (0..sens.j_w_alpha.ncols()).map(|l| sens.j_w_alpha[(i, l)]).collect())
        .collect();
    let mut doc = json!({
        "config": config,
        "solution": solution_json(&solved, args.seed),
        "sensitivity": {
            "j_w_alpha": jr,
            "condition": sens.condition,
            "delta": delta,
        },
    });

    if args.recalc {
        let shifted: Vec<f64> = solved
            .spec
            .alpha_nominal
            .iter()
            .zip(&delta)
            .map(|(a, d)| a + d)
            .collect();
        let resolved = neoc_core::policy_iteration(
            &solved.spec,
            &shifted,
            &solved.basis,
            &solved.grid,
            &adjusted,
            &solved.opts,
        )
        .map_err(failure)?;
        let recalc_law = resolved.law().map_err(failure)?;
        let laws = vec![
            ("nominal".to_string(), solved.law.clone()),
            ("adjusted".to_string(), adjusted.clone()),
            ("recalculated".to_string(), recalc_law),
        ];
        let report =
            compare_laws(&solved.spec, &shifted, &laws, per_axis, &sim).map_err(failure)?;
        write_artifact(&args.output.out, "neoc_compare.csv", &report.to_csv())?;
        doc["comparison"] = json!({
            "names": report.names,
            "sup": report.sup,
            "rms": report.rms,
            "probes": report.probes,
            "costs": report.costs,
        });
        println!(
            "sup |adjusted - recalculated| = {:.6}, |nominal - recalculated| = {:.6}",
            report.sup[1][2], report.sup[0][2],
        );
    }

    write_json(&args.output.out, "sensitivity.json", &doc)?;
    println!(
        "sensitivity condition {:.3e}, weight step |J delta|inf = {:.6}",
        sens.condition,
        (&sens.j_w_alpha * nalgebra::DVector::from_column_slice(&delta)).amax(),
    );
    Ok(())
}

fn cmd_homotopy(args: HomotopyArgs) -> Result<(), CliError> {
    ensure_out_dir(&args.output.out)?;
    let steps = parse_steps(&args.steps)?;
    let (solved, src) = solve_nominal(&args.source, &args.solver)?;
    let delta = parse_delta(&solved.spec, &args.delta)?;
    let sim = args.sim.options()?;
    let derived = derived_for(&solved.spec)?;

    let mut config = base_config("homotopy", &src, &solved, &args.output);
    config["seed"] = json!(args.seed);
    config["delta"] = json!(delta);
    config["steps"] = json!(steps);
    config["polish"] = json!(args.polish);
    config["recalc"] = json!(args.recalc);
    config["dt"] = json!(sim.dt);
    config["horizon"] = json!(sim.t_max);

    // Walk every requested step count; a mid-path failure still reports the
    // counts that finished.
    let mut runs: Vec<(usize, HomotopyResult)> = Vec::new();
    let mut abort: Option<String> = None;
    for &n in &steps {
        match homotopy_neoc(&solved.solution, &derived, &solved.grid, &delta, n, args.polish) {
            Ok(r) => runs.push((n, r)),
            Err(e) => {
                abort = Some(e.to_string());
                break;
            }
        }
    }

    let mut per_n: Vec<serde_json::Value> = Vec::new();
    for (n, r) in &runs {
        per_n.push(json!({
            "n_steps": n,
            "alpha": r.alpha,
            "weights": r.weights.as_slice(),
            "condition_max": r.steps.iter().map(|s| s.condition).fold(0.0, f64::max),
            "weight_step_norms": r.steps.iter().map(|s| s.weight_step_norm).collect::<Vec<_>>(),
        }));
    }
    let mut doc = json!({
        "config": config,
        "solution": solution_json(&solved, args.seed),
        "runs": per_n,
        "error": abort,
    });

    if args.recalc && !runs.is_empty() {
        let shifted: Vec<f64> = solved
            .spec
            .alpha_nominal
            .iter()
            .zip(&delta)
            .map(|(a, d)| a + d)
            .collect();
        // The finest completed walk seeds the re-solve.
        let best = runs
            .iter()
            .max_by_key(|(n, _)| *n)
            .map(|(_, r)| r.law.clone())
            .expect("runs nonempty");
        let resolved = neoc_core::policy_iteration(
            &solved.spec,
            &shifted,
            &solved.basis,
            &solved.grid,
            &best,
            &solved.opts,
        )
        .map_err(failure)?;
        let recalc_law = resolved.law().map_err(failure)?;

        let per_axis = axis_points(solved.spec.state_dim, args.output.grid_pts);
        let mut laws: Vec<(String, ControlLaw)> = runs
            .iter()
            .map(|(n, r)| (format!("steps_{n}"), r.law.clone()))
            .collect();
        laws.push(("recalculated".to_string(), recalc_law));
        let report =
            compare_laws(&solved.spec, &shifted, &laws, per_axis, &sim).map_err(failure)?;
        write_artifact(&args.output.out, "homotopy_compare.csv", &report.to_csv())?;

        let last = report.names.len() - 1;
        let mut csv = String::from("n_steps,sup_error,rms_error\n");
        let mut errs = Vec::new();
        for (i, (n, _)) in runs.iter().enumerate() {
            csv.push_str(&format!("{n},{},{}\n", report.sup[i][last], report.rms[i][last]));
            errs.push(json!({
                "n_steps": n,
                "sup_error": report.sup[i][last],
                "rms_error": report.rms[i][last],
            }));
            println!("N = {:>4}: sup error {:.6}", n, report.sup[i][last]);
        }
        write_artifact(&args.output.out, "homotopy_errors.csv", &csv)?;
        doc["errors"] = json!(errs);
    } else {
        for (n, r) in &runs {
            let total: f64 = r.steps.iter().map(|s| s.weight_step_norm).sum();
            println!("N = {n:>4}: total weight step {total:.6}");
        }
    }

    write_json(&args.output.out, "homotopy.json", &doc)?;
    match abort {
        Some(msg) => Err(failure(msg)),
        None => Ok(()),
    }
}

fn cmd_lqr(args: LqrArgs) -> Result<(), CliError> {
    ensure_out_dir(&args.out)?;
    let (spec, builtin_name, file_name) = load_spec(&args.source)?;
    let lp = LqrProblem::from_spec(&spec).map_err(usage)?;

    let report = check_assumptions(&lp, &lp.alpha_nominal).map_err(failure)?;
    if !report.pass() {
        let mut msgs = Vec::new();
        if !report.controllable {
            msgs.push(format!(
                "controllability rank {} < {}",
                report.controllability_rank, report.state_dim
            ));
        }
        if !report.observable {
            msgs.push(format!(
                "observability rank {} < {}",
                report.observability_rank, report.state_dim
            ));
        }
        return Err(failure(msgs.join("; ")));
    }

    let delta = match (&args.delta, &args.delta_param) {
        (None, None) => vec![0.0; lp.param_dim],
        (None, Some(_)) => return Err(usage("--delta-param requires --delta")),
        (Some(text), None) => parse_delta(&spec, text)?,
        (Some(text), Some(name)) => {
            let value: f64 = text
                .trim()
                .parse()
                .map_err(|e| usage(format!("--delta: {e}")))?;
            let idx = lp
                .alpha_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| {
                    usage(format!(
                        "unknown parameter {name:?}; this problem has {:?}",
                        lp.alpha_names
                    ))
                })?;
            let mut v = vec![0.0; lp.param_dim];
            v[idx] = value;
            v
        }
    };

    let nominal = care_solve(&lp, &lp.alpha_nominal, None).map_err(failure)?;
    let mut sens = Vec::with_capacity(lp.param_dim);
    for l in 0..lp.param_dim {
        sens.push(riccati_sensitivity(&lp, &nominal, &lp.alpha_nominal, l).map_err(failure)?);
    }
    let k_ne = neoc_gain(&lp, &nominal, &sens, &delta).map_err(failure)?;

    let recalc = if args.recalc {
        let shifted: Vec<f64> =
            lp.alpha_nominal.iter().zip(&delta).map(|(a, d)| a + d).collect();
        Some(care_solve(&lp, &shifted, None).map_err(failure)?)
    } else {
        None
    };

    for row in 0..lp.control_dim {
        println!("K_nom   = {}", fmt_gain_row(&nominal.k, row));
        println!("K_NE    = {}", fmt_gain_row(&k_ne, row));
        if let Some(r) = &recalc {
            println!("K_recal = {}", fmt_gain_row(&r.k, row));
        }
    }

    let rows = |m: &nalgebra::DMatrix<f64>| -> Vec<Vec<f64>> {
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect()
    };
    let doc = json!({
        "config": {
            "command": "lqr",
            "builtin": builtin_name,
            "problem_file": file_name,
            "delta": delta,
            "delta_param": args.delta_param,
            "recalc": args.recalc,
        },
        "alpha": lp.alpha_nominal,
        "assumptions": {
            "controllability_rank": report.controllability_rank,
            "observability_rank": report.observability_rank,
            "state_dim": report.state_dim,
        },
        "riccati": rows(&nominal.p),
        "iterations": nominal.iterations,
        "k_nom": rows(&nominal.k),
        "k_ne": rows(&k_ne),
        "k_recal": recalc.as_ref().map(|r| rows(&r.k)),
        "riccati_sensitivity": sens.iter().map(&rows).collect::<Vec<_>>(),
    });
    write_json(&args.out, "lqr.json", &doc)
}

fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    ensure_out_dir(&args.output.out)?;
    let (solved, src) = solve_nominal(&args.source, &args.solver)?;
    let sim = args.sim.options()?;

    let mut laws: Vec<(String, ControlLaw)> = vec![("galerkin".to_string(), solved.law.clone())];
    for (i, text) in args.law.iter().enumerate() {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        if parts.len() != solved.spec.control_dim {
            return Err(usage(format!(
                "--law has {} expressions, problem has {} input channels",
                parts.len(),
                solved.spec.control_dim
            )));
        }
        let exprs = parts
            .iter()
            .map(|s| parse_expr(s))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| usage(format!("--law: {e}")))?;
        let law = ControlLaw::from_exprs(exprs, solved.spec.state_dim)
            .map_err(|e| usage(format!("--law: {e}")))?;
        laws.push((format!("ref{}", i + 1), law));
    }

    let per_axis = axis_points(solved.spec.state_dim, args.output.grid_pts);
    let report = compare_laws(&solved.spec, &solved.spec.alpha_nominal, &laws, per_axis, &sim)
        .map_err(failure)?;
    write_artifact(&args.output.out, "compare.csv", &report.to_csv())?;

    let mut config = base_config("compare", &src, &solved, &args.output);
    config["laws"] = json!(args.law);
    config["dt"] = json!(sim.dt);
    config["horizon"] = json!(sim.t_max);
    let doc = json!({
        "config": config,
        "names": report.names,
        "sup": report.sup,
        "rms": report.rms,
        "probes": report.probes,
        "costs": report.costs,
    });
    write_json(&args.output.out, "compare.json", &doc)?;

    for i in 0..report.names.len() {
        for j in (i + 1)..report.names.len() {
            println!(
                "sup |{} - {}| = {:.6} (rms {:.6})",
                report.names[i], report.names[j], report.sup[i][j], report.rms[i][j]
            );
        }
    }
    Ok(())
}

fn cmd_list_builtins() {
    let blurbs = [
        ("scalar_siso", "one state, closed-form optimal law, one parameter"),
        ("bilinear", "one state with state-dependent input map, hard near 0"),
        ("pendulum", "two states, trigonometric drift, two parameters"),
        ("cartpole_lqr", "four states, linear benchmark with friction parameter"),
    ];
    for name in builtin_names() {
        let blurb = blurbs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| *b)
            .unwrap_or("");
        println!("{name:<14} {blurb}");
    }
}
