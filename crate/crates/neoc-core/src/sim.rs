//! Closed-loop simulation, cost evaluation, and control-law comparison.
//!
//! The integrator is fixed-step Runge-Kutta 4 on the closed loop
//! xdot = f(x,a) + g(x,a) u(x). Fixed stepping keeps runs reproducible
//! bit for bit; accuracy is the caller's business via `dt`.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::hjb::{ControlLaw, LawScratch};
use crate::problem::{EvalBuf, ProblemSpec};

/// Trajectories leaving a ball of this many domain radii are abandoned.
const ESCAPE_FACTOR: f64 = 10.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("state became non-finite at step {step} (t = {t:.6})")]
    NonFinite { step: usize, t: f64 },
}

/// Why the integrator stopped recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// The state norm fell below the decay tolerance.
    Decayed,
    /// The time horizon was exhausted first.
    Horizon,
    /// The state left the escape ball around the domain.
    Escaped,
}

/// Fixed-step closed-loop trajectory. Sample k sits at time k * dt; states
/// and controls are stored flat, one row per sample.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub state_dim: usize,
    pub control_dim: usize,
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub controls: Vec<f64>,
    pub reason: StopReason,
}

impl Trajectory {
    /// Number of recorded samples.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.state_dim..(k + 1) * self.state_dim]
    }

    pub fn control(&self, k: usize) -> &[f64] {
        &self.controls[k * self.control_dim..(k + 1) * self.control_dim]
    }

    pub fn final_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// Euclidean norm of the state at sample k.
    pub fn state_norm(&self, k: usize) -> f64 {
        self.state(k).iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    /// Step size.
    pub dt: f64,
    /// Time horizon.
    pub t_max: f64,
    /// Stop once the state norm falls to this value.
    pub decay_tol: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            dt: 1e-3,
            t_max: 50.0,
            decay_tol: 1e-8,
        }
    }
}

struct ClosedLoop<'a> {
    p: &'a ProblemSpec,
    alpha: &'a [f64],
    law: &'a ControlLaw,
    scratch: LawScratch,
    buf: EvalBuf,
    f: Vec<f64>,
    g: Vec<f64>,
    u: Vec<f64>,
}

impl<'a> ClosedLoop<'a> {
    fn new(p: &'a ProblemSpec, alpha: &'a [f64], law: &'a ControlLaw) -> Self {
        ClosedLoop {
            p,
            alpha,
            law,
            scratch: LawScratch::default(),
            buf: EvalBuf::default(),
            f: vec![0.0; p.state_dim],
            g: vec![0.0; p.state_dim * p.control_dim],
            u: vec![0.0; p.control_dim],
        }
    }

    /// xdot = f + g u(x) into `out`; leaves the law's control in `self.u`.
    fn deriv(&mut self, x: &[f64], out: &mut [f64]) {
        let n = self.p.state_dim;
        let pc = self.p.control_dim;
        self.law.eval_into(x, &mut self.u, &mut self.scratch);
        self.p.eval_f_into(x, self.alpha, &mut self.buf, &mut self.f);
        self.p.eval_g_into(x, self.alpha, &mut self.buf, &mut self.g);
        for d in 0..n {
            let mut acc = self.f[d];
            for c in 0..pc {
                acc += self.g[d * pc + c] * self.u[c];
            }
            out[d] = acc;
        }
    }
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Integrates the closed loop from `x0` with fixed-step RK4. Stops early
/// when the state norm decays below `opts.decay_tol` or leaves the escape
/// ball of ten domain radii; both stops are recorded in the trajectory, not
/// errors. Non-finite states or controls are errors carrying the step index.
pub fn integrate(
    p: &ProblemSpec,
    alpha: &[f64],
    law: &ControlLaw,
    x0: &[f64],
    opts: &SimOptions,
) -> Result<Trajectory, SimError> {
    let n = p.state_dim;
    let pc = p.control_dim;
    if x0.len() != n {
        return Err(SimError::Invalid(format!(
            "initial state has {} coordinates, state dimension is {}",
            x0.len(),
            n
        )));
    }
    if alpha.len() != p.param_dim {
        return Err(SimError::Invalid(format!(
            "{} parameter values for {} parameters",
            alpha.len(),
            p.param_dim
        )));
    }
    if law.state_dim() != n || law.control_dim() != pc {
        return Err(SimError::Invalid(format!(
            "control law maps {} states to {} inputs, problem needs {} to {}",
            law.state_dim(),
            law.control_dim(),
            n,
            pc
        )));
    }
    if !(opts.dt > 0.0) || !opts.dt.is_finite() || !(opts.t_max >= opts.dt) || opts.decay_tol < 0.0
    {
        return Err(SimError::Invalid(
            "need dt > 0, t_max >= dt, decay_tol >= 0".into(),
        ));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(SimError::Invalid("non-finite initial state".into()));
    }

    let steps = (opts.t_max / opts.dt).round().max(1.0) as usize;
    let escape = ESCAPE_FACTOR * p.domain_radius();
    let mut loopy = ClosedLoop::new(p, alpha, law);

    let mut traj = Trajectory {
        dt: opts.dt,
        state_dim: n,
        control_dim: pc,
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity((steps + 1) * n),
        controls: Vec::with_capacity((steps + 1) * pc),
        reason: StopReason::Horizon,
    };

    let mut x = x0.to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut xs = vec![0.0; n];

    for step in 0..=steps {
        let t = step as f64 * opts.dt;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFinite { step, t });
        }
        // Record the sample with the control the law commands there.
        loopy.deriv(&x, &mut k1);
        if loopy.u.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFinite { step, t });
        }
        traj.times.push(t);
        traj.states.extend_from_slice(&x);
        traj.controls.extend_from_slice(&loopy.u);

        let nx = norm2(&x);
        if nx <= opts.decay_tol {
            traj.reason = StopReason::Decayed;
            break;
        }
        if nx > escape {
            traj.reason = StopReason::Escaped;
            break;
        }
        if step == steps {
            traj.reason = StopReason::Horizon;
            break;
        }

        let h = opts.dt;
        for d in 0..n {
            xs[d] = x[d] + 0.5 * h * k1[d];
        }
        loopy.deriv(&xs, &mut k2);
        for d in 0..n {
            xs[d] = x[d] + 0.5 * h * k2[d];
        }
        loopy.deriv(&xs, &mut k3);
        for d in 0..n {
            xs[d] = x[d] + h * k3[d];
        }
        loopy.deriv(&xs, &mut k4);
        for d in 0..n {
            x[d] += h / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]);
        }
    }

    Ok(traj)
}

/// Accumulated running cost of a trajectory.
#[derive(Debug, Clone, Copy)]
pub struct CostEstimate {
    /// Integral of u^T R u + m over the recorded span; infinite when the
    /// trajectory did not decay, since the tail then dominates.
    pub value: f64,
    /// Bound on the neglected tail past the recorded span, from the locally
    /// fitted decay rate. Infinite when no decay rate could be fitted.
    pub tail_bound: f64,
    /// Whether the trajectory decayed below its tolerance.
    pub decayed: bool,
}

/// Integrates the running cost u^T R u + m along a recorded trajectory with
/// composite Simpson weights (trapezoid on a trailing odd interval). The
/// integrand is sampled at the stored states and controls.
pub fn cost(p: &ProblemSpec, alpha: &[f64], traj: &Trajectory) -> Result<CostEstimate, SimError> {
    if traj.state_dim != p.state_dim || traj.control_dim != p.control_dim {
        return Err(SimError::Invalid(
            "trajectory dimensions do not match the problem".into(),
        ));
    }
    if alpha.len() != p.param_dim {
        return Err(SimError::Invalid(format!(
            "{} parameter values for {} parameters",
            alpha.len(),
            p.param_dim
        )));
    }
    if traj.is_empty() {
        return Err(SimError::Invalid("empty trajectory".into()));
    }
    let pc = p.control_dim;
    let r = &p.r;
    let mut buf = EvalBuf::default();
    let mut ell = Vec::with_capacity(traj.len());
    for k in 0..traj.len() {
        let u = traj.control(k);
        let mut quad = 0.0;
        for a in 0..pc {
            for b in 0..pc {
                quad += u[a] * r[(a, b)] * u[b];
            }
        }
        let m = p.eval_m_buf(traj.state(k), alpha, &mut buf);
        let l = quad + m;
        if !l.is_finite() {
            return Err(SimError::NonFinite {
                step: k,
                t: traj.times[k],
            });
        }
        ell.push(l);
    }

    let truncated = simpson(&ell, traj.dt);
    let decayed = traj.reason == StopReason::Decayed;
    let tail_bound = tail_estimate(traj, &ell);
    Ok(CostEstimate {
        value: if decayed { truncated } else { f64::INFINITY },
        tail_bound,
        decayed,
    })
}

/// Composite Simpson rule over uniformly spaced samples; a trailing odd
/// interval is closed with a trapezoid.
fn simpson(ell: &[f64], dt: f64) -> f64 {
    let k = ell.len() - 1;
    if k == 0 {
        return 0.0;
    }
    let even_end = if k % 2 == 0 { k } else { k - 1 };
    let mut acc = 0.0;
    if even_end >= 2 {
        let mut s = ell[0] + ell[even_end];
        let mut i = 1;
        while i < even_end {
            s += 4.0 * ell[i];
            i += 2;
        }
        let mut i = 2;
        while i < even_end {
            s += 2.0 * ell[i];
            i += 2;
        }
        acc += dt / 3.0 * s;
    }
    if even_end < k {
        acc += 0.5 * dt * (ell[k - 1] + ell[k]);
    }
    acc
}

/// Bound on the cost past the end of the recording. Fits an exponential
/// rate to the trailing state norms; a quadratic-in-state integrand then
/// decays at twice that rate, so the tail is at most ell_end / (2 lambda).
fn tail_estimate(traj: &Trajectory, ell: &[f64]) -> f64 {
    let last = *ell.last().expect("cost called with non-empty trajectory");
    if last == 0.0 {
        return 0.0;
    }
    let k_end = traj.len() - 1;
    let window = 100.min(k_end);
    if window < 2 {
        return f64::INFINITY;
    }
    let mut pts = Vec::with_capacity(window + 1);
    for k in (k_end - window)..=k_end {
        let n = traj.state_norm(k);
        if n > 0.0 {
            pts.push((traj.times[k], n.ln()));
        }
    }
    if pts.len() < 2 {
        return f64::INFINITY;
    }
    let (slope, _, _) = line_fit(&pts);
    let lambda = -slope;
    if lambda > 0.0 && lambda.is_finite() {
        last / (2.0 * lambda)
    } else {
        f64::INFINITY
    }
}

/// Least-squares line through `(t, y)` points: slope, intercept, and R^2.
fn line_fit(pts: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = pts.len() as f64;
    let mean_t = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mut stt = 0.0;
    let mut sty = 0.0;
    let mut syy = 0.0;
    for &(t, y) in pts {
        let dt = t - mean_t;
        let dy = y - mean_y;
        stt += dt * dt;
        sty += dt * dy;
        syy += dy * dy;
    }
    if stt == 0.0 {
        return (0.0, mean_y, 0.0);
    }
    let slope = sty / stt;
    let intercept = mean_y - slope * mean_t;
    let r2 = if syy == 0.0 { 1.0 } else { (sty * sty) / (stt * syy) };
    (slope, intercept, r2)
}

/// Exponential envelope fitted to a trajectory's state norm over a time
/// window: |x(t)| ~ scale * exp(-rate * t) * |x(0)|.
#[derive(Debug, Clone, Copy)]
pub struct DecayFit {
    /// Envelope scale relative to the initial norm.
    pub scale: f64,
    /// Fitted decay rate.
    pub rate: f64,
    /// Coefficient of determination of the log-linear fit.
    pub r_squared: f64,
}

/// Fits a decaying exponential to the state norm over `[t0, t1]`. Returns
/// None when fewer than two samples with positive norm fall in the window.
pub fn decay_fit(traj: &Trajectory, t0: f64, t1: f64) -> Option<DecayFit> {
    let n0 = traj.state_norm(0);
    if n0 == 0.0 {
        return None;
    }
    let mut pts = Vec::new();
    for k in 0..traj.len() {
        let t = traj.times[k];
        if t < t0 || t > t1 {
            continue;
        }
        let n = traj.state_norm(k);
        if n > 0.0 {
            pts.push((t, n.ln()));
        }
    }
    if pts.len() < 2 {
        return None;
    }
    let (slope, intercept, r2) = line_fit(&pts);
    Some(DecayFit {
        scale: (intercept - n0.ln()).exp(),
        rate: -slope,
        r_squared: r2,
    })
}

/// Side-by-side evaluation of several laws on a shared state grid, plus
/// simulated closed-loop costs from the domain face centers.
#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub names: Vec<String>,
    pub state_dim: usize,
    pub control_dim: usize,
    /// Grid points, flat, one row of `state_dim` coordinates per point.
    pub grid: Vec<f64>,
    /// Per law: control values, flat, one row of `control_dim` per point.
    pub controls: Vec<Vec<f64>>,
    /// Pairwise sup-norm distance between laws over the grid.
    pub sup: Vec<Vec<f64>>,
    /// Pairwise root-mean-square distance over the grid.
    pub rms: Vec<Vec<f64>>,
    /// Probe initial states used for the cost comparison.
    pub probes: Vec<Vec<f64>>,
    /// Per law, per probe: simulated closed-loop cost. Infinite when the
    /// trajectory failed to decay or blew up.
    pub costs: Vec<Vec<f64>>,
}

impl ComparisonReport {
    pub fn point(&self, k: usize) -> &[f64] {
        &self.grid[k * self.state_dim..(k + 1) * self.state_dim]
    }

    pub fn points(&self) -> usize {
        self.grid.len() / self.state_dim
    }

    /// Grid and per-law control values as CSV. One row per grid point:
    /// coordinates, each law's control (per channel when the input is
    /// multivariate), then per-pair absolute differences (sup over
    /// channels).
    pub fn to_csv(&self) -> String {
        let n = self.state_dim;
        let pc = self.control_dim;
        let nl = self.names.len();
        let mut out = String::new();
        for i in 0..n {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&format!("x{}", i + 1));
        }
        for name in &self.names {
            if pc == 1 {
                out.push_str(&format!(",{name}"));
            } else {
                for c in 0..pc {
                    out.push_str(&format!(",{name}_u{}", c + 1));
                }
            }
        }
        for i in 0..nl {
            for j in (i + 1)..nl {
                out.push_str(&format!(",|{}-{}|", self.names[i], self.names[j]));
            }
        }
        out.push('\n');
        for k in 0..self.points() {
            let x = self.point(k);
            for (i, v) in x.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&format!("{v}"));
            }
            for l in 0..nl {
                for c in 0..pc {
                    out.push_str(&format!(",{}", self.controls[l][k * pc + c]));
                }
            }
            for i in 0..nl {
                for j in (i + 1)..nl {
                    let mut d = 0.0f64;
                    for c in 0..pc {
                        d = d.max((self.controls[i][k * pc + c] - self.controls[j][k * pc + c]).abs());
                    }
                    out.push_str(&format!(",{d}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates the named laws on a uniform grid over the domain and simulates
/// each from the face-center probes under `sim`, producing pairwise
/// distances and per-probe costs. `points_per_axis` is clamped to at least
/// 2; the total grid is capped at 10^6 points.
pub fn compare_laws(
    p: &ProblemSpec,
    alpha: &[f64],
    laws: &[(String, ControlLaw)],
    points_per_axis: usize,
    sim: &SimOptions,
) -> Result<ComparisonReport, SimError> {
    if laws.is_empty() {
        return Err(SimError::Invalid("no laws to compare".into()));
    }
    if alpha.len() != p.param_dim {
        return Err(SimError::Invalid(format!(
            "{} parameter values for {} parameters",
            alpha.len(),
            p.param_dim
        )));
    }
    for (name, law) in laws {
        if law.state_dim() != p.state_dim || law.control_dim() != p.control_dim {
            return Err(SimError::Invalid(format!(
                "law `{name}` does not match the problem dimensions"
            )));
        }
    }
    let n = p.state_dim;
    let pc = p.control_dim;
    let per_axis = points_per_axis.max(2);
    let total = per_axis.checked_pow(n as u32).filter(|&t| t <= 1_000_000);
    let total = total.ok_or_else(|| {
        SimError::Invalid(format!(
            "{per_axis} points per axis over {n} axes exceeds the grid cap"
        ))
    })?;

    // Row-major sweep, last axis fastest.
    let mut grid = Vec::with_capacity(total * n);
    let mut idx = vec![0usize; n];
    for _ in 0..total {
        for d in 0..n {
            let t = idx[d] as f64 / (per_axis - 1) as f64;
            grid.push(p.lo[d] + t * (p.hi[d] - p.lo[d]));
        }
        for d in (0..n).rev() {
            idx[d] += 1;
            if idx[d] < per_axis {
                break;
            }
            idx[d] = 0;
        }
    }
    debug_assert_eq!(grid.len(), total * n);

    let mut controls = Vec::with_capacity(laws.len());
    for (_, law) in laws {
        let mut vals = Vec::with_capacity(total * pc);
        let mut s = LawScratch::default();
        let mut out = vec![0.0; pc];
        for k in 0..total {
            law.eval_into(&grid[k * n..(k + 1) * n], &mut out, &mut s);
            vals.extend_from_slice(&out);
        }
        controls.push(vals);
    }

    let nl = laws.len();
    let mut sup = vec![vec![0.0f64; nl]; nl];
    let mut rms = vec![vec![0.0f64; nl]; nl];
    for i in 0..nl {
        for j in (i + 1)..nl {
            let mut worst = 0.0f64;
            let mut sumsq = 0.0f64;
            for k in 0..total * pc {
                let d = controls[i][k] - controls[j][k];
                worst = worst.max(d.abs());
                sumsq += d * d;
            }
            let r = (sumsq / (total * pc) as f64).sqrt();
            sup[i][j] = worst;
            sup[j][i] = worst;
            rms[i][j] = r;
            rms[j][i] = r;
        }
    }

    // Closed-loop cost from each face-center probe, at the same parameters.
    let mut probes = Vec::new();
    for axis in 0..n {
        for sign in [1.0, -1.0] {
            let mut x0 = vec![0.0; n];
            for (i, v) in x0.iter_mut().enumerate() {
                *v = 0.5 * (p.lo[i] + p.hi[i]);
            }
            x0[axis] += sign * 0.5 * (p.hi[axis] - p.lo[axis]);
            if norm2(&x0) > 0.0 {
                probes.push(x0);
            }
        }
    }
    let mut costs = Vec::with_capacity(nl);
    for (_, law) in laws {
        let mut row = Vec::with_capacity(probes.len());
        for x0 in &probes {
            let c = match integrate(p, alpha, law, x0, sim) {
                Ok(traj) => cost(p, alpha, &traj)?.value,
                // A blow-up on a probe is an infinite cost for the
                // comparison, not a failure of the comparison itself.
                Err(SimError::NonFinite { .. }) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            row.push(c);
        }
        costs.push(row);
    }

    Ok(ComparisonReport {
        names: laws.iter().map(|(n, _)| n.clone()).collect(),
        state_dim: n,
        control_dim: pc,
        grid,
        controls,
        sup,
        rms,
        probes,
        costs,
    })
}

/// Quadratic form u^T R u, exposed for cost integrands outside this module.
pub fn control_energy(r: &DMatrix<f64>, u: &[f64]) -> f64 {
    let pc = r.nrows();
    let mut quad = 0.0;
    for a in 0..pc {
        for b in 0..pc {
            quad += u[a] * r[(a, b)] * u[b];
        }
    }
    quad
}
