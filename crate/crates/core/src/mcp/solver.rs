//! Semismooth Newton method on the Fischer–Burmeister reformulation
//! `Φ(z) = [F_eq(z); φ(γ, F_ineq(z))]` with an Armijo line search on
//! `ψ = ½‖Φ‖²`.

use log::{debug, trace};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::problem::{Linearization, McpProblem};
use super::reduced::{ReducedSystem, Treatment};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    /// Bound on `‖F_eq‖_∞`, on sign violations and on `|min(γ, F_ineq)|`
    /// at termination.
    pub tol: f64,
    pub max_iter: usize,
    /// Complementarity tolerance checked on the returned solution.
    pub comp_tol: f64,
    /// Threshold for classifying inequalities as active or inactive.
    pub eps_act: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 100_000,
            comp_tol: 1e-2,
            eps_act: 1e-5,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0)
            || !(self.comp_tol > 0.0)
            || !(self.eps_act > 0.0)
            || self.max_iter == 0
        {
            return Err(Error::InvalidConfig(
                "solver tolerances and iteration limit must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    LineSearchFailure,
}

/// Classification of inequality indices at a solution.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ActivePartition {
    pub active: Vec<usize>,
    pub inactive: Vec<usize>,
    pub degenerate: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct McpSolution {
    pub z: DVector<f64>,
    /// `‖Φ(z)‖_∞`.
    pub residual_norm: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub f_eq: DVector<f64>,
    pub f_ineq: DVector<f64>,
    pub gamma: DVector<f64>,
    pub partition: ActivePartition,
}

impl McpSolution {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    /// Turns a non-converged result into [`Error::SolverFailed`].
    pub fn into_converged(self) -> Result<Self> {
        if self.converged() {
            Ok(self)
        } else {
            Err(Error::SolverFailed {
                status: self.status,
                residual: self.residual_norm,
                iterations: self.iterations,
            })
        }
    }

    /// `‖F_eq‖_∞`.
    pub fn equality_residual(&self) -> f64 {
        self.f_eq.amax()
    }

    /// `max_k |min(γ_k, F_ineq,k)|`.
    pub fn complementarity_residual(&self) -> f64 {
        self.gamma
            .iter()
            .zip(self.f_ineq.iter())
            .map(|(g, f)| g.min(*f).abs())
            .fold(0.0, f64::max)
    }

    /// Most negative of `γ` and `F_ineq`, or 0 when both are nonnegative.
    pub fn sign_violation(&self) -> f64 {
        self.gamma
            .iter()
            .chain(self.f_ineq.iter())
            .map(|v| (-v).max(0.0))
            .fold(0.0, f64::max)
    }
}

/// Splits inequality indices into active (`F ≤ ε`, `γ > ε`), inactive
/// (`γ ≤ ε`, `F > ε`) and degenerate (both `≤ ε`).
pub fn check_strict_complementarity(solution: &McpSolution, eps_act: f64) -> ActivePartition {
    classify(&solution.gamma, &solution.f_ineq, eps_act)
}

fn classify(gamma: &DVector<f64>, f: &DVector<f64>, eps: f64) -> ActivePartition {
    let mut p = ActivePartition::default();
    for k in 0..gamma.len() {
        let (g, fk) = (gamma[k], f[k]);
        if fk <= eps && g > eps {
            p.active.push(k);
        } else if g <= eps && fk > eps {
            p.inactive.push(k);
        } else if g <= eps && fk <= eps {
            p.degenerate.push(k);
        } else {
            // Both positive: complementarity only holds to the solver
            // tolerance, so the index cannot be classified either way.
            p.degenerate.push(k);
        }
    }
    p
}

/// `φ(a, b) = √(a² + b²) − a − b`, evaluated without cancellation.
pub fn fischer_burmeister(a: f64, b: f64) -> f64 {
    smoothed_fb(a, b, 0.0)
}

/// `φ_μ(a, b) = √(a² + b² + 2μ) − a − b`. For `μ > 0` its zeros are the
/// points with `a > 0`, `b > 0` and `ab = μ`.
fn smoothed_fb(a: f64, b: f64, mu: f64) -> f64 {
    let r = if mu > 0.0 {
        (a * a + b * b + 2.0 * mu).sqrt()
    } else {
        a.hypot(b)
    };
    if a + b > 0.0 {
        2.0 * (mu - a * b) / (r + a + b)
    } else {
        r - a - b
    }
}

/// An element of the generalized gradient of `φ_μ`; for `μ = 0` at the
/// origin the one along direction `(1, 1)/√2`.
fn fb_derivative(a: f64, b: f64, mu: f64) -> (f64, f64) {
    let r = if mu > 0.0 {
        (a * a + b * b + 2.0 * mu).sqrt()
    } else {
        a.hypot(b)
    };
    if r > 1e-300 {
        (a / r - 1.0, b / r - 1.0)
    } else {
        let d = std::f64::consts::FRAC_1_SQRT_2 - 1.0;
        (d, d)
    }
}

struct Point {
    z: DVector<f64>,
    lin: Linearization,
    phi: DVector<f64>,
    psi: f64,
    mu: f64,
}

fn fb_vector(gamma: &[f64], f: &DVector<f64>, mu: f64) -> DVector<f64> {
    DVector::from_iterator(
        f.len(),
        gamma
            .iter()
            .zip(f.iter())
            .map(|(&g, &fk)| smoothed_fb(g, fk, mu)),
    )
}

fn merit(f_eq: &DVector<f64>, phi: &DVector<f64>) -> f64 {
    0.5 * (f_eq.norm_squared() + phi.norm_squared())
}

fn terminated(f_eq: &DVector<f64>, gamma: &[f64], f: &DVector<f64>, tol: f64) -> bool {
    f_eq.amax() <= tol
        && gamma
            .iter()
            .zip(f.iter())
            .all(|(&g, &fk)| g >= -tol && fk >= -tol && g.min(fk).abs() <= tol)
}

/// `J_Φ d` for a step `d = (δw, δγ)`.
fn jacobian_times(
    lin: &Linearization,
    da: &[f64],
    db: &[f64],
    n_w: usize,
    d: &DVector<f64>,
) -> DVector<f64> {
    let n_gamma = da.len();
    let mut out = DVector::zeros(n_w + n_gamma);
    for &(r, c, v) in &lin.eq_w {
        out[r] += v * d[c];
    }
    for k in 0..n_gamma {
        let dg = d[n_w + k];
        for &(r, a) in &lin.eq_gamma[k] {
            out[r] += a * dg;
        }
        let rd: f64 = lin.ineq_w[k].iter().map(|&(c, g)| g * d[c]).sum();
        out[n_w + k] = da[k] * dg + db[k] * rd;
    }
    out
}

/// `J_Φᵀ v`.
fn jacobian_transpose_times(
    lin: &Linearization,
    da: &[f64],
    db: &[f64],
    n_w: usize,
    v: &DVector<f64>,
) -> DVector<f64> {
    let n_gamma = da.len();
    let mut out = DVector::zeros(n_w + n_gamma);
    for &(r, c, val) in &lin.eq_w {
        out[c] += val * v[r];
    }
    for k in 0..n_gamma {
        let vk = v[n_w + k];
        let mut acc = da[k] * vk;
        for &(r, a) in &lin.eq_gamma[k] {
            acc += a * v[r];
        }
        out[n_w + k] = acc;
        for &(c, g) in &lin.ineq_w[k] {
            out[c] += db[k] * g * vk;
        }
    }
    out
}

struct NewtonData {
    da: Vec<f64>,
    db: Vec<f64>,
    treatments: Vec<Treatment>,
}

impl NewtonData {
    fn new(gamma: &[f64], f: &DVector<f64>, mu: f64) -> Self {
        let mut da = Vec::with_capacity(f.len());
        let mut db = Vec::with_capacity(f.len());
        let mut treatments = Vec::with_capacity(f.len());
        for (&g, &fk) in gamma.iter().zip(f.iter()) {
            let (a, b) = fb_derivative(g, fk, mu);
            da.push(a);
            db.push(b);
            treatments.push(if a.abs() >= b.abs() {
                Treatment::Eliminate(b / a)
            } else {
                Treatment::Keep(a / b)
            });
        }
        Self { da, db, treatments }
    }
}

/// Right-hand side of the reduced system for `J_Φ d = −Φ`.
fn reduced_rhs(
    sys: &ReducedSystem,
    lin: &Linearization,
    data: &NewtonData,
    phi: &DVector<f64>,
) -> DVector<f64> {
    let n_w = lin.f_eq.len();
    let mut rhs = DVector::zeros(sys.dim());
    rhs.rows_mut(0, n_w).copy_from(&(-&lin.f_eq));
    for (k, t) in data.treatments.iter().enumerate() {
        if let Treatment::Eliminate(_) = t {
            let s = phi[k] / data.da[k];
            for &(r, a) in &lin.eq_gamma[k] {
                rhs[r] += a * s;
            }
        }
    }
    for (i, &k) in sys.kept.iter().enumerate() {
        rhs[n_w + i] = -phi[k] / data.db[k];
    }
    rhs
}

/// Expands a reduced solution into a full step `(δw, δγ)`.
fn expand(
    sys: &ReducedSystem,
    lin: &Linearization,
    data: &NewtonData,
    phi: &DVector<f64>,
    reduced: &DVector<f64>,
) -> DVector<f64> {
    let n_w = lin.f_eq.len();
    let n_gamma = phi.len();
    let mut d = DVector::zeros(n_w + n_gamma);
    d.rows_mut(0, n_w).copy_from(&reduced.rows(0, n_w));
    for (i, &k) in sys.kept.iter().enumerate() {
        d[n_w + k] = reduced[n_w + i];
    }
    for (k, t) in data.treatments.iter().enumerate() {
        if let Treatment::Eliminate(_) = t {
            let rd: f64 = lin.ineq_w[k].iter().map(|&(c, g)| g * d[c]).sum();
            d[n_w + k] = -(phi[k] + data.db[k] * rd) / data.da[k];
        }
    }
    d
}

fn evaluate(problem: &McpProblem, z: DVector<f64>, mu: f64) -> Result<Point> {
    let lin = problem.linearize(&z)?;
    let gamma_start = problem.layout().gamma_start();
    let phi = fb_vector(&z.as_slice()[gamma_start..], &lin.f_ineq, mu);
    let psi = merit(&lin.f_eq, &phi);
    Ok(Point {
        z,
        lin,
        phi,
        psi,
        mu,
    })
}

/// Fraction of the distance to the boundary an interior step may cover.
const BOUNDARY_FRACTION: f64 = 0.995;
/// Initial smoothing parameter of the interior continuation.
const MU_INIT: f64 = 0.1;
/// Smoothing below which the continuation hands over to the plain method.
const MU_FINAL: f64 = 1e-10;
/// Iterations after which the plain method is checked for stagnation.
const STALL_WINDOW: usize = 20;

/// Backtracking along `d` on the merit of `point.mu`; returns the accepted
/// point's `z`. Interior steps keep `γ` positive and do not let a positive
/// `F_ineq` entry drop below `1 − BOUNDARY_FRACTION` of its value.
fn line_search(
    problem: &McpProblem,
    point: &Point,
    d: &DVector<f64>,
    slope: f64,
    interior: bool,
) -> Result<Option<DVector<f64>>> {
    if !(slope < 0.0) {
        return Ok(None);
    }
    let gamma_start = problem.layout().gamma_start();
    let mut alpha: f64 = 1.0;
    if interior {
        for (k, &g) in point.z.as_slice()[gamma_start..].iter().enumerate() {
            let dg = d[gamma_start + k];
            if dg < 0.0 {
                alpha = alpha.min(BOUNDARY_FRACTION * g / -dg);
            }
        }
    }
    while alpha >= 1e-12 {
        let candidate = &point.z + d * alpha;
        let (f_eq, f_ineq) = problem.residual(&candidate)?;
        let keeps_interior = !interior
            || f_ineq
                .iter()
                .zip(point.lin.f_ineq.iter())
                .all(|(&new, &old)| old <= 0.0 || new >= (1.0 - BOUNDARY_FRACTION) * old);
        if keeps_interior {
            let phi = fb_vector(&candidate.as_slice()[gamma_start..], &f_ineq, point.mu);
            let psi = merit(&f_eq, &phi);
            if psi.is_finite() && psi <= point.psi + 1e-4 * alpha * slope {
                return Ok(Some(candidate));
            }
        }
        alpha *= 0.5;
    }
    Ok(None)
}

/// One globalized Newton step on `Φ_μ`, or `None` when no step decreases
/// the merit.
fn newton_step(
    problem: &McpProblem,
    point: &Point,
    interior: bool,
) -> Result<Option<DVector<f64>>> {
    let layout = problem.layout();
    let n_w = layout.n_w();
    let gamma = &point.z.as_slice()[layout.gamma_start()..];
    let data = NewtonData::new(gamma, &point.lin.f_ineq, point.mu);
    let sys = ReducedSystem::build(layout, &point.lin, &data.treatments);
    let rhs = reduced_rhs(&sys, &point.lin, &data, &point.phi);
    let mut phi_full = DVector::zeros(n_w + point.phi.len());
    phi_full.rows_mut(0, n_w).copy_from(&point.lin.f_eq);
    phi_full
        .rows_mut(n_w, point.phi.len())
        .copy_from(&point.phi);
    let slope_of =
        |d: &DVector<f64>| jacobian_times(&point.lin, &data.da, &data.db, n_w, d).dot(&phi_full);

    if let Ok(factored) = sys.factor() {
        let d = expand(&sys, &point.lin, &data, &point.phi, &factored.solve(&rhs));
        if d.iter().all(|v| v.is_finite()) {
            if let Some(z) = line_search(problem, point, &d, slope_of(&d), interior)? {
                return Ok(Some(z));
            }
        }
    }
    let mut rho = 1e-8;
    while rho <= 1e-2 * (1.0 + 1e-12) {
        trace!("regularized Newton step with rho = {rho:e}");
        if let Ok(red) = sys.regularized_least_squares(&rhs, rho) {
            let d = expand(&sys, &point.lin, &data, &point.phi, &red);
            if let Some(z) = line_search(problem, point, &d, slope_of(&d), interior)? {
                return Ok(Some(z));
            }
        }
        rho *= 10.0;
    }
    let g = jacobian_transpose_times(&point.lin, &data.da, &data.db, n_w, &phi_full);
    line_search(problem, point, &(-&g), -g.norm_squared(), interior)
}

enum PhaseEnd {
    Converged,
    Budget,
    Stalled,
    LineSearchFailure,
}

/// Runs the plain semismooth Newton method from `point` until the
/// termination test holds. With `detect_stall`, gives up after
/// `STALL_WINDOW` iterations once the merit has not halved over the last
/// `STALL_WINDOW / 2`.
fn plain_phase(
    problem: &McpProblem,
    point: &mut Point,
    settings: &SolverSettings,
    iterations: &mut usize,
    detect_stall: bool,
) -> Result<PhaseEnd> {
    let gamma_start = problem.layout().gamma_start();
    let mut history = Vec::new();
    loop {
        if terminated(
            &point.lin.f_eq,
            &point.z.as_slice()[gamma_start..],
            &point.lin.f_ineq,
            settings.tol,
        ) {
            return Ok(PhaseEnd::Converged);
        }
        if *iterations >= settings.max_iter {
            return Ok(PhaseEnd::Budget);
        }
        history.push(point.psi);
        if detect_stall
            && history.len() > STALL_WINDOW
            && point.psi > 0.5 * history[history.len() - 1 - STALL_WINDOW / 2]
        {
            return Ok(PhaseEnd::Stalled);
        }
        *iterations += 1;
        trace!(
            "iteration {iterations}: merit {:e}, |F_eq| {:e}, |phi| {:e}",
            point.psi,
            point.lin.f_eq.amax(),
            point.phi.amax()
        );
        match newton_step(problem, point, false)? {
            Some(z) => *point = evaluate(problem, z, 0.0)?,
            None => return Ok(PhaseEnd::LineSearchFailure),
        }
    }
}

/// Interior starting point: multipliers raised so that `γ_k F_k ≈ μ` where
/// `F_k > 0`.
fn interior_start(problem: &McpProblem, z0: &DVector<f64>, mu: f64) -> Result<DVector<f64>> {
    let gamma_start = problem.layout().gamma_start();
    let (_, f_ineq) = problem.residual(z0)?;
    let mut z = z0.clone();
    for (k, &f) in f_ineq.iter().enumerate() {
        let g = &mut z[gamma_start + k];
        let target = if f > 0.0 {
            (mu / f).clamp(1e-8, 1.0)
        } else {
            1.0
        };
        *g = g.max(target);
    }
    Ok(z)
}

/// Smoothing continuation: Newton on `Φ_μ` with interior steps while `μ`
/// shrinks geometrically, then the plain method from the last iterate.
fn continuation_phase(
    problem: &McpProblem,
    z0: &DVector<f64>,
    settings: &SolverSettings,
    iterations: &mut usize,
) -> Result<(Point, PhaseEnd)> {
    let mut mu = MU_INIT;
    let mut point = evaluate(problem, interior_start(problem, z0, mu)?, mu)?;
    while mu > MU_FINAL {
        let mut history = Vec::new();
        while point.phi.amax().max(point.lin.f_eq.amax()) > (10.0 * mu).max(settings.tol) {
            if *iterations >= settings.max_iter {
                return Ok((point, PhaseEnd::Budget));
            }
            history.push(point.psi);
            if history.len() > STALL_WINDOW / 2
                && point.psi > 0.9 * history[history.len() - 1 - STALL_WINDOW / 2]
            {
                return Ok((point, PhaseEnd::Stalled));
            }
            *iterations += 1;
            trace!(
                "iteration {iterations}: smoothing {mu:e}, merit {:e}",
                point.psi
            );
            match newton_step(problem, &point, true)? {
                Some(z) => point = evaluate(problem, z, mu)?,
                None => return Ok((point, PhaseEnd::LineSearchFailure)),
            }
        }
        mu *= 0.1;
        point = evaluate(problem, point.z, mu)?;
    }
    let mut point = evaluate(problem, point.z, 0.0)?;
    let end = plain_phase(problem, &mut point, settings, iterations, true)?;
    Ok((point, end))
}

pub fn solve_mcp(
    problem: &McpProblem,
    z0: &DVector<f64>,
    settings: &SolverSettings,
) -> Result<McpSolution> {
    settings.validate()?;
    if z0.len() != problem.dim() {
        return Err(Error::dims("MCP initial guess", problem.dim(), z0.len()));
    }
    let layout = problem.layout();
    let gamma_start = layout.gamma_start();
    let mut iterations = 0;
    let mut point = evaluate(problem, z0.clone(), 0.0)?;
    let mut end = plain_phase(
        problem,
        &mut point,
        settings,
        &mut iterations,
        layout.n_gamma > 0,
    )?;
    if matches!(end, PhaseEnd::Stalled | PhaseEnd::LineSearchFailure) && layout.n_gamma > 0 {
        debug!("semismooth Newton stalled after {iterations} iterations; switching to smoothing continuation");
        let (p, e) = continuation_phase(problem, z0, settings, &mut iterations)?;
        point = p;
        end = e;
    }
    let status = match end {
        PhaseEnd::Converged => SolveStatus::Converged,
        PhaseEnd::Budget => SolveStatus::MaxIterations,
        PhaseEnd::Stalled | PhaseEnd::LineSearchFailure => SolveStatus::LineSearchFailure,
    };
    let phi = fb_vector(&point.z.as_slice()[gamma_start..], &point.lin.f_ineq, 0.0);
    let residual_norm = point.lin.f_eq.amax().max(phi.amax());
    let gamma = point.z.rows(gamma_start, layout.n_gamma).into_owned();
    let partition = classify(&gamma, &point.lin.f_ineq, settings.eps_act);
    debug!(
        "MCP finished with {status:?} after {iterations} iterations, residual {residual_norm:e}"
    );
    Ok(McpSolution {
        z: point.z,
        residual_norm,
        iterations,
        status,
        f_eq: point.lin.f_eq,
        f_ineq: point.lin.f_ineq,
        gamma,
        partition,
    })
}
