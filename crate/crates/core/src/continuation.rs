//! Continuation in the penalization parameter and the limiting obstacle system.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{energy_identity_gap, estimate_report, EstimateReport};
use crate::error::{Error, Result};
use crate::grid::{divergence, gradient, norms, same_grid, GridField, GridVectorField, PeriodicGrid};
use crate::model::{ModelSpec, PenalizationSpec, SOURCE};
use crate::penalized::{PenalizedProblem, PenalizedSolution, SolverOptions};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub factor: f64,
    /// Number of epsilon values, the first being `start`.
    pub steps: usize,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self { start: 0.2, factor: 0.5, steps: 6 }
    }
}

impl EpsilonSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.start.is_finite() && self.start > 0.0) {
            return Err(Error::Validation(format!("schedule start must be > 0, got {}", self.start)));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::Validation(format!("schedule factor must lie in (0, 1), got {}", self.factor)));
        }
        if self.steps == 0 {
            return Err(Error::Validation("schedule needs at least one step".into()));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.steps);
        let mut e = self.start;
        for _ in 0..self.steps {
            out.push(e);
            e *= self.factor;
        }
        out
    }

    pub fn final_epsilon(&self) -> f64 {
        *self.values().last().unwrap()
    }
}

/// Per-epsilon summary; column order is the trace CSV layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epsilon: f64,
    pub residual_norm: f64,
    pub newton_iterations: usize,
    pub int_u_plus: f64,
    pub max_beta_prime: f64,
    pub min_theta: f64,
    pub max_theta: f64,
    pub lip_u: f64,
    pub w22_u: f64,
    pub energy_gap: f64,
    pub viscosity: f64,
}

pub const TRACE_COLUMNS: [&str; 11] = [
    "epsilon",
    "residual_norm",
    "newton_iterations",
    "int_u_plus",
    "max_beta_prime",
    "min_theta",
    "max_theta",
    "lip_u",
    "w22_u",
    "energy_gap",
    "viscosity",
];

impl TraceRow {
    pub fn from_solution(model: &ModelSpec, sol: &PenalizedSolution, est: &EstimateReport) -> Self {
        Self {
            epsilon: sol.epsilon,
            residual_norm: sol.residual_norm,
            newton_iterations: sol.newton_iterations,
            int_u_plus: est.int_u_plus,
            max_beta_prime: est.max_beta_prime,
            min_theta: est.min_theta,
            max_theta: sol.theta.max(),
            lip_u: est.linf_du,
            w22_u: est.w22_u,
            energy_gap: energy_identity_gap(model, sol),
            viscosity: sol.viscosity,
        }
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{:e},{:e},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.epsilon,
            self.residual_norm,
            self.newton_iterations,
            self.int_u_plus,
            self.max_beta_prime,
            self.min_theta,
            self.max_theta,
            self.lip_u,
            self.w22_u,
            self.energy_gap,
            self.viscosity
        )
    }
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = TRACE_COLUMNS.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_row());
        s.push('\n');
    }
    s
}

/// Residuals of the limiting obstacle system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitReport {
    pub contact_tolerance: f64,
    /// `||H(Du, x) - g(theta)||_{L2}`.
    pub hj_residual: f64,
    /// `max(u)^+`.
    pub obstacle_violation: f64,
    /// Largest `<D_pH theta, grad phi> - <1, phi>` over the trial fields, clipped at zero.
    pub kfp_inequality_violation: f64,
    /// `||min(0, 1 + div(D_pH theta))||_{L2}`, pointwise.
    pub kfp_inequality_pointwise: f64,
    /// `||-div(D_pH theta) - 1||_{L2}` over the inactive set.
    pub kfp_equality_residual_inactive: f64,
    /// `int |u| max(0, 1 + div(D_pH theta))`.
    pub complementarity: f64,
    pub trial_fields: usize,
}

pub fn contact_tolerance(final_epsilon: f64) -> f64 {
    (10.0 * final_epsilon).max(1e-6)
}

/// Nonnegative smooth fields for the weak transport inequality: `1`,
/// `1 +- cos(2 pi x_j)` and their products across axes, then `random` fields
/// `exp(sum_k a_k cos(2 pi k.x + phase_k))` drawn from `seed`.
pub fn trial_fields(grid: &PeriodicGrid, random: usize, seed: u64) -> Vec<GridField> {
    let mut out = vec![GridField::constant(grid, 1.0)];
    let factors = [0.0, 1.0, -1.0];
    let dims = grid.dims();
    let combos: Vec<Vec<f64>> = if dims == 1 {
        factors.iter().map(|&a| vec![a]).collect()
    } else {
        factors.iter().flat_map(|&a| factors.iter().map(move |&b| vec![a, b])).collect()
    };
    for c in combos.iter().filter(|c| c.iter().any(|&a| a != 0.0)) {
        out.push(GridField::from_fn(grid, |x| {
            c.iter().zip(x).map(|(&s, &xi)| 1.0 + s * (TAU * xi).cos()).product()
        }));
    }
    let mut r = rng::stream(seed, "trial_fields");
    for _ in 0..random {
        let modes: Vec<(Vec<f64>, f64, f64)> = (0..3)
            .map(|_| {
                let k: Vec<f64> = (0..dims).map(|_| r.gen_range(-3i32..=3) as f64).collect();
                (k, r.gen_range(-1.0..1.0), r.gen_range(0.0..TAU))
            })
            .collect();
        out.push(GridField::from_fn(grid, |x| {
            modes
                .iter()
                .map(|(k, a, ph)| a * (TAU * k.iter().zip(x).map(|(ki, xi)| ki * xi).sum::<f64>() + ph).cos())
                .sum::<f64>()
                .exp()
        }));
    }
    out
}

pub const RANDOM_TRIAL_FIELDS: usize = 16;

fn flux(model: &ModelSpec, u: &GridField, theta: &GridField) -> GridVectorField {
    let grid = &u.grid;
    let n = grid.len();
    let d = grid.dims();
    let du = gradient(u);
    let mut f = GridVectorField::zeros(grid);
    let mut p = [0.0; 2];
    let mut hp = [0.0; 2];
    for i in 0..n {
        for (j, pj) in p[..d].iter_mut().enumerate() {
            *pj = du.values[j * n + i];
        }
        model.hamiltonian.dp_into(&p[..d], &mut hp[..d]);
        for j in 0..d {
            f.values[j * n + i] = hp[j] * theta.values[i];
        }
    }
    f
}

pub fn limit_residuals(
    model: &ModelSpec,
    u: &GridField,
    theta: &GridField,
    contact_tolerance: f64,
    seed: u64,
) -> Result<LimitReport> {
    same_grid(&u.grid, &theta.grid)?;
    let grid = &u.grid;
    let n = grid.len();
    let d = grid.dims();
    let w = grid.cell_volume();
    let du = gradient(u);
    let f = flux(model, u, theta);
    let div = divergence(&f);
    let mut p = [0.0; 2];
    let mut hj = 0.0;
    let mut pointwise = 0.0;
    let mut eq = 0.0;
    let mut comp = 0.0;
    for (i, x) in grid.points().enumerate() {
        for (j, pj) in p[..d].iter_mut().enumerate() {
            *pj = du.values[j * n + i];
        }
        let ham = model.hamiltonian.value_with_potential(&p[..d], model.hamiltonian.potential(&x));
        hj += (ham - model.coupling.g(theta.values[i])).powi(2);
        let slack = SOURCE + div.values[i];
        pointwise += slack.min(0.0).powi(2);
        if u.values[i] < -contact_tolerance {
            eq += slack.powi(2);
        }
        comp += u.values[i].abs() * slack.max(0.0);
    }
    let phis = trial_fields(grid, RANDOM_TRIAL_FIELDS, seed);
    let mut weak = 0.0f64;
    for phi in &phis {
        let gphi = gradient(phi);
        let lhs: f64 = f.values.iter().zip(&gphi.values).map(|(a, b)| a * b).sum::<f64>() * w;
        let rhs: f64 = phi.values.iter().sum::<f64>() * w * SOURCE;
        weak = weak.max(lhs - rhs);
    }
    Ok(LimitReport {
        contact_tolerance,
        hj_residual: (hj * w).sqrt(),
        obstacle_violation: u.max().max(0.0),
        kfp_inequality_violation: weak,
        kfp_inequality_pointwise: (pointwise * w).sqrt(),
        kfp_equality_residual_inactive: (eq * w).sqrt(),
        complementarity: comp * w,
        trial_fields: phis.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitSolution {
    pub u: GridField,
    pub theta: GridField,
    pub contact_tolerance: f64,
    /// `u >= -tau_c`.
    pub contact_set: Vec<bool>,
    /// `u < -tau_c`.
    pub inactive_set: Vec<bool>,
    pub residuals: LimitReport,
    pub schedule_trace: Vec<TraceRow>,
    pub estimates: Vec<EstimateReport>,
    /// Limit-system residuals of every iterate, each with its own tolerance.
    pub step_residuals: Vec<LimitReport>,
    pub solutions: Vec<PenalizedSolution>,
}

impl LimitSolution {
    pub fn final_solution(&self) -> &PenalizedSolution {
        self.solutions.last().unwrap()
    }

    pub fn contact_measure(&self) -> f64 {
        self.contact_set.iter().filter(|&&c| c).count() as f64 * self.u.grid.cell_volume()
    }
}

pub fn run_continuation(
    model: &ModelSpec,
    grid: &PeriodicGrid,
    schedule: &EpsilonSchedule,
    opts: &SolverOptions,
    seed: u64,
) -> Result<LimitSolution> {
    run_continuation_from(model, schedule, opts, seed, &GridField::constant(grid, 0.0))
}

/// Continuation warm-started from `u_init` at the first epsilon.
pub fn run_continuation_from(
    model: &ModelSpec,
    schedule: &EpsilonSchedule,
    opts: &SolverOptions,
    seed: u64,
    u_init: &GridField,
) -> Result<LimitSolution> {
    model.validate()?;
    schedule.validate()?;
    opts.validate()?;
    let grid = &u_init.grid;
    let mut u = u_init.values.clone();
    let mut trace = Vec::new();
    let mut estimates = Vec::new();
    let mut step_residuals = Vec::new();
    let mut solutions = Vec::new();
    for eps in schedule.values() {
        let abort = |trace: &Vec<TraceRow>, source: Error| Error::ContinuationFailed {
            epsilon: eps,
            partial_trace: trace.clone(),
            source: Box::new(source),
        };
        let sol = PenalizedProblem::new(model, grid, eps, opts.viscosity(grid))
            .and_then(|p| p.solve(&u, opts))
            .map_err(|e| abort(&trace, e))?;
        if !sol.converged {
            let e = Error::NotConverged {
                epsilon: eps,
                residual_norm: sol.residual_norm,
                iterations: sol.newton_iterations,
            };
            return Err(abort(&trace, e));
        }
        let est = estimate_report(model, &sol);
        trace.push(TraceRow::from_solution(model, &sol, &est));
        estimates.push(est);
        step_residuals.push(limit_residuals(model, &sol.u, &sol.theta, contact_tolerance(eps), seed)?);
        u.clone_from(&sol.u.values);
        solutions.push(sol);
    }
    let last = solutions.last().unwrap();
    let tau = contact_tolerance(schedule.final_epsilon());
    let residuals = *step_residuals.last().unwrap();
    Ok(LimitSolution {
        u: last.u.clone(),
        theta: last.theta.clone(),
        contact_tolerance: tau,
        contact_set: last.u.values.iter().map(|&v| v >= -tau).collect(),
        inactive_set: last.u.values.iter().map(|&v| v < -tau).collect(),
        residuals,
        schedule_trace: trace,
        estimates,
        step_residuals,
        solutions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendFit {
    /// `+inf` when fewer than two rows have a positive integral.
    pub slope: f64,
    /// Root-mean-square residual of the log-log fit.
    pub residual: f64,
    pub rows_used: usize,
}

/// Least-squares slope of `log int u^+` against `log epsilon`.
pub fn uplus_trend(trace: &[TraceRow]) -> Result<TrendFit> {
    if trace.len() < 3 {
        return Err(Error::Validation(format!("trend fit needs at least 3 rows, got {}", trace.len())));
    }
    let pts: Vec<(f64, f64)> = trace
        .iter()
        .filter(|r| r.int_u_plus > 0.0 && r.epsilon > 0.0)
        .map(|r| (r.epsilon.ln(), r.int_u_plus.ln()))
        .collect();
    Ok(log_log_fit(&pts))
}

fn log_log_fit(pts: &[(f64, f64)]) -> TrendFit {
    if pts.len() < 2 {
        return TrendFit { slope: f64::INFINITY, residual: 0.0, rows_used: pts.len() };
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let residual = (pts.iter().map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2)).sum::<f64>() / k).sqrt();
    TrendFit { slope, residual, rows_used: pts.len() }
}

/// Log-log slope of an arbitrary positive series against epsilon.
pub fn log_log_slope(epsilons: &[f64], values: &[f64]) -> TrendFit {
    let pts: Vec<(f64, f64)> = epsilons
        .iter()
        .zip(values)
        .filter(|(e, v)| **e > 0.0 && **v > 0.0)
        .map(|(e, v)| (e.ln(), v.ln()))
        .collect();
    log_log_fit(&pts)
}

/// True when each of the last `tail` values is at most its predecessor,
/// values at or below `floor` counting as zero.
pub fn tail_nonincreasing(values: &[f64], tail: usize, floor: f64) -> bool {
    let start = values.len().saturating_sub(tail);
    let clip = |v: f64| if v <= floor { 0.0 } else { v };
    values[start..].windows(2).all(|w| clip(w[1]) <= clip(w[0]))
}

/// `max beta_eps(u)` and `max(u)^+` of one iterate.
pub fn penalty_size(sol: &PenalizedSolution) -> (f64, f64) {
    let pen = PenalizationSpec { epsilon: sol.epsilon };
    let b = sol.u.values.iter().map(|&v| pen.beta(v)).fold(0.0, f64::max);
    (b, sol.u.max().max(0.0))
}

/// `||theta||_{W^{1,2}}` of every iterate.
pub fn theta_w12_series(sol: &LimitSolution) -> Vec<f64> {
    sol.solutions.iter().map(|s| norms(&s.theta).w12).collect()
}
