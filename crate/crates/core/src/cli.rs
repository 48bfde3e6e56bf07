//! Run configuration, experiment orchestration and artifact output.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::continuation::{
    contact_tolerance, run_continuation_from, trace_csv, uplus_trend, EpsilonSchedule, LimitSolution, TraceRow,
};
use crate::diagnostics::{
    assumption_constants, energy_identity_gap, estimate_report, uniqueness_gap, UniquenessGap, UniformityVerdict,
};
use crate::error::{Error, Result};
use crate::grid::{GridField, PeriodicGrid};
use crate::model::{alpha_max, check_assumptions, CouplingSpec, HamiltonianSpec, ModelSpec, PenalizationSpec};
use crate::penalized::{newton_solve, PenalizedSolution, SolverOptions, BREAKPOINT_NUDGE};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Solve,
    Continue,
    Sweep,
    Uniqueness,
    Validate,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Solve, Mode::Continue, Mode::Sweep, Mode::Uniqueness, Mode::Validate];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Solve => "solve",
            Mode::Continue => "continue",
            Mode::Sweep => "sweep",
            Mode::Uniqueness => "uniqueness",
            Mode::Validate => "validate",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected one of solve, continue, sweep, uniqueness, validate)"))
    }
}

/// Problem data; the dimension defaults to the grid dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<usize>,
    pub hamiltonian: HamiltonianSpec,
    pub coupling: CouplingSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub dims: usize,
    /// One size per axis, or a single size used on every axis.
    pub sizes: Vec<usize>,
}

impl GridSection {
    pub fn build(&self) -> Result<PeriodicGrid> {
        PeriodicGrid::new(&self.sizes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Emit {
    pub json: bool,
    pub csv: bool,
    pub snapshots: bool,
}

impl Default for Emit {
    fn default() -> Self {
        Self { json: true, csv: true, snapshots: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Grid sizes of each cell.
    pub sizes: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UniquenessSection {
    pub starts: usize,
}

impl Default for UniquenessSection {
    fn default() -> Self {
        Self { starts: 3 }
    }
}

fn default_samples() -> usize {
    2000
}

fn default_output() -> PathBuf {
    PathBuf::from("output")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub model: ModelSection,
    pub grid: GridSection,
    #[serde(default)]
    pub schedule: EpsilonSchedule,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub emit: Emit,
    /// Penalization parameter of a single solve.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub uniqueness: UniquenessSection,
    #[serde(default = "default_samples")]
    pub assumption_samples: usize,
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config { path: path.to_string(), message: message.into() }
}

fn check_sizes(path: &str, dims: usize, sizes: &[usize]) -> Result<()> {
    if sizes.len() != dims {
        return Err(config_error(path, format!("expected {dims} sizes, got {}", sizes.len())));
    }
    PeriodicGrid::new(sizes).map_err(|e| config_error(path, e.to_string()))?;
    Ok(())
}

impl RunConfig {
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec::new(
            self.model.dims.unwrap_or(self.grid.dims),
            self.model.hamiltonian.clone(),
            self.model.coupling,
        )
    }

    /// Fills derived defaults and checks cross-field constraints.
    pub fn resolve(mut self) -> Result<Self> {
        let dims = self.grid.dims;
        if dims == 0 || dims > 2 {
            return Err(config_error("grid.dims", format!("grids support 1 or 2 dimensions, got {dims}")));
        }
        if self.grid.sizes.len() == 1 && dims == 2 {
            self.grid.sizes = vec![self.grid.sizes[0]; 2];
        }
        check_sizes("grid.sizes", dims, &self.grid.sizes)?;
        match self.model.dims {
            Some(d) if d != dims => {
                return Err(config_error("model.dims", format!("model dimension {d} differs from grid dimension {dims}")))
            }
            _ => self.model.dims = Some(dims),
        }
        self.model_spec().validate().map_err(|e| config_error("model", e.to_string()))?;
        self.schedule.validate().map_err(|e| config_error("schedule", e.to_string()))?;
        self.solver.validate().map_err(|e| config_error("solver", e.to_string()))?;
        self.check_mode()?;
        Ok(self)
    }

    fn check_mode(&self) -> Result<()> {
        match self.mode {
            Mode::Solve => {
                let e = self.epsilon.ok_or_else(|| config_error("epsilon", "required in solve mode"))?;
                PenalizationSpec::new(e).map_err(|err| config_error("epsilon", err.to_string()))?;
            }
            Mode::Sweep => {
                let sweep = self.sweep.as_ref().ok_or_else(|| config_error("sweep", "required in sweep mode"))?;
                if sweep.sizes.is_empty() {
                    return Err(config_error("sweep.sizes", "needs at least one cell"));
                }
                for (k, s) in sweep.sizes.iter().enumerate() {
                    check_sizes(&format!("sweep.sizes[{k}]"), self.grid.dims, s)?;
                }
            }
            Mode::Uniqueness if self.uniqueness.starts < 2 => {
                return Err(config_error("uniqueness.starts", "needs at least 2 starts"));
            }
            Mode::Validate if self.assumption_samples == 0 => {
                return Err(config_error("assumption_samples", "must be positive"));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Parses and validates a JSON configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        config_error(&path, e.into_inner().to_string())
    })?;
    raw.resolve()
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| config_error("<file>", format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// Overrides applied on top of a parsed configuration.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

pub fn apply_overrides(mut config: RunConfig, o: &Overrides) -> Result<RunConfig> {
    if let Some(m) = o.mode {
        config.mode = m;
    }
    if let Some(p) = &o.output_dir {
        config.output_dir.clone_from(p);
    }
    if let Some(s) = o.seed {
        config.seed = s;
    }
    config.resolve()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Success,
    SolverFailure(String),
    GateFailure(Vec<String>),
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::SolverFailure(_) => 2,
            Outcome::GateFailure(_) => 3,
        }
    }
}

pub const EXIT_CONFIG: i32 = 1;

/// Named pass/fail checks of one run.
#[derive(Debug, Default, Serialize)]
struct Gates(Vec<Gate>);

#[derive(Debug, Serialize)]
struct Gate {
    name: String,
    passed: bool,
    value: Value,
    limit: Value,
}

impl Gates {
    fn add(&mut self, name: impl Into<String>, passed: bool, value: impl Serialize, limit: impl Serialize) {
        self.0.push(Gate {
            name: name.into(),
            passed,
            value: number(value),
            limit: number(limit),
        });
    }

    fn failures(&self) -> Vec<String> {
        self.0.iter().filter(|g| !g.passed).map(|g| g.name.clone()).collect()
    }

    fn extend_prefixed(&mut self, prefix: &str, other: Gates) {
        for mut g in other.0 {
            g.name = format!("{prefix}/{}", g.name);
            self.0.push(g);
        }
    }
}

fn number(v: impl Serialize) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn finite_or_label(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else if x.is_nan() {
        json!("nan")
    } else if x > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

/// Tolerance on the discrete mass identity.
pub const MASS_TOLERANCE: f64 = 1e-9;
/// Limit residual bound at the final epsilon.
pub const LIMIT_RESIDUAL_BOUND: f64 = 5e-2;
pub const WEAK_INEQUALITY_TOLERANCE: f64 = 1e-8;
pub const UPLUS_SLOPE_MIN: f64 = 0.9;
pub const UNIQUENESS_LINF_TOLERANCE: f64 = 1e-6;
pub const UNIQUENESS_SET_MEASURE_TOLERANCE: f64 = 1e-6;
pub const MONOTONICITY_TOLERANCE: f64 = 1e-10;

pub fn mass_defect(sol: &PenalizedSolution) -> f64 {
    let pen = PenalizationSpec { epsilon: sol.epsilon };
    let total: f64 = sol.u.values.iter().zip(&sol.theta.values).map(|(&u, &t)| pen.beta_prime(u) * t).sum::<f64>()
        * sol.u.grid.cell_volume();
    (total - 1.0).abs()
}

fn solution_summary(model: &ModelSpec, sol: &PenalizedSolution) -> Value {
    json!({
        "epsilon": sol.epsilon,
        "viscosity": sol.viscosity,
        "converged": sol.converged,
        "residual_norm": sol.residual_norm,
        "newton_iterations": sol.newton_iterations,
        "line_search_backtracks": sol.line_search_backtracks,
        "mass_defect": mass_defect(sol),
        "energy_gap": energy_identity_gap(model, sol),
        "estimates": estimate_report(model, sol),
    })
}

fn solution_gates(model: &ModelSpec, sol: &PenalizedSolution, gates: &mut Gates) {
    let floor = model.coupling.theta_floor();
    let min = sol.theta.min();
    gates.add(format!("theta_floor@{}", sol.epsilon), min >= floor, min, floor);
    let m = mass_defect(sol);
    gates.add(format!("mass_identity@{}", sol.epsilon), m <= MASS_TOLERANCE, m, MASS_TOLERANCE);
}

fn limit_field_snapshot(sol: &LimitSolution) -> Value {
    let g = &sol.u.grid;
    json!({
        "sizes": g.sizes(),
        "contact_tolerance": sol.contact_tolerance,
        "u": sol.u.values,
        "theta": sol.theta.values,
        "contact_set": sol.contact_set,
    })
}

fn continuation_report(model: &ModelSpec, sol: &LimitSolution, gates: &mut Gates) -> Value {
    let final_eps = sol.final_solution().epsilon;
    for s in &sol.solutions {
        solution_gates(model, s, gates);
    }
    let r = &sol.residuals;
    let ov_limit = 10.0 * final_eps;
    gates.add("obstacle_violation", r.obstacle_violation <= ov_limit, r.obstacle_violation, ov_limit);
    gates.add(
        "kfp_inequality_weak",
        r.kfp_inequality_violation <= WEAK_INEQUALITY_TOLERANCE,
        r.kfp_inequality_violation,
        WEAK_INEQUALITY_TOLERANCE,
    );
    for (name, v) in [
        ("hj_residual", r.hj_residual),
        ("kfp_equality_residual_inactive", r.kfp_equality_residual_inactive),
        ("complementarity", r.complementarity),
    ] {
        gates.add(name, v <= LIMIT_RESIDUAL_BOUND, v, LIMIT_RESIDUAL_BOUND);
    }
    let trend = uplus_trend(&sol.schedule_trace).ok();
    if let Some(t) = &trend {
        gates.add("uplus_slope", t.slope >= UPLUS_SLOPE_MIN, finite_or_label(t.slope), UPLUS_SLOPE_MIN);
    }
    let verdict: Option<UniformityVerdict> = assumption_constants(&sol.estimates).ok();
    if let Some(v) = &verdict {
        for q in &v.ratios {
            gates.add(format!("uniform_bound:{}", q.name), q.passed, finite_or_label(q.ratio), v.threshold);
        }
    }
    let theta_mean = sol.theta.values.iter().sum::<f64>() / sol.theta.values.len() as f64;
    json!({
        "final_epsilon": final_eps,
        "theta_limit": theta_mean,
        "theta_limit_min": sol.theta.min(),
        "theta_limit_max": sol.theta.max(),
        "u_max": sol.u.max(),
        "u_min": sol.u.min(),
        "contact_tolerance": sol.contact_tolerance,
        "contact_measure": sol.contact_measure(),
        "limit_residuals": sol.residuals,
        "step_residuals": sol.step_residuals,
        "uplus_slope": trend.map(|t| finite_or_label(t.slope)),
        "uplus_fit_residual": trend.map(|t| t.residual),
        "uniformity": verdict.map(|v| json!({
            "threshold": v.threshold,
            "passed": v.passed,
            "ratios": v.ratios.iter().map(|q| json!({
                "name": q.name, "first": q.first, "max": q.max, "ratio": finite_or_label(q.ratio), "passed": q.passed
            })).collect::<Vec<_>>(),
        })),
        "steps": sol.solutions.iter().map(|s| solution_summary(model, s)).collect::<Vec<_>>(),
    })
}

struct Writer {
    dir: PathBuf,
    emit: Emit,
    quiet: bool,
}

impl Writer {
    fn sub(&self, name: &str) -> Self {
        Writer { dir: self.dir.join(name), emit: self.emit, quiet: self.quiet }
    }

    fn ensure(&self) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        Ok(())
    }

    fn report(&self, value: &Value) -> Result<()> {
        if self.emit.json {
            self.ensure()?;
            fs::write(self.dir.join("report.json"), serde_json::to_string_pretty(value)? + "\n")?;
        }
        Ok(())
    }

    fn trace(&self, rows: &[TraceRow]) -> Result<()> {
        if self.emit.csv {
            self.ensure()?;
            fs::write(self.dir.join("trace.csv"), trace_csv(rows))?;
        }
        Ok(())
    }

    fn snapshot(&self, name: &str, value: &Value) -> Result<()> {
        if self.emit.snapshots {
            let d = self.dir.join("fields");
            fs::create_dir_all(&d)?;
            fs::write(d.join(format!("{name}.json")), serde_json::to_string(value)?)?;
        }
        Ok(())
    }

    fn continuation(&self, sol: &LimitSolution) -> Result<()> {
        self.trace(&sol.schedule_trace)?;
        if self.emit.snapshots {
            for (k, s) in sol.solutions.iter().enumerate() {
                self.snapshot(&format!("step_{k:02}"), &serde_json::to_value(s.snapshot())?)?;
            }
            self.snapshot("limit", &limit_field_snapshot(sol))?;
        }
        Ok(())
    }

    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn manifest(config: &RunConfig) -> Value {
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": config.seed,
        "mode": config.mode,
        "timestamp_unix": timestamp,
        "config": config,
    })
}

/// Failure of a solver stage, with whatever rows completed before it.
struct SolverFailure {
    message: String,
    partial_trace: Vec<TraceRow>,
}

fn classify(e: Error) -> std::result::Result<SolverFailure, Error> {
    match e {
        Error::ContinuationFailed { partial_trace, source, epsilon } => Ok(SolverFailure {
            message: format!("continuation aborted at epsilon = {epsilon}: {source}"),
            partial_trace,
        }),
        e @ (Error::NotConverged { .. } | Error::SingularJacobian { .. } | Error::Domain(_)) => {
            Ok(SolverFailure { message: e.to_string(), partial_trace: Vec::new() })
        }
        other => Err(other),
    }
}

/// Executes the configured mode and writes its artifacts under `output_dir`.
pub fn run(config: &RunConfig, quiet: bool) -> Result<Outcome> {
    let w = Writer { dir: config.output_dir.clone(), emit: config.emit, quiet };
    w.ensure()?;
    fs::write(w.dir.join("manifest.json"), serde_json::to_string_pretty(&manifest(config))? + "\n")?;
    w.log(format!("mode {} -> {}", config.mode, w.dir.display()));
    let model = config.model_spec();
    let mut gates = Gates::default();
    let result = match config.mode {
        Mode::Validate => run_validate(config, &model, &mut gates),
        Mode::Solve => run_solve(config, &model, &w, &mut gates),
        Mode::Continue => run_continue(config, &model, &w, &mut gates),
        Mode::Sweep => run_sweep(config, &model, &w, &mut gates),
        Mode::Uniqueness => run_uniqueness(config, &model, &w, &mut gates),
    };
    match result {
        Ok(body) => {
            let failures = gates.failures();
            let status = if failures.is_empty() { "ok" } else { "gate_failure" };
            let report = json!({ "mode": config.mode, "status": status, "gates": gates, "result": body });
            w.report(&report)?;
            if failures.is_empty() {
                w.log("all gates passed");
                Ok(Outcome::Success)
            } else {
                w.log(format!("gate failure: {}", failures.join(", ")));
                Ok(Outcome::GateFailure(failures))
            }
        }
        Err(e) => {
            let f = classify(e)?;
            w.trace(&f.partial_trace)?;
            let report = json!({
                "mode": config.mode,
                "status": "solver_failure",
                "error": f.message,
                "partial_trace": f.partial_trace,
            });
            w.report(&report)?;
            w.log(format!("solver failure: {}", f.message));
            Ok(Outcome::SolverFailure(f.message))
        }
    }
}

fn run_validate(config: &RunConfig, model: &ModelSpec, gates: &mut Gates) -> Result<Value> {
    let report = check_assumptions(model, config.assumption_samples, config.seed)?;
    for c in &report.checks {
        gates.add(format!("assumption:{}", c.name), c.passed, c.passed, true);
    }
    Ok(json!({
        "alpha_max": finite_or_label(alpha_max(model.dims)?),
        "assumptions": report,
    }))
}

fn run_solve(config: &RunConfig, model: &ModelSpec, w: &Writer, gates: &mut Gates) -> Result<Value> {
    let grid = config.grid.build()?;
    let eps = config.epsilon.expect("checked in resolve");
    let sol = newton_solve(model, eps, &GridField::constant(&grid, 0.0), &config.solver)?;
    if !sol.converged {
        return Err(Error::NotConverged {
            epsilon: eps,
            residual_norm: sol.residual_norm,
            iterations: sol.newton_iterations,
        });
    }
    let est = estimate_report(model, &sol);
    w.trace(&[TraceRow::from_solution(model, &sol, &est)])?;
    w.snapshot("solution", &serde_json::to_value(sol.snapshot())?)?;
    solution_gates(model, &sol, gates);
    let residuals = crate::continuation::limit_residuals(model, &sol.u, &sol.theta, contact_tolerance(eps), config.seed)?;
    Ok(json!({ "solution": solution_summary(model, &sol), "limit_residuals": residuals }))
}

fn run_continue(config: &RunConfig, model: &ModelSpec, w: &Writer, gates: &mut Gates) -> Result<Value> {
    let grid = config.grid.build()?;
    let sol = run_continuation_from(model, &config.schedule, &config.solver, config.seed, &GridField::constant(&grid, 0.0))?;
    w.continuation(&sol)?;
    w.log(format!("continuation finished at epsilon {}", sol.final_solution().epsilon));
    Ok(continuation_report(model, &sol, gates))
}

fn cell_label(sizes: &[usize]) -> String {
    let parts: Vec<String> = sizes.iter().map(|s| s.to_string()).collect();
    format!("n{}", parts.join("x"))
}

fn run_sweep(config: &RunConfig, model: &ModelSpec, w: &Writer, gates: &mut Gates) -> Result<Value> {
    let cells = &config.sweep.as_ref().expect("checked in resolve").sizes;
    let results: Vec<Result<LimitSolution>> = std::thread::scope(|scope| {
        let handles: Vec<_> = cells
            .iter()
            .map(|sizes| {
                scope.spawn(move || {
                    let grid = PeriodicGrid::new(sizes)?;
                    run_continuation_from(model, &config.schedule, &config.solver, config.seed, &GridField::constant(&grid, 0.0))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep cell panicked")).collect()
    });
    let mut summary = Vec::new();
    let mut first_failure = None;
    for (sizes, res) in cells.iter().zip(results) {
        let label = cell_label(sizes);
        let cw = w.sub(&label);
        match res {
            Ok(sol) => {
                cw.continuation(&sol)?;
                let mut cell_gates = Gates::default();
                let body = continuation_report(model, &sol, &mut cell_gates);
                let failures = cell_gates.failures();
                cw.report(&json!({
                    "mode": "continue",
                    "status": if failures.is_empty() { "ok" } else { "gate_failure" },
                    "gates": cell_gates,
                    "result": body,
                }))?;
                summary.push(json!({
                    "cell": label,
                    "sizes": sizes,
                    "status": if failures.is_empty() { "ok" } else { "gate_failure" },
                    "failed_gates": failures,
                    "energy_gap": sol.schedule_trace.last().map(|r| r.energy_gap),
                    "theta_limit_min": sol.theta.min(),
                    "limit_residuals": sol.residuals,
                }));
                gates.extend_prefixed(&label, cell_gates);
            }
            Err(e) => {
                let f = classify(e)?;
                cw.trace(&f.partial_trace)?;
                cw.report(&json!({ "mode": "continue", "status": "solver_failure", "error": f.message }))?;
                summary.push(json!({ "cell": label, "sizes": sizes, "status": "solver_failure", "error": f.message }));
                first_failure.get_or_insert(Error::ContinuationFailed {
                    epsilon: f64::NAN,
                    partial_trace: f.partial_trace,
                    source: Box::new(Error::Domain(format!("cell {label}: {}", f.message))),
                });
            }
        }
    }
    if let Some(e) = first_failure {
        return Err(e);
    }
    Ok(json!({ "cells": summary }))
}

/// Initial value functions of the multi-start test: the nudged zero field,
/// a cosine profile and seeded random smooth negative fields.
pub fn uniqueness_starts(grid: &PeriodicGrid, count: usize, seed: u64) -> Vec<GridField> {
    use std::f64::consts::TAU;
    let mut out = vec![
        GridField::constant(grid, BREAKPOINT_NUDGE),
        GridField::from_fn(grid, |x| -0.5 - 0.1 * (TAU * x[0]).cos()),
    ];
    for k in 2..count {
        let mut r = rng::substream(seed, "uniqueness_starts", k as u64);
        let modes: Vec<(Vec<f64>, f64, f64)> = (0..4)
            .map(|_| {
                let f: Vec<f64> = (0..grid.dims()).map(|_| r.gen_range(-3i32..=3) as f64).collect();
                (f, r.gen_range(-0.2..0.2), r.gen_range(0.0..TAU))
            })
            .collect();
        let level = modes.iter().map(|m| m.1.abs()).sum::<f64>() + r.gen_range(0.05..1.0);
        out.push(GridField::from_fn(grid, |x| {
            -level
                + modes
                    .iter()
                    .map(|(f, a, ph)| a * (TAU * f.iter().zip(x).map(|(k, xi)| k * xi).sum::<f64>() + ph).cos())
                    .sum::<f64>()
        }));
    }
    out.truncate(count);
    out
}

fn run_uniqueness(config: &RunConfig, model: &ModelSpec, w: &Writer, gates: &mut Gates) -> Result<Value> {
    let grid = config.grid.build()?;
    let starts = uniqueness_starts(&grid, config.uniqueness.starts, config.seed);
    let mut runs = Vec::new();
    for (k, init) in starts.iter().enumerate() {
        let sol = run_continuation_from(model, &config.schedule, &config.solver, config.seed, init)?;
        let rw = w.sub(&format!("runs/start_{k}"));
        rw.trace(&sol.schedule_trace)?;
        if config.emit.snapshots {
            rw.snapshot("limit", &limit_field_snapshot(&sol))?;
        }
        w.log(format!("start {k} finished"));
        runs.push(sol);
    }
    w.trace(&runs[0].schedule_trace)?;
    let mut pairs = Vec::new();
    let mut worst = UniquenessGap {
        set_a_measure: 0.0,
        monotonicity_integral: 0.0,
        gradient_gap: 0.0,
        linf_u_gap: 0.0,
        linf_theta_gap: 0.0,
    };
    for i in 0..runs.len() {
        for j in 0..runs.len() {
            if i == j {
                continue;
            }
            let gap = uniqueness_gap(model, &runs[i], &runs[j])?;
            worst.set_a_measure = worst.set_a_measure.max(gap.set_a_measure);
            worst.monotonicity_integral = worst.monotonicity_integral.max(gap.monotonicity_integral);
            worst.gradient_gap = worst.gradient_gap.max(gap.gradient_gap);
            worst.linf_u_gap = worst.linf_u_gap.max(gap.linf_u_gap);
            worst.linf_theta_gap = worst.linf_theta_gap.max(gap.linf_theta_gap);
            pairs.push(json!({ "first": i, "second": j, "gap": gap }));
        }
    }
    gates.add("linf_u_gap", worst.linf_u_gap <= UNIQUENESS_LINF_TOLERANCE, worst.linf_u_gap, UNIQUENESS_LINF_TOLERANCE);
    gates.add(
        "set_a_measure",
        worst.set_a_measure <= UNIQUENESS_SET_MEASURE_TOLERANCE,
        worst.set_a_measure,
        UNIQUENESS_SET_MEASURE_TOLERANCE,
    );
    gates.add(
        "monotonicity_integral",
        worst.monotonicity_integral <= MONOTONICITY_TOLERANCE,
        worst.monotonicity_integral,
        MONOTONICITY_TOLERANCE,
    );
    for r in &runs {
        for s in &r.solutions {
            solution_gates(model, s, gates);
        }
    }
    Ok(json!({
        "starts": runs.len(),
        "final_epsilon": config.schedule.final_epsilon(),
        "max_gap": worst,
        "pairs": pairs,
    }))
}
