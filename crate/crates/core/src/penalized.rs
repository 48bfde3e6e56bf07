//! Penalized mean-field obstacle system for a fixed penalization parameter.
//!
//! The Hamilton-Jacobi equation is solved pointwise for the density,
//! `theta = g^-1(H(Du, x) + beta_eps(u) - nu Lap u)`, which leaves one
//! equation in `u`:
//!
//! ```text
//! R(u) = -div(D_pH(Du, x) theta) + beta_eps'(u) theta - nu Lap theta - 1
//! ```
//!
//! With `L` the linearization of the Hamilton-Jacobi operator, `R = L^T theta - 1`,
//! and the Jacobian `G^T diag(theta) D2ppH G + L^T diag(dtheta/dy) L + diag(beta'' theta)`
//! is symmetric positive semidefinite. It is singular only when no grid point
//! touches the penalized region, which the Newton shift handles.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::grid::{same_grid, GridField, PeriodicGrid};
use crate::model::{CouplingSpec, ModelSpec, PenalizationSpec, SOURCE};
use crate::sparse::{periodic_band_ordering, BandedLu, SparseMatrix};

/// Starting value substituted for entries of `u_init` sitting exactly on the
/// penalization breakpoint.
pub const BREAKPOINT_NUDGE: f64 = -1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    /// Central finite differences over a coloring of the stencil graph.
    #[default]
    ColoredFd,
    /// Assembled from the linearized Hamilton-Jacobi operator with the
    /// advection coefficients `D_pH(Du, x)` frozen at the current iterate.
    FrozenAdvection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Armijo {
    pub slope_factor: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
}

impl Default for Armijo {
    fn default() -> Self {
        Self { slope_factor: 1e-4, backtrack_factor: 0.5, max_backtracks: 40 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    /// Target for the weighted L2 norm of `R`.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub damping: Armijo,
    pub jacobian_mode: JacobianMode,
    /// `nu = viscosity_coefficient * h`.
    pub viscosity_coefficient: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 100,
            damping: Armijo::default(),
            jacobian_mode: JacobianMode::ColoredFd,
            viscosity_coefficient: 0.0,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(Error::Validation(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if !(self.viscosity_coefficient.is_finite() && self.viscosity_coefficient >= 0.0) {
            return Err(Error::Validation("viscosity_coefficient must be >= 0".into()));
        }
        let d = &self.damping;
        if !(d.backtrack_factor > 0.0 && d.backtrack_factor < 1.0 && d.slope_factor > 0.0 && d.slope_factor < 0.5) {
            return Err(Error::Validation("Armijo parameters out of range".into()));
        }
        Ok(())
    }

    pub fn viscosity(&self, grid: &PeriodicGrid) -> f64 {
        self.viscosity_coefficient * grid.max_spacing()
    }
}

/// One converged (or abandoned) penalized solve.
#[derive(Debug, Clone, PartialEq)]
pub struct PenalizedSolution {
    pub epsilon: f64,
    /// Artificial viscosity `nu` actually used.
    pub viscosity: f64,
    pub u: GridField,
    pub theta: GridField,
    pub residual_norm: f64,
    pub newton_iterations: usize,
    pub line_search_backtracks: usize,
    pub converged: bool,
}

/// JSON snapshot layout of a [`PenalizedSolution`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionSnapshot {
    pub epsilon: f64,
    pub viscosity: f64,
    pub sizes: Vec<usize>,
    pub spacing: Vec<f64>,
    pub u: Vec<f64>,
    pub theta: Vec<f64>,
    pub residual_norm: f64,
    pub newton_iterations: usize,
    pub line_search_backtracks: usize,
    pub converged: bool,
}

impl PenalizedSolution {
    pub fn snapshot(&self) -> SolutionSnapshot {
        let g = &self.u.grid;
        SolutionSnapshot {
            epsilon: self.epsilon,
            viscosity: self.viscosity,
            sizes: g.sizes().to_vec(),
            spacing: (0..g.dims()).map(|j| g.spacing(j)).collect(),
            u: self.u.values.clone(),
            theta: self.theta.values.clone(),
            residual_norm: self.residual_norm,
            newton_iterations: self.newton_iterations,
            line_search_backtracks: self.line_search_backtracks,
            converged: self.converged,
        }
    }

    pub fn from_snapshot(s: SolutionSnapshot) -> Result<Self> {
        let grid = PeriodicGrid::new(&s.sizes)?;
        Ok(Self {
            epsilon: s.epsilon,
            viscosity: s.viscosity,
            u: GridField::new(grid.clone(), s.u)?,
            theta: GridField::new(grid, s.theta)?,
            residual_norm: s.residual_norm,
            newton_iterations: s.newton_iterations,
            line_search_backtracks: s.line_search_backtracks,
            converged: s.converged,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.snapshot())?)
    }
}

/// Density and its sensitivity at every grid point for a given `u`.
struct State {
    grad: Vec<f64>,
    theta: Vec<f64>,
    /// `d theta / d y` with `y` the argument of `g^-1`.
    dtheta: Vec<f64>,
    clamped: bool,
}

/// Discrete penalized system on one grid for one `epsilon`.
pub struct PenalizedProblem<'a> {
    model: &'a ModelSpec,
    grid: PeriodicGrid,
    penalization: PenalizationSpec,
    viscosity: f64,
    potential: Vec<f64>,
    /// Columns each residual entry depends on.
    pattern: Vec<Vec<usize>>,
    colors: Vec<Vec<usize>>,
    ordering: Vec<usize>,
}

impl<'a> PenalizedProblem<'a> {
    pub fn new(model: &'a ModelSpec, grid: &PeriodicGrid, epsilon: f64, viscosity: f64) -> Result<Self> {
        if model.dims != grid.dims() {
            return Err(Error::GridMismatch(format!(
                "model is {}-dimensional but the grid is {}-dimensional",
                model.dims,
                grid.dims()
            )));
        }
        if !(viscosity.is_finite() && viscosity >= 0.0) {
            return Err(domain("viscosity must be >= 0"));
        }
        let penalization = PenalizationSpec::new(epsilon)?;
        let potential = grid.points().map(|x| model.potential_at(&x)).collect();
        let pattern = residual_pattern(grid);
        let colors = color_columns(grid.len(), &pattern);
        Ok(Self {
            model,
            grid: grid.clone(),
            penalization,
            viscosity,
            potential,
            pattern,
            colors,
            ordering: periodic_band_ordering(grid),
        })
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn epsilon(&self) -> f64 {
        self.penalization.epsilon
    }

    pub fn penalization(&self) -> &PenalizationSpec {
        &self.penalization
    }

    pub fn viscosity(&self) -> f64 {
        self.viscosity
    }

    pub fn coloring(&self) -> &[Vec<usize>] {
        &self.colors
    }

    fn coupling(&self) -> &CouplingSpec {
        &self.model.coupling
    }

    fn gradient(&self, u: &[f64]) -> Vec<f64> {
        let n = self.grid.len();
        let mut out = vec![0.0; n * self.grid.dims()];
        for j in 0..self.grid.dims() {
            crate::grid::centered_difference(&self.grid, u, j, &mut out[j * n..(j + 1) * n]);
        }
        out
    }

    fn laplacian(&self, u: &[f64]) -> Vec<f64> {
        let n = self.grid.len();
        let mut out = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        for j in 0..self.grid.dims() {
            crate::grid::second_difference(&self.grid, u, j, &mut tmp);
            out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
        }
        out
    }

    #[inline]
    fn momentum(&self, grad: &[f64], i: usize, p: &mut [f64]) {
        let n = self.grid.len();
        for (j, pj) in p.iter_mut().enumerate() {
            *pj = grad[j * n + i];
        }
    }

    /// Argument of `g^-1` at every point: `H(Du, x) + beta(u) - nu Lap u`.
    fn hj_value(&self, u: &[f64], grad: &[f64]) -> Vec<f64> {
        let d = self.grid.dims();
        let mut p = [0.0; 2];
        let lap = (self.viscosity > 0.0).then(|| self.laplacian(u));
        (0..self.grid.len())
            .map(|i| {
                self.momentum(grad, i, &mut p[..d]);
                let mut y = self.model.hamiltonian.value_with_potential(&p[..d], self.potential[i])
                    + self.penalization.beta(u[i]);
                if let Some(l) = &lap {
                    y -= self.viscosity * l[i];
                }
                y
            })
            .collect()
    }

    fn state(&self, u: &[f64]) -> Result<State> {
        let grad = self.gradient(u);
        let y = self.hj_value(u, &grad);
        let g = self.coupling();
        let floor = g.range_infimum();
        let mut theta = Vec::with_capacity(y.len());
        let mut dtheta = Vec::with_capacity(y.len());
        let mut clamped = false;
        for &yi in &y {
            if !(yi > floor) || !yi.is_finite() {
                return Err(domain(format!("g^-1 undefined at {yi} (range infimum {floor})")));
            }
            let (t, c) = g.invert_clamped(yi);
            if !(t.is_finite() && t > 0.0) {
                return Err(domain(format!("g^-1({yi}) is not a finite positive density")));
            }
            clamped |= c;
            theta.push(t);
            dtheta.push(if c { 0.0 } else { 1.0 / g.g_prime(t) });
        }
        Ok(State { grad, theta, dtheta, clamped })
    }

    fn check_len(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.grid.len() {
            return Err(Error::GridMismatch(format!("{} values for {} grid points", u.len(), self.grid.len())));
        }
        Ok(())
    }

    /// `theta = g^-1(H(Du, x) + beta(u) - nu Lap u)`.
    pub fn theta(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_len(u)?;
        Ok(self.state(u)?.theta)
    }

    fn residual_from_state(&self, u: &[f64], s: &State) -> Vec<f64> {
        let g = &self.grid;
        let n = g.len();
        let d = g.dims();
        let mut out = vec![-SOURCE; n];
        let mut p = [0.0; 2];
        let mut hp = [0.0; 2];
        let mut flux = vec![0.0; n * d];
        for i in 0..n {
            self.momentum(&s.grad, i, &mut p[..d]);
            self.model.hamiltonian.dp_into(&p[..d], &mut hp[..d]);
            for j in 0..d {
                flux[j * n + i] = hp[j] * s.theta[i];
            }
        }
        for j in 0..d {
            let inv = 0.5 / g.spacing(j);
            let f = &flux[j * n..(j + 1) * n];
            for (i, o) in out.iter_mut().enumerate() {
                *o -= (f[g.shift(i, j, 1)] - f[g.shift(i, j, -1)]) * inv;
            }
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o += self.penalization.beta_prime(u[i]) * s.theta[i];
        }
        if self.viscosity > 0.0 {
            let lap = self.laplacian(&s.theta);
            out.iter_mut().zip(&lap).for_each(|(o, l)| *o -= self.viscosity * l);
        }
        out
    }

    pub fn residual(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_len(u)?;
        let s = self.state(u)?;
        Ok(self.residual_from_state(u, &s))
    }

    /// Weighted L2 norm on the grid.
    pub fn norm(&self, v: &[f64]) -> f64 {
        (v.iter().map(|x| x * x).sum::<f64>() * self.grid.cell_volume()).sqrt()
    }

    /// `(L v)_i = D_pH(Du_i, x_i) . (grad v)_i + beta'(u_i) v_i - nu (Lap v)_i`.
    pub fn linearized_hj_operator(&self, u: &[f64]) -> Result<SparseMatrix> {
        self.check_len(u)?;
        let grad = self.gradient(u);
        Ok(self.hj_operator_from_grad(u, &grad))
    }

    fn hj_operator_from_grad(&self, u: &[f64], grad: &[f64]) -> SparseMatrix {
        let g = &self.grid;
        let n = g.len();
        let d = g.dims();
        let mut t = Vec::with_capacity(n * (2 * d + 1));
        let mut p = [0.0; 2];
        let mut hp = [0.0; 2];
        for i in 0..n {
            self.momentum(grad, i, &mut p[..d]);
            self.model.hamiltonian.dp_into(&p[..d], &mut hp[..d]);
            let mut diag = self.penalization.beta_prime(u[i]);
            for j in 0..d {
                let c = hp[j] * 0.5 / g.spacing(j);
                let v = self.viscosity / g.spacing(j).powi(2);
                t.push((i, g.shift(i, j, 1), c - v));
                t.push((i, g.shift(i, j, -1), -c - v));
                diag += 2.0 * v;
            }
            t.push((i, i, diag));
        }
        SparseMatrix::from_triplets(n, n, t)
    }

    /// `(K theta)_i = -div(D_pH(Du, x) theta)_i + beta'(u_i) theta_i - nu (Lap theta)_i`,
    /// assembled from the divergence stencil.
    pub fn kfp_operator(&self, u: &[f64]) -> Result<SparseMatrix> {
        self.check_len(u)?;
        let g = &self.grid;
        let n = g.len();
        let d = g.dims();
        let grad = self.gradient(u);
        let mut t = Vec::with_capacity(n * (2 * d + 1));
        let mut p = [0.0; 2];
        let mut hp = [0.0; 2];
        for i in 0..n {
            let mut diag = self.penalization.beta_prime(u[i]);
            for j in 0..d {
                let (fwd, bwd) = (g.shift(i, j, 1), g.shift(i, j, -1));
                let inv = 0.5 / g.spacing(j);
                let v = self.viscosity / g.spacing(j).powi(2);
                self.momentum(&grad, fwd, &mut p[..d]);
                self.model.hamiltonian.dp_into(&p[..d], &mut hp[..d]);
                t.push((i, fwd, -hp[j] * inv - v));
                self.momentum(&grad, bwd, &mut p[..d]);
                self.model.hamiltonian.dp_into(&p[..d], &mut hp[..d]);
                t.push((i, bwd, hp[j] * inv - v));
                diag += 2.0 * v;
            }
            t.push((i, i, diag));
        }
        Ok(SparseMatrix::from_triplets(n, n, t))
    }

    /// Jacobian of `R` by central differences over the column coloring.
    pub fn jacobian_colored_fd(&self, u: &[f64]) -> Result<SparseMatrix> {
        self.check_len(u)?;
        let n = self.grid.len();
        let mut t = Vec::with_capacity(n * 13);
        let mut plus = u.to_vec();
        let mut minus = u.to_vec();
        let step = |x: f64| 1e-7 * (1.0 + x.abs());
        for color in &self.colors {
            for &c in color {
                plus[c] = u[c] + step(u[c]);
                minus[c] = u[c] - step(u[c]);
            }
            let rp = self.residual(&plus)?;
            let rm = self.residual(&minus)?;
            for &c in color {
                let h = plus[c] - minus[c];
                for &r in &self.pattern[c] {
                    t.push((r, c, (rp[r] - rm[r]) / h));
                }
                plus[c] = u[c];
                minus[c] = u[c];
            }
        }
        Ok(SparseMatrix::from_triplets(n, n, t))
    }

    /// Jacobian of `R` assembled from its symmetric structure.
    pub fn jacobian_assembled(&self, u: &[f64]) -> Result<SparseMatrix> {
        self.check_len(u)?;
        let g = &self.grid;
        let n = g.len();
        let d = g.dims();
        let s = self.state(u)?;
        let l = self.hj_operator_from_grad(u, &s.grad);
        let mut t = Vec::with_capacity(n * 25);
        for k in 0..n {
            // transport part: sum_j G_j^T theta D2ppH G_j, D2ppH = I
            for j in 0..d {
                let w = 0.5 / g.spacing(j);
                let row = [(g.shift(k, j, 1), w), (g.shift(k, j, -1), -w)];
                for &(a, va) in &row {
                    for &(b, vb) in &row {
                        t.push((a, b, s.theta[k] * va * vb));
                    }
                }
            }
            let lk: Vec<(usize, f64)> = l.row(k).collect();
            for &(a, va) in &lk {
                for &(b, vb) in &lk {
                    t.push((a, b, s.dtheta[k] * va * vb));
                }
            }
            t.push((k, k, self.penalization.beta_second(u[k]) * s.theta[k]));
        }
        Ok(SparseMatrix::from_triplets(n, n, t))
    }

    pub fn jacobian(&self, u: &[f64], mode: JacobianMode) -> Result<SparseMatrix> {
        match mode {
            JacobianMode::ColoredFd => self.jacobian_colored_fd(u),
            JacobianMode::FrozenAdvection => self.jacobian_assembled(u),
        }
    }

    /// Damped Newton iteration on `R(u) = 0`.
    pub fn solve(&self, u_init: &[f64], opts: &SolverOptions) -> Result<PenalizedSolution> {
        self.check_len(u_init)?;
        opts.validate()?;
        if u_init.iter().any(|v| !v.is_finite()) {
            return Err(domain("initial guess has non-finite values"));
        }
        let w = self.grid.cell_volume();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() * w;

        let mut u: Vec<f64> = u_init.iter().map(|&v| if v == 0.0 { BREAKPOINT_NUDGE } else { v }).collect();
        let mut state = self.state(&u)?;
        let mut r = self.residual_from_state(&u, &state);
        let mut rnorm = self.norm(&r);
        let mut iterations = 0;
        let mut backtracks = 0;
        let armijo = opts.damping;

        while rnorm > opts.tolerance && iterations < opts.max_iterations {
            iterations += 1;
            let jac = self.jacobian(&u, opts.jacobian_mode)?;
            let mut shift = rnorm.min(1.0);
            let mut accepted = false;
            let mut plateau: Option<(Vec<f64>, State, Vec<f64>)> = None;
            for _attempt in 0..6 {
                let lu = BandedLu::factor(&jac.shifted(shift), &self.ordering).map_err(|zp| {
                    Error::SingularJacobian {
                        iteration: iterations,
                        residual_norm: rnorm,
                        detail: format!(
                            "zero pivot {:.3e} at band position {} (shift {shift:.3e}, epsilon {}, |u|_inf {:.3e}, min theta {:.3e})",
                            zp.value,
                            zp.position,
                            self.epsilon(),
                            u.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                            state.theta.iter().copied().fold(f64::INFINITY, f64::min),
                        ),
                    }
                })?;
                let neg: Vec<f64> = r.iter().map(|v| -v).collect();
                let dir = lu.solve(&neg);
                let slope = dot(&r, &jac.matvec(&dir));
                let f0 = 0.5 * rnorm * rnorm;
                let mut step = 1.0;
                for _ in 0..=armijo.max_backtracks {
                    let trial: Vec<f64> = u.iter().zip(&dir).map(|(a, b)| a + step * b).collect();
                    if let Ok(ts) = self.state(&trial) {
                        let tr = self.residual_from_state(&trial, &ts);
                        let tn = self.norm(&tr);
                        let bound = if slope < 0.0 {
                            f0 + armijo.slope_factor * step * slope
                        } else {
                            (1.0 - 2.0 * armijo.slope_factor * step) * f0
                        };
                        if tn.is_finite() && 0.5 * tn * tn <= bound {
                            u = trial;
                            state = ts;
                            r = tr;
                            rnorm = tn;
                            accepted = true;
                            break;
                        }
                        if plateau.is_none() && tn <= rnorm {
                            plateau = Some((trial, ts, tr));
                        }
                    }
                    step *= armijo.backtrack_factor;
                    backtracks += 1;
                }
                if accepted {
                    break;
                }
                shift = (shift * 100.0).max(1e-8);
            }
            if !accepted {
                // longest non-increasing step on a flat residual
                match plateau {
                    Some((pu, ps, pr)) => {
                        rnorm = self.norm(&pr);
                        u = pu;
                        state = ps;
                        r = pr;
                    }
                    None => break,
                }
            }
        }

        let converged = rnorm <= opts.tolerance;
        if converged && state.clamped {
            return Err(domain(
                "logarithmic overflow guard active at a converged solution; density bound violated",
            ));
        }
        Ok(PenalizedSolution {
            epsilon: self.epsilon(),
            viscosity: self.viscosity,
            u: GridField { grid: self.grid.clone(), values: u },
            theta: GridField { grid: self.grid.clone(), values: state.theta },
            residual_norm: rnorm,
            newton_iterations: iterations,
            line_search_backtracks: backtracks,
            converged,
        })
    }
}

/// Stencil offsets reached by one residual entry: the radius-2 diamond.
fn residual_offsets(dims: usize) -> Vec<[isize; 2]> {
    let mut out = Vec::new();
    let r = 2isize;
    let ys: Vec<isize> = if dims == 2 { (-r..=r).collect() } else { vec![0] };
    for &dy in &ys {
        for dx in -r..=r {
            if dx.abs() + dy.abs() <= r {
                out.push([dx, dy]);
            }
        }
    }
    out
}

/// `pattern[c]` lists the rows depending on column `c` (the diamond is
/// symmetric, so rows of a column and columns of a row coincide).
fn residual_pattern(grid: &PeriodicGrid) -> Vec<Vec<usize>> {
    let offsets = residual_offsets(grid.dims());
    (0..grid.len())
        .map(|c| {
            let mut rows: Vec<usize> = offsets
                .iter()
                .map(|o| {
                    let mut k = grid.shift(c, 0, o[0]);
                    if grid.dims() == 2 {
                        k = grid.shift(k, 1, o[1]);
                    }
                    k
                })
                .collect();
            rows.sort_unstable();
            rows.dedup();
            rows
        })
        .collect()
}

/// Greedy distance-2 coloring: columns sharing a row get different colors.
fn color_columns(n: usize, pattern: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut color_of = vec![usize::MAX; n];
    let mut colors: Vec<Vec<usize>> = Vec::new();
    let mut taken = Vec::new();
    for c in 0..n {
        taken.clear();
        for &r in &pattern[c] {
            for &other in &pattern[r] {
                if color_of[other] != usize::MAX {
                    taken.push(color_of[other]);
                }
            }
        }
        let k = (0..).find(|k| !taken.contains(k)).unwrap();
        if k == colors.len() {
            colors.push(Vec::new());
        }
        colors[k].push(c);
        color_of[c] = k;
    }
    colors
}

/// `theta_i = g^-1(H(grad(u)_i, x_i) + beta_eps(u_i))`.
pub fn recover_theta(model: &ModelSpec, epsilon: f64, u: &GridField) -> Result<GridField> {
    let problem = PenalizedProblem::new(model, &u.grid, epsilon, 0.0)?;
    Ok(GridField { grid: u.grid.clone(), values: problem.theta(&u.values)? })
}

/// Reduced residual `R(u)` with `theta` eliminated.
pub fn residual(model: &ModelSpec, epsilon: f64, u: &GridField, opts: &SolverOptions) -> Result<GridField> {
    let problem = PenalizedProblem::new(model, &u.grid, epsilon, opts.viscosity(&u.grid))?;
    Ok(GridField { grid: u.grid.clone(), values: problem.residual(&u.values)? })
}

pub fn linearized_hj_operator(model: &ModelSpec, epsilon: f64, u: &GridField) -> Result<SparseMatrix> {
    PenalizedProblem::new(model, &u.grid, epsilon, 0.0)?.linearized_hj_operator(&u.values)
}

pub fn kfp_operator(model: &ModelSpec, epsilon: f64, u: &GridField) -> Result<SparseMatrix> {
    PenalizedProblem::new(model, &u.grid, epsilon, 0.0)?.kfp_operator(&u.values)
}

pub fn newton_solve(
    model: &ModelSpec,
    epsilon: f64,
    u_init: &GridField,
    opts: &SolverOptions,
) -> Result<PenalizedSolution> {
    model.validate()?;
    let problem = PenalizedProblem::new(model, &u_init.grid, epsilon, opts.viscosity(&u_init.grid))?;
    problem.solve(&u_init.values, opts)
}

/// Checks that two solutions live on the same grid.
pub fn same_solution_grid(a: &PenalizedSolution, b: &PenalizedSolution) -> Result<()> {
    same_grid(&a.u.grid, &b.u.grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{gradient, integrate};
    use crate::model::{HamiltonianSpec, PotentialTerm};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{E, TAU};

    /// Root of `50 u exp(1 + 25 u^2) = 1` by bisection.
    fn scalar_oracle(eps: f64) -> (f64, f64) {
        let f = |u: f64| u / (2.0 * eps * eps) * (1.0 + u * u / (4.0 * eps * eps)).exp() - 1.0;
        let (mut lo, mut hi) = (0.0, 2.0 * eps);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        let u = 0.5 * (lo + hi);
        (u, (1.0 + u * u / (4.0 * eps * eps)).exp())
    }

    fn grid1(n: usize) -> PeriodicGrid {
        PeriodicGrid::new(&[n]).unwrap()
    }

    fn random_smooth(grid: &PeriodicGrid, rng: &mut ChaCha8Rng, scale: f64) -> GridField {
        let modes: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(0.0..TAU), rng.gen_range(1.0..4.0), rng.gen_range(0.0..3.0)))
            .collect();
        let shift = rng.gen_range(-0.5..0.5);
        GridField::from_fn(grid, |x| {
            shift
                + scale
                    * modes
                        .iter()
                        .map(|&(a, ph, k, ky)| {
                            let y = x.get(1).copied().unwrap_or(0.0);
                            a * (TAU * (k.floor() * x[0] + ky.floor() * y) + ph).cos()
                        })
                        .sum::<f64>()
        })
    }

    #[test]
    fn scalar_oracle_value() {
        let (u, t) = scalar_oracle(0.1);
        assert!((u - 0.0073476).abs() < 1e-7, "{u}");
        assert!((t - 2.72195).abs() < 1e-5, "{t}");
    }

    #[test]
    fn theta_examples() {
        let g = grid1(32);
        let m = ModelSpec::constant(1, 1.7);
        let th = recover_theta(&m, 0.1, &GridField::constant(&g, 0.0)).unwrap();
        assert!(th.values.iter().all(|&t| (t - 1.7f64.exp()).abs() < 1e-13));

        let m = ModelSpec::cosine(1, 1.0, 2.0);
        let th = recover_theta(&m, 0.1, &GridField::constant(&g, -1.0)).unwrap();
        for (t, x) in th.values.iter().zip(g.points()) {
            assert_relative_eq!(*t, (2.0 + (TAU * x[0]).cos()).exp(), max_relative = 1e-13);
        }
        assert_relative_eq!(th.min(), E, max_relative = 1e-13);
    }

    #[test]
    fn residual_examples() {
        let g = grid1(64);
        let m = ModelSpec::constant(1, 1.0);
        let opts = SolverOptions::default();
        let (ustar, _) = scalar_oracle(0.1);
        let r = residual(&m, 0.1, &GridField::constant(&g, ustar), &opts).unwrap();
        assert!(r.values.iter().all(|v| v.abs() < 1e-10));
        let r = residual(&m, 0.1, &GridField::constant(&g, -1.0), &opts).unwrap();
        assert!(r.values.iter().all(|&v| v == -1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ModelSpec::cosine(1, 1.0, 2.0);
        let u = random_smooth(&g, &mut rng, 0.1);
        let p = PenalizedProblem::new(&m, &g, 0.1, 0.0).unwrap();
        let r = GridField { grid: g.clone(), values: p.residual(&u.values).unwrap() };
        let th = p.theta(&u.values).unwrap();
        let flow: f64 = u.values.iter().zip(&th).map(|(&ui, &t)| p.penalization().beta_prime(ui) * t).sum::<f64>()
            * g.cell_volume();
        assert!((integrate(&r) + 1.0 - flow).abs() < 1e-13 * (1.0 + flow));
    }

    #[test]
    fn hj_operator_examples() {
        let g = grid1(16);
        let m = ModelSpec::constant(1, 1.0);
        let l = linearized_hj_operator(&m, 0.1, &GridField::constant(&g, 0.0)).unwrap();
        assert_eq!(l.max_abs(), 0.0);
        let l = linearized_hj_operator(&m, 0.1, &GridField::constant(&g, 0.3)).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(l.get(i, j), if i == j { 10.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn hj_operator_is_derivative_of_hj_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = ModelSpec::cosine(2, 0.5, 1.5);
        let g = PeriodicGrid::new(&[12, 10]).unwrap();
        let p = PenalizedProblem::new(&m, &g, 0.07, 0.0).unwrap();
        let u = random_smooth(&g, &mut rng, 0.2);
        let v = random_smooth(&g, &mut rng, 1.0);
        let l = p.linearized_hj_operator(&u.values).unwrap();
        let hj = |w: &[f64]| p.hj_value(w, &p.gradient(w));
        let d = 1e-6;
        let up: Vec<f64> = u.values.iter().zip(&v.values).map(|(a, b)| a + d * b).collect();
        let um: Vec<f64> = u.values.iter().zip(&v.values).map(|(a, b)| a - d * b).collect();
        let fd: Vec<f64> = hj(&up).iter().zip(hj(&um)).map(|(a, b)| (a - b) / (2.0 * d)).collect();
        let lv = l.matvec(&v.values);
        let num: f64 = fd.iter().zip(&lv).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = lv.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(num / den < 1e-5, "{}", num / den);
    }

    #[test]
    fn kfp_is_transpose_and_conserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = ModelSpec::cosine(2, 1.0, 2.0);
        let g = PeriodicGrid::new(&[16, 16]).unwrap();
        let u = random_smooth(&g, &mut rng, 0.3);
        let p = PenalizedProblem::new(&m, &g, 0.05, 0.0).unwrap();
        let l = p.linearized_hj_operator(&u.values).unwrap();
        let k = p.kfp_operator(&u.values).unwrap();
        assert!(k.max_abs_diff(&l.transpose()) <= 1e-13);
        let ones = vec![1.0; g.len()];
        // column sums of K equal L * 1 = beta'
        let colsum = l.matvec(&ones);
        for (i, c) in colsum.iter().enumerate() {
            assert!((c - p.penalization().beta_prime(u.values[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn kfp_consistency_order() {
        // u = 0.1 sin(2 pi x) - 1 keeps beta' = 0; theta = 2 + sin(2 pi x)
        let err = |n: usize| {
            let g = grid1(n);
            let m = ModelSpec::constant(1, 1.0);
            let u = GridField::from_fn(&g, |x| 0.1 * (TAU * x[0]).sin() - 1.0);
            let th = GridField::from_fn(&g, |x| 2.0 + (TAU * x[0]).sin());
            let k = kfp_operator(&m, 0.1, &u).unwrap();
            let kt = k.matvec(&th.values);
            g.points()
                .zip(&kt)
                .map(|(x, v)| {
                    let s = TAU * x[0];
                    // -(u' theta)' with u' = 0.2 pi cos, theta = 2 + sin
                    let exact = -(0.1 * TAU) * (-TAU * s.sin() * (2.0 + s.sin()) + TAU * s.cos() * s.cos());
                    (v - exact).abs()
                })
                .fold(0.0, f64::max)
        };
        let slope = (err(64) / err(128)).log2();
        assert!(slope >= 1.9, "{slope}");
    }

    #[test]
    fn jacobians_agree_with_directional_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (two_d, visc) in [(false, 0.0), (true, 0.0), (false, 0.01)] {
            let g = if two_d { PeriodicGrid::new(&[10, 12]).unwrap() } else { grid1(40) };
            let m = if two_d { ModelSpec::cosine(2, 0.6, 1.2) } else { ModelSpec::cosine(1, 1.0, 2.0) };
            let p = PenalizedProblem::new(&m, &g, 0.1, visc).unwrap();
            let u = random_smooth(&g, &mut rng, 0.15);
            let v = random_smooth(&g, &mut rng, 1.0);
            let d = 1e-6;
            let up: Vec<f64> = u.values.iter().zip(&v.values).map(|(a, b)| a + d * b).collect();
            let um: Vec<f64> = u.values.iter().zip(&v.values).map(|(a, b)| a - d * b).collect();
            let rp = p.residual(&up).unwrap();
            let rm = p.residual(&um).unwrap();
            let fd: Vec<f64> = rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * d)).collect();
            for mode in [JacobianMode::ColoredFd, JacobianMode::FrozenAdvection] {
                let jv = p.jacobian(&u.values, mode).unwrap().matvec(&v.values);
                let rel = p.norm(&fd.iter().zip(&jv).map(|(a, b)| a - b).collect::<Vec<_>>()) / p.norm(&fd);
                assert!(rel < 1e-5, "{mode:?} two_d={two_d} visc={visc}: {rel}");
            }
            let a = p.jacobian_colored_fd(&u.values).unwrap();
            let b = p.jacobian_assembled(&u.values).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-5 * b.max_abs());
        }
    }

    #[test]
    fn coloring_is_valid() {
        for sizes in [vec![4], vec![7], vec![64], vec![5, 4], vec![16, 16]] {
            let g = PeriodicGrid::new(&sizes).unwrap();
            let pattern = residual_pattern(&g);
            let colors = color_columns(g.len(), &pattern);
            for color in &colors {
                let mut seen = vec![false; g.len()];
                for &c in color {
                    for &r in &pattern[c] {
                        assert!(!seen[r], "{sizes:?}: row {r} hit twice");
                        seen[r] = true;
                    }
                }
            }
            assert!(colors.len() <= 81);
        }
    }

    #[test]
    fn constant_data_newton_matches_oracle() {
        let g = grid1(64);
        let m = ModelSpec::constant(1, 1.0);
        let sol = newton_solve(&m, 0.1, &GridField::constant(&g, 0.0), &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        let (ustar, tstar) = scalar_oracle(0.1);
        assert!(sol.u.values.iter().all(|v| (v - ustar).abs() < 1e-8));
        assert!(sol.theta.values.iter().all(|t| (t - tstar).abs() < 1e-8));
    }

    #[test]
    fn frozen_advection_mode_converges_too() {
        let g = grid1(64);
        let m = ModelSpec::cosine(1, 1.0, 2.0);
        let fd = newton_solve(&m, 0.1, &GridField::constant(&g, 0.0), &SolverOptions::default()).unwrap();
        let opts = SolverOptions { jacobian_mode: JacobianMode::FrozenAdvection, ..Default::default() };
        let an = newton_solve(&m, 0.1, &GridField::constant(&g, 0.0), &opts).unwrap();
        assert!(fd.converged && an.converged);
        let gap = fd.u.values.iter().zip(&an.u.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-9, "{gap}");
    }

    #[test]
    fn mass_identity_and_theta_floor_at_solution() {
        let g = grid1(128);
        let m = ModelSpec::cosine(1, 1.0, 2.0);
        let sol = newton_solve(&m, 0.05, &GridField::constant(&g, 0.0), &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        let p = PenalizedSolution { ..sol.clone() };
        let flow: f64 = p
            .u
            .values
            .iter()
            .zip(&p.theta.values)
            .map(|(&u, &t)| PenalizationSpec::new(0.05).unwrap().beta_prime(u) * t)
            .sum::<f64>()
            * g.cell_volume();
        assert!((flow - 1.0).abs() <= 1e-9, "{flow}");
        assert!(sol.theta.min() >= m.coupling.theta_floor());
    }

    #[test]
    fn viscous_solve_converges() {
        let g = grid1(64);
        let m = ModelSpec::cosine(1, 1.0, 2.0);
        let opts = SolverOptions { viscosity_coefficient: 0.5, ..Default::default() };
        let sol = newton_solve(&m, 0.1, &GridField::constant(&g, 0.0), &opts).unwrap();
        assert!(sol.converged);
        assert_relative_eq!(sol.viscosity, 0.5 / 64.0);
    }

    #[test]
    fn power_coupling_solve() {
        let g = PeriodicGrid::new(&[16, 16]).unwrap();
        let m = ModelSpec::new(
            2,
            HamiltonianSpec::new(vec![PotentialTerm::new(vec![1, 1], 0.5)], 1.0),
            CouplingSpec::Power { alpha: 1.5, theta_shift: 2.0 },
        );
        let sol = newton_solve(&m, 0.1, &GridField::constant(&g, 0.0), &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        assert!(sol.theta.min() >= m.coupling.theta_floor());
        let du = gradient(&sol.u);
        assert!(du.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn escapes_flat_residual_below_obstacle() {
        let g = grid1(64);
        let m = ModelSpec::cosine(1, 1.0, 2.0);
        let opts = SolverOptions::default();
        let a = newton_solve(&m, 0.05, &GridField::constant(&g, 0.0), &opts).unwrap();
        let b = newton_solve(&m, 0.05, &GridField::constant(&g, -0.5), &opts).unwrap();
        assert!(b.converged, "{}", b.residual_norm);
        let gap = a.u.values.iter().zip(&b.u.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-9, "{gap:e}");
    }

    #[test]
    fn iteration_cap_gives_unconverged_result() {
        let g = grid1(32);
        let m = ModelSpec::cosine(1, 1.0, 2.0);
        let opts = SolverOptions { max_iterations: 1, ..Default::default() };
        let sol = newton_solve(&m, 0.1, &GridField::constant(&g, 0.0), &opts).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.newton_iterations, 1);
    }

    #[test]
    fn snapshot_roundtrip() {
        let g = grid1(16);
        let m = ModelSpec::constant(1, 1.0);
        let sol = newton_solve(&m, 0.1, &GridField::constant(&g, 0.0), &SolverOptions::default()).unwrap();
        let json = sol.to_json().unwrap();
        let back = PenalizedSolution::from_snapshot(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, sol);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let g = PeriodicGrid::new(&[8, 8]).unwrap();
        let m = ModelSpec::constant(1, 1.0);
        assert!(matches!(
            newton_solve(&m, 0.1, &GridField::constant(&g, 0.0), &SolverOptions::default()),
            Err(Error::GridMismatch(_))
        ));
    }
}
