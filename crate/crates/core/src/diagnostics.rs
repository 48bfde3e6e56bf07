//! Estimate quantities, the energy identity and the uniqueness gap.

use serde::{Deserialize, Serialize};

use crate::continuation::LimitSolution;
use crate::error::{Error, Result};
use crate::grid::{gradient, norms, same_grid, GridField};
use crate::model::{CouplingSpec, ModelSpec, PenalizationSpec};
use crate::penalized::PenalizedSolution;

/// Scalars whose boundedness in `epsilon` the estimates assert.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub epsilon: f64,
    pub min_theta: f64,
    pub int_theta: f64,
    pub int_theta_g_theta: f64,
    pub int_abs_u: f64,
    pub int_du2_theta: f64,
    pub w22_u: f64,
    pub int_gprime_dtheta2: f64,
    /// `W^{1,2}` norm of `theta^((alpha + 1) / 2)`.
    pub w12_theta_pow: f64,
    pub w12_theta: f64,
    pub linf_theta: f64,
    pub linf_du: f64,
    pub max_beta_prime: f64,
    pub int_u_plus: f64,
    pub theta_floor_ok: bool,
}

impl EstimateReport {
    /// Named scalar fields in declaration order.
    pub fn scalars(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("epsilon", self.epsilon),
            ("min_theta", self.min_theta),
            ("int_theta", self.int_theta),
            ("int_theta_g_theta", self.int_theta_g_theta),
            ("int_abs_u", self.int_abs_u),
            ("int_du2_theta", self.int_du2_theta),
            ("w22_u", self.w22_u),
            ("int_gprime_dtheta2", self.int_gprime_dtheta2),
            ("w12_theta_pow", self.w12_theta_pow),
            ("w12_theta", self.w12_theta),
            ("linf_theta", self.linf_theta),
            ("linf_du", self.linf_du),
            ("max_beta_prime", self.max_beta_prime),
            ("int_u_plus", self.int_u_plus),
        ]
    }

    pub fn csv_header() -> String {
        let mut cols: Vec<&str> = Self::empty().scalars().iter().map(|(k, _)| *k).collect();
        cols.push("theta_floor_ok");
        cols.join(",")
    }

    pub fn to_csv_row(&self) -> String {
        let mut cols: Vec<String> = self.scalars().iter().map(|(_, v)| format!("{v:e}")).collect();
        cols.push(self.theta_floor_ok.to_string());
        cols.join(",")
    }

    fn empty() -> Self {
        Self {
            epsilon: 0.0,
            min_theta: 0.0,
            int_theta: 0.0,
            int_theta_g_theta: 0.0,
            int_abs_u: 0.0,
            int_du2_theta: 0.0,
            w22_u: 0.0,
            int_gprime_dtheta2: 0.0,
            w12_theta_pow: 0.0,
            w12_theta: 0.0,
            linf_theta: 0.0,
            linf_du: 0.0,
            max_beta_prime: 0.0,
            int_u_plus: 0.0,
            theta_floor_ok: false,
        }
    }
}

fn squared_magnitudes(f: &GridField) -> Vec<f64> {
    let g = gradient(f);
    let n = f.grid.len();
    (0..n).map(|i| (0..f.grid.dims()).map(|j| g.values[j * n + i].powi(2)).sum()).collect()
}

pub fn estimate_report(model: &ModelSpec, sol: &PenalizedSolution) -> EstimateReport {
    estimate_fields(&model.coupling, sol.epsilon, &sol.u, &sol.theta)
}

/// [`estimate_report`] on bare fields.
pub fn estimate_fields(coupling: &CouplingSpec, epsilon: f64, u: &GridField, theta: &GridField) -> EstimateReport {
    let w = u.grid.cell_volume();
    let pen = PenalizationSpec { epsilon };
    let du2 = squared_magnitudes(u);
    let dth2 = squared_magnitudes(theta);
    let sum = |it: &mut dyn Iterator<Item = f64>| it.sum::<f64>() * w;
    let t = &theta.values;
    let power = 0.5 * (coupling.alpha() + 1.0);
    let min_theta = theta.min();
    EstimateReport {
        epsilon,
        min_theta,
        int_theta: sum(&mut t.iter().copied()),
        int_theta_g_theta: sum(&mut t.iter().map(|&x| x * coupling.g(x))),
        int_abs_u: sum(&mut u.values.iter().map(|v| v.abs())),
        int_du2_theta: sum(&mut du2.iter().zip(t).map(|(a, b)| a * b)),
        w22_u: norms(u).w22,
        int_gprime_dtheta2: sum(&mut dth2.iter().zip(t).map(|(a, &b)| a * coupling.g_prime(b))),
        w12_theta_pow: norms(&theta.map(|x| x.powf(power))).w12,
        w12_theta: norms(theta).w12,
        linf_theta: theta.values.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        linf_du: du2.iter().fold(0.0f64, |m, v| m.max(*v)).sqrt(),
        max_beta_prime: u.values.iter().map(|&v| pen.beta_prime(v)).fold(0.0, f64::max),
        int_u_plus: sum(&mut u.values.iter().map(|v| v.max(0.0))),
        theta_floor_ok: min_theta >= coupling.theta_floor() - 1e-12,
    }
}

/// `|int g(theta) theta - int (H - D_pH . Du) theta - int (beta - beta' u) theta - int u|`.
pub fn energy_identity_gap(model: &ModelSpec, sol: &PenalizedSolution) -> f64 {
    let u = &sol.u;
    let grid = &u.grid;
    let n = grid.len();
    let d = grid.dims();
    let pen = PenalizationSpec { epsilon: sol.epsilon };
    let du = gradient(u);
    let h = &model.hamiltonian;
    let mut p = [0.0; 2];
    let mut hp = [0.0; 2];
    let mut total = 0.0;
    for (i, x) in grid.points().enumerate() {
        for (j, pj) in p[..d].iter_mut().enumerate() {
            *pj = du.values[j * n + i];
        }
        h.dp_into(&p[..d], &mut hp[..d]);
        let ham = h.value_with_potential(&p[..d], h.potential(&x));
        let hp_dot_p: f64 = p[..d].iter().zip(&hp[..d]).map(|(a, b)| a * b).sum();
        let th = sol.theta.values[i];
        let ui = u.values[i];
        total += model.coupling.g(th) * th - (ham - hp_dot_p) * th - (pen.beta(ui) - pen.beta_prime(ui) * ui) * th - ui;
    }
    (total * grid.cell_volume()).abs()
}

/// Threshold defining the set `A = {u1 - u2 > tau}`.
pub const UNIQUENESS_SET_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniquenessGap {
    pub set_a_measure: f64,
    pub monotonicity_integral: f64,
    pub gradient_gap: f64,
    pub linf_u_gap: f64,
    pub linf_theta_gap: f64,
}

impl UniquenessGap {
    pub fn csv_header() -> &'static str {
        "set_a_measure,monotonicity_integral,gradient_gap,linf_u_gap,linf_theta_gap"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{:e},{:e},{:e},{:e},{:e}",
            self.set_a_measure, self.monotonicity_integral, self.gradient_gap, self.linf_u_gap, self.linf_theta_gap
        )
    }
}

/// Anything carrying a value function and a density on one grid.
pub trait FieldPair {
    fn u(&self) -> &GridField;
    fn theta(&self) -> &GridField;
}

impl FieldPair for PenalizedSolution {
    fn u(&self) -> &GridField {
        &self.u
    }
    fn theta(&self) -> &GridField {
        &self.theta
    }
}

impl FieldPair for LimitSolution {
    fn u(&self) -> &GridField {
        &self.u
    }
    fn theta(&self) -> &GridField {
        &self.theta
    }
}

/// Pointwise `(g(a) - g(b)) (a - b)`.
pub fn monotonicity_integrand(coupling: &CouplingSpec, a: f64, b: f64) -> f64 {
    (coupling.g(a) - coupling.g(b)) * (a - b)
}

pub fn uniqueness_gap<A: FieldPair + ?Sized, B: FieldPair + ?Sized>(
    model: &ModelSpec,
    first: &A,
    second: &B,
) -> Result<UniquenessGap> {
    let (u1, u2, t1, t2) = (first.u(), second.u(), first.theta(), second.theta());
    same_grid(&u1.grid, &u2.grid)?;
    same_grid(&u1.grid, &t1.grid)?;
    same_grid(&u2.grid, &t2.grid)?;
    let w = u1.grid.cell_volume();
    let diff = u1.zip_map(u2, |a, b| a - b)?;
    let dd = squared_magnitudes(&diff);
    let mut out = UniquenessGap {
        set_a_measure: 0.0,
        monotonicity_integral: 0.0,
        gradient_gap: 0.0,
        linf_u_gap: diff.values.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        linf_theta_gap: t1.values.iter().zip(&t2.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())),
    };
    for (i, &dv) in diff.values.iter().enumerate() {
        if dv > UNIQUENESS_SET_TOLERANCE {
            out.set_a_measure += w;
            out.monotonicity_integral += w * monotonicity_integrand(&model.coupling, t1.values[i], t2.values[i]);
            out.gradient_gap += w * dd[i];
        }
    }
    Ok(out)
}

/// Sweep-ratio threshold for uniform-in-epsilon boundedness.
pub const UNIFORMITY_RATIO: f64 = 2.0;

/// Values at or below this are treated as zero when forming ratios.
pub const NEGLIGIBLE: f64 = 1e-12;

/// Quantities asserted to stay bounded as epsilon decreases.
pub const BOUNDED_QUANTITIES: [&str; 11] = [
    "int_theta",
    "int_theta_g_theta",
    "int_abs_u",
    "int_du2_theta",
    "w22_u",
    "int_gprime_dtheta2",
    "w12_theta_pow",
    "w12_theta",
    "linf_theta",
    "linf_du",
    "max_beta_prime",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityRatio {
    pub name: String,
    pub first: f64,
    pub max: f64,
    pub ratio: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformityVerdict {
    pub threshold: f64,
    pub ratios: Vec<QuantityRatio>,
    pub passed: bool,
}

impl UniformityVerdict {
    pub fn failing(&self) -> Vec<&str> {
        self.ratios.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect()
    }
}

/// Ratio of the sweep maximum to the value at the first (largest) epsilon.
pub fn sweep_ratio(values: &[f64]) -> f64 {
    let first = values[0];
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= NEGLIGIBLE {
        0.0
    } else if first <= NEGLIGIBLE {
        f64::INFINITY
    } else {
        max / first
    }
}

/// Uniform-in-epsilon verdict over reports ordered by decreasing epsilon.
pub fn assumption_constants(reports: &[EstimateReport]) -> Result<UniformityVerdict> {
    if reports.len() < 3 {
        return Err(Error::Validation(format!("need at least 3 reports, got {}", reports.len())));
    }
    let series: Vec<Vec<(&str, f64)>> = reports.iter().map(|r| r.scalars()).collect();
    let ratios: Vec<QuantityRatio> = BOUNDED_QUANTITIES
        .iter()
        .map(|&name| {
            let values: Vec<f64> =
                series.iter().map(|s| s.iter().find(|(k, _)| *k == name).map(|(_, v)| *v).unwrap()).collect();
            let ratio = sweep_ratio(&values);
            QuantityRatio {
                name: name.to_string(),
                first: values[0],
                max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                ratio,
                passed: ratio <= UNIFORMITY_RATIO,
            }
        })
        .collect();
    let passed = ratios.iter().all(|r| r.passed);
    Ok(UniformityVerdict { threshold: UNIFORMITY_RATIO, ratios, passed })
}
