//! Sampled verification of the standing assumptions on `H` and `g`.

use rand::Rng;
use serde::Serialize;

use super::{alpha_max, eval_hamiltonian, ModelSpec};
use crate::error::{Error, Result};
use crate::rng;

/// Sample at which a check failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub name: String,
    pub passed: bool,
    /// Fitted constants, in the order documented by `name`.
    pub fitted: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub dims: usize,
    pub sample_count: usize,
    pub seed: u64,
    pub all_passed: bool,
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn first_failure(&self) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| !c.passed)
    }
}

/// Growth constants `C0` at which `C0 theta <= g(theta) theta / 2 + C1` is fitted.
const GROWTH_C0: [f64; 5] = [0.5, 1.0, 2.0, 5.0, 10.0];
const MOMENTUM_BOUND: f64 = 10.0;
const THETA_MAX: f64 = 10.0;

struct Sample {
    p: Vec<f64>,
    x: Vec<f64>,
    theta: f64,
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

fn frobenius(m: &[f64]) -> f64 {
    norm2(m).sqrt()
}

/// Smallest eigenvalue of a symmetric row-major matrix; closed form up to
/// 2x2, Gershgorin lower bound beyond.
fn min_eigenvalue(m: &[f64], n: usize) -> f64 {
    match n {
        1 => m[0],
        2 => {
            let (a, b, d) = (m[0], 0.5 * (m[1] + m[2]), m[3]);
            let mean = 0.5 * (a + d);
            let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
            mean - rad
        }
        _ => (0..n)
            .map(|i| m[i * n + i] - (0..n).filter(|&j| j != i).map(|j| m[i * n + j].abs()).sum::<f64>())
            .fold(f64::INFINITY, f64::min),
    }
}

struct Tracker {
    name: &'static str,
    worst: f64,
    witness: Option<Witness>,
    failed: bool,
}

impl Tracker {
    fn new(name: &'static str) -> Self {
        Self { name, worst: f64::NEG_INFINITY, witness: None, failed: false }
    }

    /// Records `value` as a candidate maximum; `ok` decides pass/fail for
    /// this sample and the first failing sample becomes the witness.
    fn observe(&mut self, value: f64, ok: bool, s: &Sample, with_theta: bool) {
        let w = || Witness {
            p: (!with_theta).then(|| s.p.clone()),
            x: (!with_theta).then(|| s.x.clone()),
            theta: with_theta.then_some(s.theta),
            value,
        };
        if !ok && !self.failed {
            self.failed = true;
            self.witness = Some(w());
        }
        if value > self.worst || value.is_nan() {
            self.worst = value;
        }
    }

    fn finish(self, fitted: Vec<f64>) -> AssumptionCheck {
        let finite = fitted.iter().all(|c| c.is_finite());
        AssumptionCheck {
            name: self.name.to_string(),
            passed: !self.failed && finite,
            fitted,
            witness: self.witness,
        }
    }
}

/// Samples `(p, x, theta)` and checks every standing assumption on the
/// Hamiltonian and the coupling, fitting the constants they leave free.
pub fn check_assumptions(model: &ModelSpec, sample_count: usize, seed: u64) -> Result<AssumptionReport> {
    if sample_count == 0 {
        return Err(Error::Validation("sample_count must be at least 1".into()));
    }
    let n = model.dims;
    if n == 0 {
        return Err(Error::Validation("dimension must be at least 1".into()));
    }
    if let Some(t) = model.hamiltonian.potential.iter().find(|t| t.frequency.len() != n) {
        return Err(Error::Validation(format!(
            "assumption (ii): potential frequency {:?} does not match dimension {n}",
            t.frequency
        )));
    }
    model.coupling.validate()?;

    let h = &model.hamiltonian;
    let g = &model.coupling;
    let alpha = g.alpha();
    let theta0 = g.theta_floor();
    let mut r = rng::stream(seed, "assumptions");
    let samples: Vec<Sample> = (0..sample_count)
        .map(|_| {
            let radius = MOMENTUM_BOUND * r.gen::<f64>();
            let mut dir: Vec<f64> = (0..n).map(|_| r.gen::<f64>() - 0.5).collect();
            let len = norm2(&dir).sqrt().max(1e-12);
            dir.iter_mut().for_each(|d| *d *= radius / len);
            let x = (0..n).map(|_| r.gen::<f64>()).collect();
            let lo = 0.5 * theta0;
            let theta = lo + (THETA_MAX - lo) * r.gen::<f64>();
            Sample { p: dir, x, theta }
        })
        .collect();

    let lambda = h.convexity_modulus();
    let mut positivity = Tracker::new("positivity (i): H(p,x) > 0");
    let mut convexity = Tracker::new("convexity (iii): min eig D2pp H >= lambda");
    let mut growth = Tracker::new("growth (iv): |D2pp H|, |D2xp H|/(1+|p|), |D2xx H|/(1+|p|^2) <= C");
    let mut legendre = Tracker::new("(iv): H - DpH.p <= C");
    let mut envelope = Tracker::new("quadratic envelope: lambda/2 |p|^2 - C <= H <= C|p|^2 + C");
    let mut sublinear = Tracker::new("derivative bounds: |DpH| <= C(1+|p|), |DxH| <= C(1+|p|^2)");
    let mut min_eig = f64::INFINITY;
    let (mut c_growth, mut c_legendre, mut c_env_lo, mut c_env_hi, mut c_sub) =
        (0.0f64, f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0f64, 0.0f64);

    for s in &samples {
        let jet = eval_hamiltonian(h, &s.p, &s.x)?;
        let at_zero = eval_hamiltonian(h, &vec![0.0; n], &s.x)?;
        let smallest = jet.value.min(at_zero.value);
        positivity.observe(-smallest, smallest > 0.0, s, false);

        let e = min_eigenvalue(&jet.dpp, n);
        min_eig = min_eig.min(e);
        convexity.observe(-e, e >= lambda - 1e-10, s, false);

        let p2 = norm2(&s.p);
        let p1 = p2.sqrt();
        let c = frobenius(&jet.dpp)
            .max(frobenius(&jet.dxp) / (1.0 + p1))
            .max(frobenius(&jet.dxx) / (1.0 + p2));
        c_growth = c_growth.max(c);
        growth.observe(c, c.is_finite(), s, false);

        let legendre_gap = jet.value - jet.dp.iter().zip(&s.p).map(|(a, b)| a * b).sum::<f64>();
        c_legendre = c_legendre.max(legendre_gap);
        legendre.observe(
            legendre_gap,
            legendre_gap <= h.max_potential_plus_offset_bound() + 1e-12,
            s,
            false,
        );

        c_env_lo = c_env_lo.max(0.5 * lambda * p2 - jet.value);
        c_env_hi = c_env_hi.max(jet.value / (1.0 + p2));
        envelope.observe(jet.value, jet.value.is_finite(), s, false);

        let c = (norm2(&jet.dp).sqrt() / (1.0 + p1)).max(norm2(&jet.dx).sqrt() / (1.0 + p2));
        c_sub = c_sub.max(c);
        sublinear.observe(c, c.is_finite(), s, false);
    }

    let mut increasing = Tracker::new("(vi)(a): g' > 0");
    let mut bracket = Tracker::new("(vi)(d): C theta^(alpha-1) <= g' <= C~ theta^(alpha-1) + C~");
    let mut theta_convex = Tracker::new("(vi)(c): theta g(theta) convex");
    let mut superlinear = Tracker::new("(vi)(f): C0 theta <= g(theta) theta / 2 + C1");
    let (mut c_lo, mut c_hi) = (f64::INFINITY, 0.0f64);
    let mut c1 = [f64::NEG_INFINITY; GROWTH_C0.len()];
    let f = |t: f64| t * g.g(t);
    for s in &samples {
        let t = s.theta;
        let gp = g.g_prime(t);
        increasing.observe(-gp, gp > 0.0, s, true);

        let base = t.powf(alpha - 1.0);
        c_lo = c_lo.min(gp / base);
        c_hi = c_hi.max(gp / (base + 1.0));
        bracket.observe(gp, gp.is_finite() && gp > 0.0, s, true);

        let d = 1e-3 * t;
        let second = (f(t + d) - 2.0 * f(t) + f(t - d)) / (d * d);
        let tol = 1e-6 * (f(t + d).abs() + f(t).abs() + f(t - d).abs()) / (d * d);
        theta_convex.observe(-second, second >= -tol, s, true);

        for (c1k, c0) in c1.iter_mut().zip(GROWTH_C0) {
            *c1k = c1k.max(c0 * t - 0.5 * g.g(t) * t);
        }
        superlinear.observe(0.0, true, s, true);
    }
    // theta -> 0 end of the growth condition
    for (c1k, c0) in c1.iter_mut().zip(GROWTH_C0) {
        let t = 1e-12;
        *c1k = c1k.max(c0 * t - 0.5 * g.g(t) * t).max(0.0);
    }

    let floor_ok = theta0.is_finite() && theta0 > 0.0;
    let floor_check = AssumptionCheck {
        name: "(vi)(b): g^-1(0) > 0".into(),
        passed: floor_ok,
        fitted: vec![theta0],
        witness: (!floor_ok).then_some(Witness { p: None, x: None, theta: None, value: theta0 }),
    };
    let a0 = alpha_max(n)?;
    let alpha_ok = alpha < a0;
    let alpha_check = AssumptionCheck {
        name: "(vi)(d): alpha < alpha_0(N)".into(),
        passed: alpha_ok,
        fitted: vec![alpha, a0],
        witness: (!alpha_ok).then_some(Witness { p: None, x: None, theta: None, value: alpha }),
    };

    let mut checks = vec![
        positivity.finish(vec![]),
        convexity.finish(vec![min_eig]),
        growth.finish(vec![c_growth]),
        legendre.finish(vec![c_legendre]),
        envelope.finish(vec![c_env_lo.max(c_env_hi)]),
        sublinear.finish(vec![c_sub]),
        increasing.finish(vec![]),
        floor_check,
        theta_convex.finish(vec![]),
    ];
    let mut bracket_check = bracket.finish(vec![c_lo, c_hi]);
    bracket_check.passed &= c_lo > 0.0;
    checks.push(bracket_check);
    checks.push(alpha_check);
    checks.push(superlinear.finish(c1.to_vec()));

    Ok(AssumptionReport {
        dims: n,
        sample_count,
        seed,
        all_passed: checks.iter().all(|c| c.passed),
        checks,
    })
}
