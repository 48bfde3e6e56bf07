//! Continuous problem data: Hamiltonian, coupling, penalization.
//!
//! The obstacle is normalized to zero and the agent source to one, so a
//! [`ModelSpec`] only carries the Hamiltonian and the coupling together with
//! the torus dimension.

use std::f64::consts::{PI, TAU};

use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

mod assumptions;

pub use assumptions::{check_assumptions, AssumptionCheck, AssumptionReport, Witness};

/// Obstacle level; the constraint is `u <= OBSTACLE`.
pub const OBSTACLE: f64 = 0.0;
/// Constant agent source entering the transport equation.
pub const SOURCE: f64 = 1.0;

/// One cosine mode `amplitude * cos(2 pi k.x + phase)` of the potential.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialTerm {
    pub frequency: Vec<i32>,
    pub amplitude: f64,
    pub phase: f64,
}

impl PotentialTerm {
    pub fn new(frequency: Vec<i32>, amplitude: f64) -> Self {
        Self { frequency, amplitude, phase: 0.0 }
    }

    pub fn with_phase(mut self, phase: f64) -> Self {
        self.phase = phase;
        self
    }

    fn argument(&self, x: &[f64]) -> f64 {
        let dot: f64 = self
            .frequency
            .iter()
            .zip(x)
            .map(|(&k, &xi)| k as f64 * xi)
            .sum();
        TAU * dot + self.phase
    }
}

// Terms travel as `[k, a]` or `[k, a, phase]`, with `k` a bare integer in
// one dimension and an integer array otherwise.
impl Serialize for PotentialTerm {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let len = if self.phase == 0.0 { 2 } else { 3 };
        let mut seq = serializer.serialize_seq(Some(len))?;
        if self.frequency.len() == 1 {
            seq.serialize_element(&self.frequency[0])?;
        } else {
            seq.serialize_element(&self.frequency)?;
        }
        seq.serialize_element(&self.amplitude)?;
        if len == 3 {
            seq.serialize_element(&self.phase)?;
        }
        seq.end()
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FrequencyRepr {
    Scalar(i32),
    Vector(Vec<i32>),
}

impl<'de> Deserialize<'de> for PotentialTerm {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct TermVisitor;

        impl<'de> Visitor<'de> for TermVisitor {
            type Value = PotentialTerm;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a [frequency, amplitude] or [frequency, amplitude, phase] array")
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<PotentialTerm, A::Error> {
                let frequency = match seq.next_element::<FrequencyRepr>()? {
                    Some(FrequencyRepr::Scalar(k)) => vec![k],
                    Some(FrequencyRepr::Vector(k)) => k,
                    None => return Err(de::Error::invalid_length(0, &self)),
                };
                let amplitude: f64 = seq
                    .next_element()?
                    .ok_or_else(|| de::Error::invalid_length(1, &self))?;
                let phase: f64 = seq.next_element()?.unwrap_or(0.0);
                if seq.next_element::<de::IgnoredAny>()?.is_some() {
                    return Err(de::Error::invalid_length(4, &self));
                }
                Ok(PotentialTerm { frequency, amplitude, phase })
            }
        }

        deserializer.deserialize_seq(TermVisitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HamiltonianKind {
    #[default]
    QuadraticPotential,
}

/// `H(p, x) = |p|^2 / 2 + V(x) + offset` with a trigonometric potential `V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianSpec {
    #[serde(default)]
    pub kind: HamiltonianKind,
    #[serde(default)]
    pub potential: Vec<PotentialTerm>,
    pub offset: f64,
}

/// Value and derivatives of the Hamiltonian at one `(p, x)`.
///
/// Matrices are stored row-major with side `dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianJet {
    pub value: f64,
    pub dp: Vec<f64>,
    pub dpp: Vec<f64>,
    pub dx: Vec<f64>,
    pub dxx: Vec<f64>,
    pub dxp: Vec<f64>,
}

impl HamiltonianSpec {
    pub fn new(potential: Vec<PotentialTerm>, offset: f64) -> Self {
        Self { kind: HamiltonianKind::QuadraticPotential, potential, offset }
    }

    /// Convexity modulus of `p -> H(p, x)`.
    pub fn convexity_modulus(&self) -> f64 {
        1.0
    }

    pub fn potential(&self, x: &[f64]) -> f64 {
        self.potential
            .iter()
            .map(|t| t.amplitude * t.argument(x).cos())
            .sum()
    }

    /// `H` given a momentum and the potential value already sampled at `x`.
    #[inline]
    pub fn value_with_potential(&self, p: &[f64], potential: f64) -> f64 {
        0.5 * p.iter().map(|v| v * v).sum::<f64>() + potential + self.offset
    }

    /// Writes `D_p H` into `out`; the quadratic family has `D_p H = p`.
    #[inline]
    pub fn dp_into(&self, p: &[f64], out: &mut [f64]) {
        out.copy_from_slice(p);
    }

    /// Sum of amplitudes; `offset - amplitude_bound()` bounds `H` from below.
    pub fn amplitude_bound(&self) -> f64 {
        self.potential.iter().map(|t| t.amplitude.abs()).sum()
    }

    pub fn max_frequency(&self) -> i32 {
        self.potential
            .iter()
            .flat_map(|t| t.frequency.iter().map(|k| k.abs()))
            .max()
            .unwrap_or(0)
    }

    /// Lower estimate of `min_x (V + offset)`: the amplitude bound when it is
    /// already positive, otherwise the minimum over a lattice fine enough
    /// for the largest frequency present.
    pub fn min_potential_plus_offset(&self, dims: usize) -> f64 {
        if self.potential.is_empty() {
            return self.offset;
        }
        let lower = self.offset - self.amplitude_bound();
        if lower > 0.0 {
            return lower;
        }
        let per_axis = (16 * self.max_frequency().max(1) as usize).max(64);
        let cap = (1usize << 20) as f64;
        let per_axis = per_axis.min(cap.powf(1.0 / dims as f64).floor().max(4.0) as usize);
        let total = per_axis.pow(dims as u32);
        let mut x = vec![0.0; dims];
        let mut best = f64::INFINITY;
        for flat in 0..total {
            let mut rem = flat;
            for xi in x.iter_mut() {
                *xi = (rem % per_axis) as f64 / per_axis as f64;
                rem /= per_axis;
            }
            best = best.min(self.potential(&x));
        }
        best + self.offset
    }

    pub fn max_potential_plus_offset_bound(&self) -> f64 {
        self.offset + self.amplitude_bound()
    }
}

/// Full jet of the Hamiltonian at `(p, x)`.
pub fn eval_hamiltonian(spec: &HamiltonianSpec, p: &[f64], x: &[f64]) -> Result<HamiltonianJet> {
    let n = p.len();
    if x.len() != n {
        return Err(domain(format!("momentum has {} components but point has {}", n, x.len())));
    }
    if p.iter().chain(x).any(|v| !v.is_finite()) {
        return Err(domain("non-finite Hamiltonian argument"));
    }
    if let Some(t) = spec.potential.iter().find(|t| t.frequency.len() != n) {
        return Err(domain(format!(
            "potential term with {}-dimensional frequency evaluated in dimension {}",
            t.frequency.len(),
            n
        )));
    }

    let mut dx = vec![0.0; n];
    let mut dxx = vec![0.0; n * n];
    let mut potential = 0.0;
    for term in &spec.potential {
        let arg = term.argument(x);
        let (s, c) = arg.sin_cos();
        potential += term.amplitude * c;
        for j in 0..n {
            let kj = TAU * term.frequency[j] as f64;
            dx[j] -= term.amplitude * kj * s;
            for k in 0..n {
                let kk = TAU * term.frequency[k] as f64;
                dxx[j * n + k] -= term.amplitude * kj * kk * c;
            }
        }
    }
    let mut dpp = vec![0.0; n * n];
    for j in 0..n {
        dpp[j * n + j] = 1.0;
    }
    Ok(HamiltonianJet {
        value: spec.value_with_potential(p, potential),
        dp: p.to_vec(),
        dpp,
        dx,
        dxx,
        dxp: vec![0.0; n * n],
    })
}

/// Increasing coupling `g` between density and the Hamilton-Jacobi equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", from = "CouplingRepr")]
pub enum CouplingSpec {
    /// `g(theta) = ln(theta)`.
    Logarithmic,
    /// `g(theta) = theta^alpha - theta_shift`.
    Power {
        alpha: f64,
        #[serde(default = "default_theta_shift")]
        theta_shift: f64,
    },
}

fn default_theta_shift() -> f64 {
    1.0
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum CouplingRepr {
    Logarithmic {},
    Power {
        alpha: f64,
        #[serde(default = "default_theta_shift")]
        theta_shift: f64,
    },
}

impl From<CouplingRepr> for CouplingSpec {
    fn from(r: CouplingRepr) -> Self {
        match r {
            CouplingRepr::Logarithmic {} => CouplingSpec::Logarithmic,
            CouplingRepr::Power { alpha, theta_shift } => CouplingSpec::Power { alpha, theta_shift },
        }
    }
}

/// Exponent cap of the logarithmic inverse; `exp(700)` is still finite.
pub const LOG_EXPONENT_CLAMP: f64 = 700.0;

impl CouplingSpec {
    /// Growth exponent of `g'`; zero for the logarithmic kind.
    pub fn alpha(&self) -> f64 {
        match *self {
            CouplingSpec::Logarithmic => 0.0,
            CouplingSpec::Power { alpha, .. } => alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let CouplingSpec::Power { alpha, theta_shift } = *self {
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(Error::Validation(format!(
                    "assumption (vi)(a): power coupling needs a finite alpha > 0, got {alpha}"
                )));
            }
            if !(theta_shift.is_finite() && theta_shift > 0.0) {
                return Err(Error::Validation(format!(
                    "assumption (vi)(b): power coupling needs theta_shift > 0 so that g^-1(0) > 0, got {theta_shift}"
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn g(&self, theta: f64) -> f64 {
        match *self {
            CouplingSpec::Logarithmic => theta.ln(),
            CouplingSpec::Power { alpha, theta_shift } => theta.powf(alpha) - theta_shift,
        }
    }

    #[inline]
    pub fn g_prime(&self, theta: f64) -> f64 {
        match *self {
            CouplingSpec::Logarithmic => 1.0 / theta,
            CouplingSpec::Power { alpha, .. } => alpha * theta.powf(alpha - 1.0),
        }
    }

    /// Infimum of the range of `g`.
    pub fn range_infimum(&self) -> f64 {
        match *self {
            CouplingSpec::Logarithmic => f64::NEG_INFINITY,
            CouplingSpec::Power { theta_shift, .. } => -theta_shift,
        }
    }

    /// `g^-1(y)` without range checks; the logarithmic exponent is clamped at
    /// [`LOG_EXPONENT_CLAMP`] and the second component flags the clamp.
    #[inline]
    pub fn invert_clamped(&self, y: f64) -> (f64, bool) {
        match *self {
            CouplingSpec::Logarithmic => {
                if y > LOG_EXPONENT_CLAMP {
                    (LOG_EXPONENT_CLAMP.exp(), true)
                } else {
                    (y.exp(), false)
                }
            }
            CouplingSpec::Power { alpha, theta_shift } => ((y + theta_shift).powf(1.0 / alpha), false),
        }
    }

    /// `theta_0 = g^-1(0)`, the uniform lower bound of every recovered density.
    pub fn theta_floor(&self) -> f64 {
        self.invert_clamped(0.0).0
    }
}

/// `(g(theta), g'(theta))`.
pub fn eval_coupling(spec: &CouplingSpec, theta: f64) -> Result<(f64, f64)> {
    if !(theta.is_finite() && theta > 0.0) {
        return Err(domain(format!("coupling evaluated at non-positive density {theta}")));
    }
    Ok((spec.g(theta), spec.g_prime(theta)))
}

/// `g^-1(y)`.
pub fn invert_coupling(spec: &CouplingSpec, y: f64) -> Result<f64> {
    if !y.is_finite() {
        return Err(domain("coupling inverse of a non-finite value"));
    }
    if y <= spec.range_infimum() {
        return Err(domain(format!(
            "{y} lies below the range of g (infimum {})",
            spec.range_infimum()
        )));
    }
    if let CouplingSpec::Logarithmic = spec {
        if y > LOG_EXPONENT_CLAMP {
            return Err(domain(format!("exp({y}) overflows")));
        }
    }
    let theta = spec.invert_clamped(y).0;
    if !(theta.is_finite() && theta > 0.0) {
        return Err(domain(format!("g^-1({y}) is not a finite positive density")));
    }
    Ok(theta)
}

/// Convex penalization `beta_eps` of the constraint `u <= 0`.
///
/// Zero for `s <= 0`, `s^2 / (4 eps^2)` on `(0, 2 eps]`, `(s - eps) / eps`
/// beyond. Value and slope are continuous at both breakpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenalizationSpec {
    pub epsilon: f64,
}

impl PenalizationSpec {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(domain(format!("penalization parameter must be positive, got {epsilon}")));
        }
        Ok(Self { epsilon })
    }

    #[inline]
    pub fn beta(&self, s: f64) -> f64 {
        let e = self.epsilon;
        if s <= 0.0 {
            0.0
        } else if s <= 2.0 * e {
            s * s / (4.0 * e * e)
        } else {
            (s - e) / e
        }
    }

    #[inline]
    pub fn beta_prime(&self, s: f64) -> f64 {
        let e = self.epsilon;
        if s <= 0.0 {
            0.0
        } else if s <= 2.0 * e {
            s / (2.0 * e * e)
        } else {
            1.0 / e
        }
    }

    /// Piecewise second derivative (left limit at the breakpoints).
    #[inline]
    pub fn beta_second(&self, s: f64) -> f64 {
        let e = self.epsilon;
        if s > 0.0 && s <= 2.0 * e {
            1.0 / (2.0 * e * e)
        } else {
            0.0
        }
    }
}

/// `(beta_eps(s), beta_eps'(s))`.
pub fn eval_penalization(spec: &PenalizationSpec, s: f64) -> Result<(f64, f64)> {
    if !s.is_finite() {
        return Err(domain("penalization evaluated at a non-finite point"));
    }
    Ok((spec.beta(s), spec.beta_prime(s)))
}

/// Upper limit `alpha_0(N)` for the growth exponent of `g'`.
///
/// Infinite for `N <= 2`; otherwise the root of
/// `2 a = (a + 1) b (b - 1)` with `b = sqrt(N / (N - 2))`.
pub fn alpha_max(dims: usize) -> Result<f64> {
    if dims == 0 {
        return Err(domain("dimension must be at least 1"));
    }
    if dims <= 2 {
        return Ok(f64::INFINITY);
    }
    let n = dims as f64;
    let b = (n / (n - 2.0)).sqrt();
    let c = b * (b - 1.0);
    Ok(c / (2.0 - c))
}

/// Problem data on the `dims`-dimensional torus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_dims")]
    pub dims: usize,
    pub hamiltonian: HamiltonianSpec,
    pub coupling: CouplingSpec,
}

fn default_dims() -> usize {
    1
}

impl ModelSpec {
    pub fn new(dims: usize, hamiltonian: HamiltonianSpec, coupling: CouplingSpec) -> Self {
        Self { dims, hamiltonian, coupling }
    }

    /// The constant-data model `H = |p|^2/2 + offset` with logarithmic coupling.
    pub fn constant(dims: usize, offset: f64) -> Self {
        Self::new(dims, HamiltonianSpec::new(Vec::new(), offset), CouplingSpec::Logarithmic)
    }

    /// `V(x) = amplitude * cos(2 pi x_1)` with logarithmic coupling.
    pub fn cosine(dims: usize, amplitude: f64, offset: f64) -> Self {
        let mut k = vec![0; dims];
        k[0] = 1;
        Self::new(
            dims,
            HamiltonianSpec::new(vec![PotentialTerm::new(k, amplitude)], offset),
            CouplingSpec::Logarithmic,
        )
    }

    /// Checks the standing assumptions that can be decided from the
    /// parameters alone; reports the first one violated.
    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 {
            return Err(Error::Validation("dimension must be at least 1".into()));
        }
        let h = &self.hamiltonian;
        if !h.offset.is_finite() {
            return Err(Error::Validation("assumption (i): Hamiltonian offset must be finite".into()));
        }
        for t in &h.potential {
            if t.frequency.len() != self.dims {
                return Err(Error::Validation(format!(
                    "assumption (ii): potential frequency {:?} does not match dimension {}",
                    t.frequency, self.dims
                )));
            }
            if !(t.amplitude.is_finite() && t.phase.is_finite()) {
                return Err(Error::Validation("assumption (i): potential coefficients must be finite".into()));
            }
        }
        let min_h = h.min_potential_plus_offset(self.dims);
        if min_h <= 0.0 {
            return Err(Error::Validation(format!(
                "assumption (i): H must be positive but min_x H(0, x) = {min_h:.6}"
            )));
        }
        self.coupling.validate()?;
        let a0 = alpha_max(self.dims)?;
        let alpha = self.coupling.alpha();
        if alpha >= a0 {
            return Err(Error::Validation(format!(
                "assumption (vi)(d): alpha = {alpha} must be below alpha_0({}) = {a0}",
                self.dims
            )));
        }
        Ok(())
    }

    /// `V` evaluated on a sequence of points, used to cache grid samples.
    pub fn potential_at(&self, x: &[f64]) -> f64 {
        self.hamiltonian.potential(x)
    }
}

/// Shifts every potential mode so that `V_new(x) = V(x - shift)`.
pub fn translate_potential(spec: &HamiltonianSpec, shift: &[f64]) -> HamiltonianSpec {
    let mut out = spec.clone();
    for t in &mut out.potential {
        let dot: f64 = t.frequency.iter().zip(shift).map(|(&k, &s)| k as f64 * s).sum();
        t.phase -= 2.0 * PI * dot;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cos_spec() -> HamiltonianSpec {
        HamiltonianSpec::new(vec![PotentialTerm::new(vec![1], 1.0)], 2.0)
    }

    #[test]
    fn hamiltonian_at_critical_point() {
        let jet = eval_hamiltonian(&cos_spec(), &[0.0], &[0.0]).unwrap();
        assert_eq!(jet.value, 3.0);
        assert_eq!(jet.dp, vec![0.0]);
        assert_eq!(jet.dpp, vec![1.0]);
        assert!(jet.dx[0].abs() < 1e-15);
    }

    #[test]
    fn hamiltonian_quarter_point_with_fd_crosscheck() {
        let spec = cos_spec();
        let jet = eval_hamiltonian(&spec, &[1.0], &[0.25]).unwrap();
        assert_relative_eq!(jet.value, 2.5, epsilon = 1e-14);
        assert_eq!(jet.dp, vec![1.0]);
        assert_relative_eq!(jet.dx[0], -TAU, epsilon = 1e-12);

        let d = 1e-6;
        let hp = |p: f64| eval_hamiltonian(&spec, &[p], &[0.25]).unwrap().value;
        let hx = |x: f64| eval_hamiltonian(&spec, &[1.0], &[x]).unwrap().value;
        assert_relative_eq!((hp(1.0 + d) - hp(1.0 - d)) / (2.0 * d), 1.0, max_relative = 1e-8);
        assert_relative_eq!((hx(0.25 + d) - hx(0.25 - d)) / (2.0 * d), -TAU, max_relative = 1e-8);
    }

    #[test]
    fn hamiltonian_rejects_bad_input() {
        assert!(eval_hamiltonian(&cos_spec(), &[f64::NAN], &[0.0]).is_err());
        assert!(eval_hamiltonian(&cos_spec(), &[0.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn hamiltonian_is_periodic() {
        let spec = HamiltonianSpec::new(
            vec![
                PotentialTerm::new(vec![1, 2], 0.3),
                PotentialTerm::new(vec![3, -1], 0.2).with_phase(0.7),
            ],
            2.0,
        );
        let p = [0.4, -1.3];
        for x in [[0.1, 0.7], [0.33, 0.25]] {
            let base = eval_hamiltonian(&spec, &p, &x).unwrap().value;
            for j in 0..2 {
                let mut y = x;
                y[j] += 1.0;
                let shifted = eval_hamiltonian(&spec, &p, &y).unwrap().value;
                assert!((base - shifted).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn coupling_examples() {
        assert_eq!(eval_coupling(&CouplingSpec::Logarithmic, 1.0).unwrap(), (0.0, 1.0));
        let power = CouplingSpec::Power { alpha: 0.5, theta_shift: 1.0 };
        let (g, gp) = eval_coupling(&power, 4.0).unwrap();
        assert_relative_eq!(g, 1.0, epsilon = 1e-15);
        assert_relative_eq!(gp, 0.25, epsilon = 1e-15);
        let (g, gp) = eval_coupling(&CouplingSpec::Logarithmic, std::f64::consts::E).unwrap();
        assert_relative_eq!(g, 1.0, epsilon = 1e-15);
        assert_relative_eq!(gp, 1.0 / std::f64::consts::E, epsilon = 1e-15);
        assert!(eval_coupling(&CouplingSpec::Logarithmic, 0.0).is_err());
        assert!(eval_coupling(&CouplingSpec::Logarithmic, -1.0).is_err());
    }

    #[test]
    fn coupling_inverse_examples() {
        assert_eq!(invert_coupling(&CouplingSpec::Logarithmic, 0.0).unwrap(), 1.0);
        let power = CouplingSpec::Power { alpha: 0.5, theta_shift: 1.0 };
        assert_eq!(invert_coupling(&power, 0.0).unwrap(), 1.0);
        assert!(invert_coupling(&power, -1.5).is_err());

        // bisection oracle for ln(theta) = 2
        let (mut lo, mut hi) = (1.0_f64, 100.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid.ln() < 2.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let theta = invert_coupling(&CouplingSpec::Logarithmic, 2.0).unwrap();
        assert_relative_eq!(theta, 0.5 * (lo + hi), max_relative = 1e-12);
        assert_relative_eq!(theta, 7.389056, epsilon = 1e-6);
    }

    #[test]
    fn penalization_examples() {
        let p = PenalizationSpec::new(0.1).unwrap();
        assert_eq!(eval_penalization(&p, -1.0).unwrap(), (0.0, 0.0));
        let (b, bp) = eval_penalization(&p, 0.3).unwrap();
        assert_relative_eq!(b, 2.0, epsilon = 1e-14);
        assert_relative_eq!(bp, 10.0, epsilon = 1e-14);
        let (b, bp) = eval_penalization(&p, 0.1).unwrap();
        assert_relative_eq!(b, 0.25, epsilon = 1e-14);
        assert_relative_eq!(bp, 5.0, epsilon = 1e-14);
        assert!((b - 0.1 * bp).abs() <= 1.0);
        assert!(PenalizationSpec::new(0.0).is_err());
        assert!(eval_penalization(&p, f64::INFINITY).is_err());
    }

    #[test]
    fn penalization_is_c1_at_breakpoints() {
        for eps in [0.2, 0.1, 0.0123, 1e-4] {
            let p = PenalizationSpec::new(eps).unwrap();
            // inner branch formulas evaluated at the breakpoints
            let inner = |s: f64| (s * s / (4.0 * eps * eps), s / (2.0 * eps * eps));
            let outer = |s: f64| ((s - eps) / eps, 1.0 / eps);
            let (a, ap) = inner(0.0);
            assert_eq!((a, ap), (p.beta(0.0), p.beta_prime(0.0)));
            let (a, ap) = inner(2.0 * eps);
            let (b, bp) = outer(2.0 * eps);
            assert_relative_eq!(a, b, max_relative = 1e-14);
            assert_relative_eq!(ap, bp, max_relative = 1e-14);
        }
    }

    #[test]
    fn alpha_max_values() {
        assert_eq!(alpha_max(1).unwrap(), f64::INFINITY);
        assert_eq!(alpha_max(2).unwrap(), f64::INFINITY);
        assert!((alpha_max(3).unwrap() - 3f64.sqrt()).abs() < 1e-12);
        assert!((alpha_max(4).unwrap() - (2f64.sqrt() - 1.0)).abs() < 1e-12);
        assert!(alpha_max(0).is_err());
    }

    #[test]
    fn alpha_max_solves_defining_equation() {
        for n in 3..=10 {
            let a = alpha_max(n).unwrap();
            let nf = n as f64;
            let b = (nf / (nf - 2.0)).sqrt();
            assert!((2.0 * a - (a + 1.0) * b * (b - 1.0)).abs() < 1e-12, "N = {n}");
        }
    }

    #[test]
    fn model_validation() {
        assert!(ModelSpec::cosine(1, 1.0, 2.0).validate().is_ok());
        let err = ModelSpec::cosine(1, 1.0, -2.0).validate().unwrap_err();
        assert!(err.to_string().contains("assumption (i)"), "{err}");
        let pow = ModelSpec::new(
            3,
            HamiltonianSpec::new(vec![], 1.0),
            CouplingSpec::Power { alpha: 2.0, theta_shift: 1.0 },
        );
        assert!(pow.validate().unwrap_err().to_string().contains("(vi)(d)"));
        let pow2 = ModelSpec { dims: 2, ..pow };
        assert!(pow2.validate().is_ok());
    }

    #[test]
    fn min_potential_sampling_catches_non_obvious_cases() {
        // amplitude bound 1.5 > offset but true min is above zero
        let h = HamiltonianSpec::new(
            vec![PotentialTerm::new(vec![1], 1.0), PotentialTerm::new(vec![2], 0.5)],
            1.3,
        );
        let m = h.min_potential_plus_offset(1);
        assert!(m > 0.0 && m < 1.3 - 0.5, "{m}");
    }

    #[test]
    fn model_json_roundtrip() {
        let m = ModelSpec::new(
            2,
            HamiltonianSpec::new(vec![PotentialTerm::new(vec![1, 0], 1.0).with_phase(0.5)], 2.0),
            CouplingSpec::Power { alpha: 0.5, theta_shift: 2.0 },
        );
        let s = serde_json::to_string(&m).unwrap();
        let back: ModelSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
        let one: HamiltonianSpec =
            serde_json::from_str(r#"{"kind":"quadratic_potential","potential":[[1, 1.0]],"offset":2.0}"#).unwrap();
        assert_eq!(one.potential[0].frequency, vec![1]);
        assert!(serde_json::from_str::<CouplingSpec>(r#"{"kind":"logarithmic","bogus":1}"#).is_err());
    }

    proptest! {
        #[test]
        fn beta_identity_bound(eps in 1e-3f64..1.0, s in -1.0f64..1.0) {
            let p = PenalizationSpec::new(eps).unwrap();
            prop_assert!((p.beta(s) - s * p.beta_prime(s)).abs() <= 1.0 + 1e-12);
            prop_assert!(p.beta_prime(s) >= 0.0 && p.beta_prime(s) <= 1.0 / eps + 1e-12);
        }

        #[test]
        fn beta_prime_nondecreasing(eps in 1e-3f64..1.0, mut s in proptest::collection::vec(-1.0f64..1.0, 2..40)) {
            let p = PenalizationSpec::new(eps).unwrap();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for w in s.windows(2) {
                prop_assert!(p.beta_prime(w[0]) <= p.beta_prime(w[1]));
            }
        }

        #[test]
        fn coupling_inverse_roundtrip(log_theta in (1e-6f64).ln()..(1e6f64).ln(), alpha in 0.1f64..3.0, c in 0.1f64..5.0) {
            let theta = log_theta.exp();
            let back = invert_coupling(&CouplingSpec::Logarithmic, theta.ln()).unwrap();
            prop_assert!(((back - theta) / theta).abs() < 1e-13);
            let spec = CouplingSpec::Power { alpha, theta_shift: c };
            let y = spec.g(theta);
            prop_assume!(y > -c);
            let back = invert_coupling(&spec, y).unwrap();
            prop_assert!((spec.g(back) - y).abs() <= 1e-13 * (y.abs() + c), "{theta} {back}");
            if theta.powf(alpha) >= 1e-2 * c {
                prop_assert!(((back - theta) / theta).abs() < 1e-10, "{theta} {back}");
            }
        }

        #[test]
        fn hamiltonian_derivatives_match_fd(p0 in -3.0f64..3.0, p1 in -3.0f64..3.0, x0 in 0.0f64..1.0, x1 in 0.0f64..1.0) {
            let spec = HamiltonianSpec::new(
                vec![PotentialTerm::new(vec![1, 1], 0.4), PotentialTerm::new(vec![0, 2], 0.3).with_phase(0.2)],
                2.0,
            );
            let p = [p0, p1];
            let x = [x0, x1];
            let jet = eval_hamiltonian(&spec, &p, &x).unwrap();
            let d = 1e-6;
            for j in 0..2 {
                let mut pp = p; pp[j] += d;
                let mut pm = p; pm[j] -= d;
                let fd = (eval_hamiltonian(&spec, &pp, &x).unwrap().value - eval_hamiltonian(&spec, &pm, &x).unwrap().value) / (2.0 * d);
                prop_assert!((fd - jet.dp[j]).abs() <= 1e-6 * jet.dp[j].abs().max(1.0));
                let mut xp = x; xp[j] += d;
                let mut xm = x; xm[j] -= d;
                let fd = (eval_hamiltonian(&spec, &p, &xp).unwrap().value - eval_hamiltonian(&spec, &p, &xm).unwrap().value) / (2.0 * d);
                prop_assert!((fd - jet.dx[j]).abs() <= 1e-6 * jet.dx[j].abs().max(1.0));
                let jp = eval_hamiltonian(&spec, &p, &xp).unwrap();
                let jm = eval_hamiltonian(&spec, &p, &xm).unwrap();
                for k in 0..2 {
                    let fd = (jp.dx[k] - jm.dx[k]) / (2.0 * d);
                    prop_assert!((fd - jet.dxx[j * 2 + k]).abs() <= 1e-6 * jet.dxx[j * 2 + k].abs().max(1.0));
                }
            }
        }
    }
}
