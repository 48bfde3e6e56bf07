//! Periodic tensor grids on the unit torus and discrete calculus.
//!
//! `gradient` uses centered differences and `divergence` is defined as its
//! negative transpose for the cell-volume weighted inner product, so
//! `<div F, u> = -<F, grad u>` holds exactly and `sum(div F) = 0` telescopes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest supported number of points per axis.
pub const MIN_POINTS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodicGrid {
    sizes: Vec<usize>,
}

impl PeriodicGrid {
    pub fn new(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() || sizes.len() > 2 {
            return Err(Error::Validation(format!(
                "grids are implemented for 1 or 2 dimensions, got {}",
                sizes.len()
            )));
        }
        if let Some(&n) = sizes.iter().find(|&&n| n < MIN_POINTS) {
            return Err(Error::Validation(format!(
                "every axis needs at least {MIN_POINTS} points, got {n}"
            )));
        }
        Ok(Self { sizes: sizes.to_vec() })
    }

    pub fn dims(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn len(&self) -> usize {
        self.sizes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        1.0 / self.sizes[axis] as f64
    }

    pub fn max_spacing(&self) -> f64 {
        (0..self.dims()).map(|j| self.spacing(j)).fold(0.0, f64::max)
    }

    /// Quadrature weight of one grid point.
    pub fn cell_volume(&self) -> f64 {
        (0..self.dims()).map(|j| self.spacing(j)).product()
    }

    fn stride(&self, axis: usize) -> usize {
        self.sizes[..axis].iter().product()
    }

    /// Multi-index of a flat index; axis 0 varies fastest.
    pub fn multi_index(&self, flat: usize) -> [usize; 2] {
        let mut out = [0; 2];
        let mut rem = flat;
        for (j, &n) in self.sizes.iter().enumerate() {
            out[j] = rem % n;
            rem /= n;
        }
        out
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.sizes)
            .enumerate()
            .map(|(j, (&m, _))| m * self.stride(j))
            .sum()
    }

    /// Flat index of `flat + offset * e_axis` with periodic wrap.
    #[inline]
    pub fn shift(&self, flat: usize, axis: usize, offset: isize) -> usize {
        let n = self.sizes[axis];
        let stride = self.stride(axis);
        let m = (flat / stride) % n;
        let target = (m as isize + offset).rem_euclid(n as isize) as usize;
        flat + target * stride - m * stride
    }

    /// Coordinates in `[0, 1)^N` of a flat index.
    pub fn point(&self, flat: usize) -> Vec<f64> {
        let m = self.multi_index(flat);
        (0..self.dims()).map(|j| m[j] as f64 * self.spacing(j)).collect()
    }

    pub fn points(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(move |i| self.point(i))
    }
}

/// Scalar samples on a periodic grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub grid: PeriodicGrid,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn new(grid: PeriodicGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("grid field has non-finite values".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: &PeriodicGrid, value: f64) -> Self {
        Self { grid: grid.clone(), values: vec![value; grid.len()] }
    }

    pub fn from_fn(grid: &PeriodicGrid, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        let values = grid.points().map(|x| f(&x)).collect();
        Self { grid: grid.clone(), values }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { grid: self.grid.clone(), values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &GridField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        same_grid(&self.grid, &other.grid)?;
        Ok(Self {
            grid: self.grid.clone(),
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Keeps every `factor`-th point along each axis.
    pub fn restrict(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.grid.sizes().iter().any(|n| n % factor != 0) {
            return Err(Error::GridMismatch(format!(
                "cannot restrict {:?} by {factor}",
                self.grid.sizes()
            )));
        }
        let sizes: Vec<usize> = self.grid.sizes().iter().map(|n| n / factor).collect();
        let coarse = PeriodicGrid::new(&sizes)?;
        let values = (0..coarse.len())
            .map(|i| {
                let m = coarse.multi_index(i);
                let fine: Vec<usize> = (0..coarse.dims()).map(|j| m[j] * factor).collect();
                self.values[self.grid.flat_index(&fine)]
            })
            .collect();
        Ok(Self { grid: coarse, values })
    }

    /// CSV with index columns, coordinate columns and the value.
    pub fn to_csv(&self) -> String {
        let d = self.grid.dims();
        let mut out = String::new();
        let idx: Vec<String> = (0..d).map(|j| format!("i{j}")).collect();
        let xs: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        out.push_str(&format!("{},{},value\n", idx.join(","), xs.join(",")));
        for (i, v) in self.values.iter().enumerate() {
            let m = self.grid.multi_index(i);
            let x = self.grid.point(i);
            let mi: Vec<String> = m[..d].iter().map(|k| k.to_string()).collect();
            let xi: Vec<String> = x.iter().map(|c| c.to_string()).collect();
            out.push_str(&format!("{},{},{}\n", mi.join(","), xi.join(","), v));
        }
        out
    }
}

/// `N`-vector samples per grid point, stored component-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridVectorField {
    pub grid: PeriodicGrid,
    pub values: Vec<f64>,
}

impl GridVectorField {
    pub fn zeros(grid: &PeriodicGrid) -> Self {
        Self { grid: grid.clone(), values: vec![0.0; grid.len() * grid.dims()] }
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[axis * n..(axis + 1) * n]
    }

    pub fn component_mut(&mut self, axis: usize) -> &mut [f64] {
        let n = self.grid.len();
        &mut self.values[axis * n..(axis + 1) * n]
    }

    /// Vector at one grid point.
    pub fn at(&self, flat: usize) -> Vec<f64> {
        (0..self.grid.dims()).map(|j| self.component(j)[flat]).collect()
    }

    /// Pointwise Euclidean norm.
    pub fn magnitude(&self) -> GridField {
        let n = self.grid.len();
        let values = (0..n)
            .map(|i| (0..self.grid.dims()).map(|j| self.component(j)[i].powi(2)).sum::<f64>().sqrt())
            .collect();
        GridField { grid: self.grid.clone(), values }
    }
}

pub(crate) fn same_grid(a: &PeriodicGrid, b: &PeriodicGrid) -> Result<()> {
    if a != b {
        return Err(Error::GridMismatch(format!("{:?} vs {:?}", a.sizes(), b.sizes())));
    }
    Ok(())
}

/// Centered first difference along one axis, written into `out`.
pub fn centered_difference(grid: &PeriodicGrid, u: &[f64], axis: usize, out: &mut [f64]) {
    let inv = 0.5 / grid.spacing(axis);
    for (i, o) in out.iter_mut().enumerate() {
        *o = (u[grid.shift(i, axis, 1)] - u[grid.shift(i, axis, -1)]) * inv;
    }
}

pub fn gradient(u: &GridField) -> GridVectorField {
    let mut out = GridVectorField::zeros(&u.grid);
    for j in 0..u.grid.dims() {
        centered_difference(&u.grid, &u.values, j, out.component_mut(j));
    }
    out
}

pub fn divergence(f: &GridVectorField) -> GridField {
    let grid = &f.grid;
    let mut values = vec![0.0; grid.len()];
    for j in 0..grid.dims() {
        let inv = 0.5 / grid.spacing(j);
        let c = f.component(j);
        for (i, v) in values.iter_mut().enumerate() {
            *v += (c[grid.shift(i, j, 1)] - c[grid.shift(i, j, -1)]) * inv;
        }
    }
    GridField { grid: grid.clone(), values }
}

/// `D+ D-` second difference along one axis.
pub fn second_difference(grid: &PeriodicGrid, u: &[f64], axis: usize, out: &mut [f64]) {
    let inv = 1.0 / grid.spacing(axis).powi(2);
    for (i, o) in out.iter_mut().enumerate() {
        *o = (u[grid.shift(i, axis, 1)] - 2.0 * u[i] + u[grid.shift(i, axis, -1)]) * inv;
    }
}

pub fn laplacian(u: &GridField) -> GridField {
    let mut values = vec![0.0; u.grid.len()];
    let mut tmp = vec![0.0; u.grid.len()];
    for j in 0..u.grid.dims() {
        second_difference(&u.grid, &u.values, j, &mut tmp);
        values.iter_mut().zip(&tmp).for_each(|(v, t)| *v += t);
    }
    GridField { grid: u.grid.clone(), values }
}

/// Entries of the discrete Hessian: pure terms by `D+ D-`, mixed terms by
/// composed centered differences. Returned row-major by `(j, k)`.
pub fn hessian(u: &GridField) -> Vec<Vec<f64>> {
    let g = &u.grid;
    let d = g.dims();
    let n = g.len();
    let mut out = vec![vec![0.0; n]; d * d];
    let mut first = vec![0.0; n];
    for j in 0..d {
        for k in 0..d {
            if j == k {
                second_difference(g, &u.values, j, &mut out[j * d + k]);
            } else {
                centered_difference(g, &u.values, k, &mut first);
                centered_difference(g, &first, j, &mut out[j * d + k]);
            }
        }
    }
    out
}

/// `sum_i f_i * cell_volume`.
pub fn integrate(f: &GridField) -> f64 {
    f.values.iter().sum::<f64>() * f.grid.cell_volume()
}

pub fn inner(a: &GridField, b: &GridField) -> f64 {
    a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum::<f64>() * a.grid.cell_volume()
}

pub fn inner_vector(a: &GridVectorField, b: &GridVectorField) -> f64 {
    a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum::<f64>() * a.grid.cell_volume()
}

/// Discrete Lebesgue and Sobolev norms of one field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
    /// `||Du||_{L2}`.
    pub grad_l2: f64,
    /// `||D^2 u||_{L2}` (Frobenius over all Hessian entries).
    pub hessian_l2: f64,
    pub w12: f64,
    pub w22: f64,
}

pub fn norms(u: &GridField) -> Norms {
    let w = u.grid.cell_volume();
    let l1 = u.values.iter().map(|v| v.abs()).sum::<f64>() * w;
    let l2sq = u.values.iter().map(|v| v * v).sum::<f64>() * w;
    let linf = u.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gsq = gradient(u).values.iter().map(|v| v * v).sum::<f64>() * w;
    let hsq = hessian(u).iter().flatten().map(|v| v * v).sum::<f64>() * w;
    Norms {
        l1,
        l2: l2sq.sqrt(),
        linf,
        grad_l2: gsq.sqrt(),
        hessian_l2: hsq.sqrt(),
        w12: (l2sq + gsq).sqrt(),
        w22: (l2sq + gsq + hsq).sqrt(),
    }
}
