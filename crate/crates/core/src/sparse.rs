//! Compressed sparse rows and a banded direct solver for stencil matrices
//! on periodic grids.

use crate::grid::PeriodicGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a CSR matrix, summing duplicate entries.
    pub fn from_triplets(nrows: usize, ncols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0; nrows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "entry ({r}, {c}) outside {nrows}x{ncols}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self { nrows, ncols, row_ptr, col_idx, values }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[range.clone()].iter().copied().zip(self.values[range].iter().copied())
    }

    pub fn max_row_nnz(&self) -> usize {
        (0..self.nrows).map(|r| self.row_ptr[r + 1] - self.row_ptr[r]).max().unwrap_or(0)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[range.clone()].binary_search(&c) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows).map(|r| self.row(r).map(|(c, v)| v * x[c]).sum()).collect()
    }

    pub fn transpose(&self) -> Self {
        let triplets = (0..self.nrows)
            .flat_map(|r| self.row(r).map(move |(c, v)| (c, r, v)))
            .collect();
        Self::from_triplets(self.ncols, self.nrows, triplets)
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.nrows).flat_map(|r| self.row(r).map(move |(c, v)| (r, c, v))).collect()
    }

    /// `self + shift * I`.
    pub fn shifted(&self, shift: f64) -> Self {
        let mut t = self.triplets();
        t.extend((0..self.nrows.min(self.ncols)).map(|i| (i, i, shift)));
        Self::from_triplets(self.nrows, self.ncols, t)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for (r, c, v) in self.triplets() {
            d[r][c] = v;
        }
        d
    }

    /// Largest entrywise difference over the union of both patterns.
    pub fn max_abs_diff(&self, other: &SparseMatrix) -> f64 {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut worst = 0.0f64;
        for (r, c, v) in self.triplets() {
            worst = worst.max((v - other.get(r, c)).abs());
        }
        for (r, c, v) in other.triplets() {
            worst = worst.max((v - self.get(r, c)).abs());
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Ordering `0, n-1, 1, n-2, ...` that turns a periodic ring into a band.
fn interleave(n: usize) -> Vec<usize> {
    (0..n).map(|k| if k % 2 == 0 { k / 2 } else { n - 1 - k / 2 }).collect()
}

/// Permutation (position -> flat grid index) giving stencil matrices on a
/// periodic grid a bandwidth proportional to the stencil reach.
pub fn periodic_band_ordering(grid: &PeriodicGrid) -> Vec<usize> {
    let axes: Vec<Vec<usize>> = grid.sizes().iter().map(|&n| interleave(n)).collect();
    match axes.len() {
        1 => axes[0].clone(),
        _ => {
            let mut out = Vec::with_capacity(grid.len());
            for &iy in &axes[1] {
                for &ix in &axes[0] {
                    out.push(grid.flat_index(&[ix, iy]));
                }
            }
            out
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroPivot {
    pub position: usize,
    pub value: f64,
}

/// LU factors of a permuted banded matrix (no pivoting).
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    lower: usize,
    upper: usize,
    order: Vec<usize>,
    band: Vec<f64>,
}

impl BandedLu {
    /// Factors `P A P^T` with `order[k]` the original index at position `k`.
    pub fn factor(a: &SparseMatrix, order: &[usize]) -> Result<Self, ZeroPivot> {
        let n = a.nrows();
        assert_eq!(n, a.ncols());
        assert_eq!(order.len(), n);
        let mut pos = vec![0; n];
        for (k, &i) in order.iter().enumerate() {
            pos[i] = k;
        }
        let (mut lower, mut upper) = (0usize, 0usize);
        for (r, c, _) in a.triplets() {
            let (pr, pc) = (pos[r], pos[c]);
            if pr > pc {
                lower = lower.max(pr - pc);
            } else {
                upper = upper.max(pc - pr);
            }
        }
        let width = lower + upper + 1;
        let mut band = vec![0.0; n * width];
        for (r, c, v) in a.triplets() {
            let (pr, pc) = (pos[r], pos[c]);
            band[pr * width + (pc + lower - pr)] += v;
        }
        let scale = a.max_abs().max(f64::MIN_POSITIVE);
        for k in 0..n {
            let pivot = band[k * width + lower];
            if !(pivot.abs() > 1e-14 * scale) {
                return Err(ZeroPivot { position: k, value: pivot });
            }
            let row_end = (k + upper).min(n - 1);
            for i in (k + 1)..=(k + lower).min(n - 1) {
                let ik = i * width + (k + lower - i);
                let l = band[ik] / pivot;
                if l == 0.0 {
                    continue;
                }
                band[ik] = l;
                for j in (k + 1)..=row_end {
                    let kj = band[k * width + (j + lower - k)];
                    band[i * width + (j + lower - i)] -= l * kj;
                }
            }
        }
        Ok(Self { n, lower, upper, order: order.to_vec(), band })
    }

    pub fn bandwidth(&self) -> (usize, usize) {
        (self.lower, self.upper)
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let (n, lo, up) = (self.n, self.lower, self.upper);
        let width = lo + up + 1;
        let mut y: Vec<f64> = self.order.iter().map(|&i| rhs[i]).collect();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(lo)..i {
                s -= self.band[i * width + (k + lo - i)] * y[k];
            }
            y[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in (i + 1)..=(i + up).min(n - 1) {
                s -= self.band[i * width + (j + lo - i)] * y[j];
            }
            y[i] = s / self.band[i * width + lo];
        }
        let mut x = vec![0.0; n];
        for (k, &i) in self.order.iter().enumerate() {
            x[i] = y[k];
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn periodic_stencil(grid: &PeriodicGrid, rng: &mut ChaCha8Rng) -> SparseMatrix {
        let mut t = Vec::new();
        for i in 0..grid.len() {
            t.push((i, i, 20.0));
            for j in 0..grid.dims() {
                for off in [-2isize, -1, 1, 2] {
                    t.push((i, grid.shift(i, j, off), rng.gen_range(-1.0..1.0)));
                }
            }
        }
        SparseMatrix::from_triplets(grid.len(), grid.len(), t)
    }

    #[test]
    fn triplets_sum_duplicates() {
        let m = SparseMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (1, 0, 2.0), (0, 0, 3.0)]);
        assert_eq!(m.get(0, 0), 4.0);
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.transpose().get(0, 1), 2.0);
        assert_eq!(m.matvec(&[1.0, 1.0]), vec![4.0, 2.0]);
    }

    #[test]
    fn banded_solve_matches_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for sizes in [vec![17], vec![64], vec![8, 6], vec![16, 16]] {
            let g = PeriodicGrid::new(&sizes).unwrap();
            let a = periodic_stencil(&g, &mut rng);
            let order = periodic_band_ordering(&g);
            let lu = BandedLu::factor(&a, &order).unwrap();
            let (lo, up) = lu.bandwidth();
            assert!(lo <= 4 * sizes[0] + 4 && up <= 4 * sizes[0] + 4, "{lo} {up}");
            let b: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = lu.solve(&b);
            let r = a.matvec(&x);
            let err = r.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "{sizes:?}: {err}");
        }
    }

    #[test]
    fn one_dimensional_band_is_narrow() {
        let g = PeriodicGrid::new(&[101]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lu = BandedLu::factor(&periodic_stencil(&g, &mut rng), &periodic_band_ordering(&g)).unwrap();
        assert_eq!(lu.bandwidth(), (4, 4));
    }

    #[test]
    fn singular_matrix_reports_zero_pivot() {
        let m = SparseMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]);
        assert!(BandedLu::factor(&m, &[0, 1]).is_err());
    }
}
