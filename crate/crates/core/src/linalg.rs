//! Sparse and banded building blocks shared by the global and local solvers.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Symmetric matrix in compressed sparse row form (both triangles stored).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl Csr {
    /// Sums duplicate triplets. Columns within a row end up sorted.
    pub fn from_triplets(n: usize, mut t: Vec<(usize, usize, f64)>) -> Self {
        t.sort_unstable_by_key(|a| (a.0, a.1));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(t.len());
        let mut vals: Vec<f64> = Vec::with_capacity(t.len());
        let mut last = (usize::MAX, usize::MAX);
        for (r, c, v) in t {
            if (r, c) == last {
                *vals.last_mut().expect("nonempty") += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = (r, c);
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self { n, row_ptr, cols, vals }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(p) => self.vals[r.start + p],
            Err(_) => 0.0,
        }
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            y[i] = self.row(i).map(|(j, a)| a * x[j]).sum();
        }
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }
}

/// Cholesky factor of a symmetric positive definite band matrix with `kb`
/// sub-diagonals, stored row-wise as `data[i * (kb + 1) + (kb - (i - j))]`
/// for `i - kb <= j <= i`.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    kb: usize,
    data: Vec<f64>,
}

impl BandedCholesky {
    /// Factors the matrix whose lower band is given by `entry(i, j)`, `j <= i`.
    pub fn factor(n: usize, kb: usize, entry: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let w = kb + 1;
        let mut data = vec![0.0; n * w];
        for i in 0..n {
            for j in i.saturating_sub(kb)..=i {
                data[i * w + kb - (i - j)] = entry(i, j);
            }
        }
        for i in 0..n {
            let lo = i.saturating_sub(kb);
            for j in lo..=i {
                let mut s = data[i * w + kb - (i - j)];
                let klo = lo.max(j.saturating_sub(kb));
                for k in klo..j {
                    s -= data[i * w + kb - (i - k)] * data[j * w + kb - (j - k)];
                }
                if j == i {
                    if !(s > 0.0) {
                        return Err(Error::SolverDivergence { iterations: 0, residual: f64::NAN });
                    }
                    data[i * w + kb] = s.sqrt();
                } else {
                    data[i * w + kb - (i - j)] = s / data[j * w + kb];
                }
            }
        }
        Ok(Self { n, kb, data })
    }

    pub fn solve(&self, b: &mut [f64]) {
        let (n, kb, w) = (self.n, self.kb, self.kb + 1);
        for i in 0..n {
            let mut s = b[i];
            for k in i.saturating_sub(kb)..i {
                s -= self.data[i * w + kb - (i - k)] * b[k];
            }
            b[i] = s / self.data[i * w + kb];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in i + 1..(i + kb + 1).min(n) {
                s -= self.data[k * w + kb - (k - i)] * b[k];
            }
            b[i] = s / self.data[i * w + kb];
        }
    }
}

/// `LDL^T` factor of a symmetric positive definite tridiagonal matrix.
#[derive(Debug, Clone, Default)]
pub struct Tridiagonal {
    d: Vec<f64>,
    l: Vec<f64>,
}

impl Tridiagonal {
    /// `diag` has length `n`, `off` length `n - 1`. Elimination runs from the
    /// last index towards the first, so a Dirichlet end should be last.
    pub fn factor(diag: &[f64], off: &[f64]) -> Self {
        let n = diag.len();
        let mut d = vec![0.0; n];
        let mut l = vec![0.0; n.saturating_sub(1)];
        d[n - 1] = diag[n - 1];
        for k in (1..n).rev() {
            l[k - 1] = off[k - 1] / d[k];
            d[k - 1] = diag[k - 1] - l[k - 1] * off[k - 1];
        }
        Self { d, l }
    }

    /// From pivots `d` and multipliers `l` computed elsewhere, in the
    /// elimination order of [`Tridiagonal::factor`].
    pub fn from_factors(d: Vec<f64>, l: Vec<f64>) -> Self {
        debug_assert_eq!(l.len() + 1, d.len());
        Self { d, l }
    }

    pub fn solve(&self, b: &mut [f64]) {
        let n = self.d.len();
        for k in (1..n).rev() {
            b[k - 1] -= self.l[k - 1] * b[k];
        }
        for k in 0..n {
            b[k] /= self.d[k];
        }
        for k in 1..n {
            b[k] -= self.l[k - 1] * b[k - 1];
        }
    }
}

/// Operator and preconditioner for [`pcg`].
pub trait SpdOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
    fn precondition(&self, r: &[f64], z: &mut [f64]);

    /// Energy norm of the perturbation caused by rounding every entry of
    /// `x` in its last bit. Residuals below this cannot be attained.
    fn rounding_floor(&self, _x: &[f64]) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveInfo {
    pub iterations: usize,
    /// Final relative residual in the preconditioner norm,
    /// `sqrt(r^T P r) / sqrt(b^T P b)`.
    pub residual: f64,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sqrt(r^T P r) / sqrt(b^T P b)` for `r = b - A x`.
pub fn relative_residual(op: &impl SpdOperator, b: &[f64], x: &[f64]) -> f64 {
    let n = op.dim();
    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    op.precondition(b, &mut z);
    let bp = dot(b, &z).max(0.0).sqrt();
    if bp == 0.0 {
        return 0.0;
    }
    op.apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    op.precondition(&r, &mut z);
    dot(&r, &z).max(0.0).sqrt() / bp
}

/// Residual level accepted when rounding keeps the true residual above the
/// requested tolerance although the recursive one went below it.
pub const ATTAINABLE_RESIDUAL: f64 = 1e-6;

/// Preconditioned conjugate gradients from the initial guess in `x`.
///
/// Stops once the residual measured in the preconditioner norm has dropped
/// by `rel_tol` relative to the right-hand side. With a preconditioner close
/// to `A^-1` this tracks the energy norm of the error and, unlike the
/// Euclidean residual, is insensitive to strongly graded meshes. If rounding
/// prevents the true residual from following the recursive one, the solve
/// restarts a few times and then accepts any residual below
/// [`ATTAINABLE_RESIDUAL`] or the operator's rounding floor.
pub fn pcg(
    op: &impl SpdOperator,
    b: &[f64],
    x: &mut [f64],
    rel_tol: f64,
    max_iter: usize,
) -> Result<SolveInfo> {
    let n = op.dim();
    let mut z = vec![0.0; n];
    op.precondition(b, &mut z);
    let bnorm = dot(b, &z).max(0.0).sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveInfo { iterations: 0, residual: 0.0 });
    }
    let mut r = vec![0.0; n];
    op.apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    op.precondition(&r, &mut z);
    let mut rz = dot(&r, &z);
    let mut res = rz.max(0.0).sqrt() / bnorm;
    if res <= rel_tol {
        return Ok(SolveInfo { iterations: 0, residual: res });
    }
    let mut p = z.clone();
    let mut q = vec![0.0; n];
    let mut restarts = 0;
    for it in 1..=max_iter {
        op.apply(&p, &mut q);
        let pq = dot(&p, &q);
        if !(pq > 0.0) {
            return Err(Error::SolverDivergence { iterations: it, residual: res });
        }
        let step = rz / pq;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * q[i];
        }
        op.precondition(&r, &mut z);
        let rz_new = dot(&r, &z);
        res = rz_new.max(0.0).sqrt() / bnorm;
        if res <= rel_tol {
            // confirm with the true residual to guard against drift
            op.apply(x, &mut q);
            for i in 0..n {
                r[i] = b[i] - q[i];
            }
            op.precondition(&r, &mut z);
            rz = dot(&r, &z);
            res = rz.max(0.0).sqrt() / bnorm;
            if res <= rel_tol {
                return Ok(SolveInfo { iterations: it, residual: res });
            }
            restarts += 1;
            if restarts >= 3 {
                let floor = 10.0 * op.rounding_floor(x) / bnorm;
                if res <= ATTAINABLE_RESIDUAL.max(rel_tol).max(floor) {
                    return Ok(SolveInfo { iterations: it, residual: res });
                }
                return Err(Error::SolverDivergence { iterations: it, residual: res });
            }
            p.copy_from_slice(&z);
            continue;
        }
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::SolverDivergence { iterations: max_iter, residual: res })
}

/// Reverse Cuthill-McKee ordering of a symmetric graph; returns `order` with
/// `order[k]` the vertex placed at position `k`.
pub fn reverse_cuthill_mckee(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let degree = |v: usize| adj[v].len();
    while order.len() < n {
        let start = (0..n)
            .filter(|&v| !visited[v])
            .min_by_key(|&v| (degree(v), v))
            .expect("unvisited vertex exists");
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| (degree(w), w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}
