//! Sparse matrices and linear solvers.

use faer::prelude::*;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coordinate-format accumulator; duplicates are summed on compression.
#[derive(Debug, Clone, Default)]
pub struct Triplets {
    pub nrows: usize,
    pub ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Triplets {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.nrows && j < self.ncols);
        if v != 0.0 {
            self.entries.push((i, j, v));
        }
    }

    /// Adds `scale * a` with row/column offsets.
    pub fn add_block(&mut self, a: &Csr, row0: usize, col0: usize, scale: f64) {
        for i in 0..a.nrows {
            for k in a.indptr[i]..a.indptr[i + 1] {
                self.push(row0 + i, col0 + a.indices[k], scale * a.data[k]);
            }
        }
    }

    /// Adds `scale * aᵀ` with row/column offsets.
    pub fn add_block_transpose(&mut self, a: &Csr, row0: usize, col0: usize, scale: f64) {
        for i in 0..a.nrows {
            for k in a.indptr[i]..a.indptr[i + 1] {
                self.push(row0 + a.indices[k], col0 + i, scale * a.data[k]);
            }
        }
    }

    pub fn to_csr(&self) -> Csr {
        let mut e = self.entries.clone();
        e.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; self.nrows + 1];
        let mut indices = Vec::with_capacity(e.len());
        let mut data: Vec<f64> = Vec::with_capacity(e.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in e {
            if last == Some((i, j)) {
                *data.last_mut().unwrap() += v;
            } else {
                indices.push(j);
                data.push(v);
                indptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..self.nrows {
            indptr[i + 1] += indptr[i];
        }
        Csr {
            nrows: self.nrows,
            ncols: self.ncols,
            indptr,
            indices,
            data,
        }
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl Csr {
    pub fn from_rows(ncols: usize, rows: &[Vec<(usize, f64)>]) -> Csr {
        let mut t = Triplets::new(rows.len(), ncols);
        for (i, r) in rows.iter().enumerate() {
            for &(j, v) in r {
                t.push(i, j, v);
            }
        }
        t.to_csr()
    }

    pub fn identity(n: usize) -> Csr {
        let mut t = Triplets::new(n, n);
        for i in 0..n {
            t.push(i, i, 1.0);
        }
        t.to_csr()
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.indptr[i]..self.indptr[i + 1]).map(move |k| (self.indices[k], self.data[k]))
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        for (i, yi) in y.iter_mut().enumerate().take(self.nrows) {
            let mut s = 0.0;
            for k in self.indptr[i]..self.indptr[i + 1] {
                s += self.data[k] * x[self.indices[k]];
            }
            *yi = s;
        }
    }

    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for k in self.indptr[i]..self.indptr[i + 1] {
                y[self.indices[k]] += self.data[k] * xi;
            }
        }
        y
    }

    pub fn transpose(&self) -> Csr {
        let mut t = Triplets::new(self.ncols, self.nrows);
        t.add_block_transpose(self, 0, 0, 1.0);
        t.to_csr()
    }

    /// Largest |a_ij − a_ji|.
    pub fn asymmetry(&self) -> f64 {
        let t = self.transpose();
        let mut d = Triplets::new(self.nrows, self.ncols);
        d.add_block(self, 0, 0, 1.0);
        d.add_block(&t, 0, 0, -1.0);
        d.to_csr().data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>> {
        let mut trips = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                trips.push(Triplet::new(i, j, v));
            }
        }
        SparseColMat::<usize, f64>::try_new_from_triplets(self.nrows, self.ncols, &trips)
            .map_err(|e| Error::SingularSystem(format!("matrix assembly failed: {e:?}")))
    }
}

/// Linear solver selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    #[default]
    Direct,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub kind: SolverKind,
    /// Relative residual tolerance.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            kind: SolverKind::Direct,
            tol: 1e-10,
            max_iter: 20_000,
        }
    }
}

enum Backend {
    Direct(Lu<usize, f64>),
    Iterative,
}

/// A factorized (or iteratively solved) square system.
pub struct LinearSolver {
    a: Csr,
    backend: Backend,
    opts: SolverOptions,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl LinearSolver {
    pub fn new(a: Csr, opts: SolverOptions) -> Result<Self> {
        if a.nrows != a.ncols {
            return Err(Error::SingularSystem("matrix is not square".into()));
        }
        let backend = match opts.kind {
            SolverKind::Direct => {
                let m = a.to_faer()?;
                let lu = m
                    .sp_lu()
                    .map_err(|e| Error::SingularSystem(format!("LU failed: {e:?}")))?;
                Backend::Direct(lu)
            }
            SolverKind::Iterative => Backend::Iterative,
        };
        Ok(LinearSolver { a, backend, opts })
    }

    pub fn matrix(&self) -> &Csr {
        &self.a
    }

    pub fn residual(&self, x: &[f64], b: &[f64]) -> f64 {
        let ax = self.a.matvec(x);
        let r: Vec<f64> = ax.iter().zip(b).map(|(p, q)| p - q).collect();
        norm(&r) / norm(b).max(f64::MIN_POSITIVE)
    }

    /// Solves A x = b; returns x and the relative residual.
    pub fn solve(&self, b: &[f64]) -> Result<(Vec<f64>, f64)> {
        assert_eq!(b.len(), self.a.nrows);
        if b.iter().all(|&v| v == 0.0) {
            return Ok((vec![0.0; b.len()], 0.0));
        }
        let x = match &self.backend {
            Backend::Direct(lu) => {
                let mut x = self.lu_solve(lu, b);
                // two steps of iterative refinement
                for _ in 0..2 {
                    let ax = self.a.matvec(&x);
                    let r: Vec<f64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
                    if norm(&r) <= 1e-15 * norm(b) {
                        break;
                    }
                    let dx = self.lu_solve(lu, &r);
                    for (xi, di) in x.iter_mut().zip(&dx) {
                        *xi += di;
                    }
                }
                x
            }
            Backend::Iterative => gmres(&self.a, b, self.opts.tol, self.opts.max_iter, 60)?,
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem("non-finite solution".into()));
        }
        let res = self.residual(&x, b);
        if res > 1e-6_f64.max(self.opts.tol) {
            return Err(Error::SingularSystem(format!(
                "relative residual {res:.3e} after solve"
            )));
        }
        Ok((x, res))
    }

    fn lu_solve(&self, lu: &Lu<usize, f64>, b: &[f64]) -> Vec<f64> {
        let rhs = Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
        let sol = lu.solve(&rhs);
        (0..b.len()).map(|i| sol[(i, 0)]).collect()
    }
}

/// Restarted GMRES without preconditioning.
pub fn gmres(a: &Csr, b: &[f64], tol: f64, max_iter: usize, restart: usize) -> Result<Vec<f64>> {
    let n = b.len();
    let bnorm = norm(b);
    let mut x = vec![0.0; n];
    let mut iters = 0;
    let mut best = f64::INFINITY;
    let mut stagnant = 0;
    while iters < max_iter {
        let ax = a.matvec(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
        let beta = norm(&r);
        if beta <= tol * bnorm {
            return Ok(x);
        }
        if beta < 0.999 * best {
            best = beta;
            stagnant = 0;
        } else {
            stagnant += 1;
            if stagnant > 3 {
                break;
            }
        }
        let m = restart.min(n);
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|t| t / beta).collect()];
        let mut hmat = vec![vec![0.0; m]; m + 1];
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            iters += 1;
            let mut w = a.matvec(&v[k]);
            for (j, vj) in v.iter().enumerate() {
                let hjk: f64 = w.iter().zip(vj).map(|(p, q)| p * q).sum();
                hmat[j][k] = hjk;
                for (wi, vi) in w.iter_mut().zip(vj) {
                    *wi -= hjk * vi;
                }
            }
            let wn = norm(&w);
            hmat[k + 1][k] = wn;
            for j in 0..k {
                let t = cs[j] * hmat[j][k] + sn[j] * hmat[j + 1][k];
                hmat[j + 1][k] = -sn[j] * hmat[j][k] + cs[j] * hmat[j + 1][k];
                hmat[j][k] = t;
            }
            let den = (hmat[k][k].powi(2) + hmat[k + 1][k].powi(2)).sqrt();
            if den == 0.0 {
                k_used = k;
                break;
            }
            cs[k] = hmat[k][k] / den;
            sn[k] = hmat[k + 1][k] / den;
            hmat[k][k] = den;
            hmat[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            if g[k + 1].abs() <= tol * bnorm || wn == 0.0 {
                break;
            }
            v.push(w.iter().map(|t| t / wn).collect());
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= hmat[i][j] * y[j];
            }
            y[i] = s / hmat[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            for (xi, vi) in x.iter_mut().zip(&v[j]) {
                *xi += yj * vi;
            }
        }
    }
    let ax = a.matvec(&x);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
    if norm(&r) <= tol * bnorm {
        return Ok(x);
    }
    Err(Error::NoConvergence(format!(
        "GMRES stagnated at relative residual {:.3e} after {iters} iterations",
        norm(&r) / bnorm
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize) -> Csr {
        let mut t = Triplets::new(n, n);
        for i in 0..n {
            t.push(i, i, 4.0);
            if i > 0 {
                t.push(i, i - 1, -1.0);
            }
            if i + 1 < n {
                t.push(i, i + 1, -1.5);
            }
        }
        t.to_csr()
    }

    #[test]
    fn duplicates_are_summed() {
        let mut t = Triplets::new(2, 2);
        t.push(0, 0, 1.0);
        t.push(0, 0, 2.0);
        t.push(1, 0, 1.0);
        let a = t.to_csr();
        assert_eq!(a.nnz(), 2);
        assert_eq!(a.matvec(&[1.0, 0.0]), vec![3.0, 1.0]);
    }

    #[test]
    fn direct_and_iterative_agree() {
        let a = tridiag(50);
        let b: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let d = LinearSolver::new(a.clone(), SolverOptions::default()).unwrap();
        let (x1, r1) = d.solve(&b).unwrap();
        assert!(r1 < 1e-14);
        let opts = SolverOptions {
            kind: SolverKind::Iterative,
            ..Default::default()
        };
        let it = LinearSolver::new(a, opts).unwrap();
        let (x2, _) = it.solve(&b).unwrap();
        for (p, q) in x1.iter().zip(&x2) {
            assert!((p - q).abs() < 1e-8);
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let mut t = Triplets::new(2, 2);
        t.push(0, 0, 1.0);
        t.push(0, 1, 1.0);
        t.push(1, 0, 1.0);
        t.push(1, 1, 1.0);
        let r = LinearSolver::new(t.to_csr(), SolverOptions::default())
            .and_then(|s| s.solve(&[1.0, 0.0]));
        assert!(matches!(r, Err(Error::SingularSystem(_))));
    }

    #[test]
    fn transpose_round_trip() {
        let a = tridiag(7);
        assert_eq!(a.transpose().transpose(), a);
        let x: Vec<f64> = (0..7).map(|i| i as f64).collect();
        assert_eq!(a.transpose().matvec(&x), a.matvec_transpose(&x));
    }
}
