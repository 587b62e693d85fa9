//! Compressed sparse rows, an incomplete LU(0) preconditioner, and a
//! right-preconditioned BiCGSTAB solver. Everything runs serially in a fixed
//! order so results are bitwise reproducible.

use crate::error::{Error, Result};

/// Square sparse matrix in CSR layout with ascending column indices per row.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from per-row `(column, value)` lists. Duplicate columns
    /// within a row are summed.
    pub fn from_rows(n: usize, rows: impl IntoIterator<Item = Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            let start = cols.len();
            for (c, v) in row {
                assert!(c < n, "column {c} out of range for n = {n}");
                if cols.len() > start && *cols.last().unwrap() == c {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        assert_eq!(row_ptr.len(), n + 1, "expected {n} rows");
        Self { n, row_ptr, cols, vals }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[k] * x[self.cols[k]];
            }
            y[i] = s;
        }
    }

    /// `y = xᵀ A`.
    pub fn mul_vec_transposed(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                y[self.cols[k]] += x[i] * self.vals[k];
            }
        }
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n).map(|i| self.vals[self.row_ptr[i]..self.row_ptr[i + 1]].iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    /// Explicit transpose.
    pub fn transpose(&self) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.n];
        for i in 0..self.n {
            for (c, v) in self.row(i) {
                rows[c].push((i, v));
            }
        }
        Self::from_rows(self.n, rows)
    }
}

/// Incomplete LU factorization with the sparsity pattern of the matrix.
#[derive(Clone, Debug)]
pub struct Ilu0 {
    lu: CsrMatrix,
    diag: Vec<usize>,
}

impl Ilu0 {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let n = a.n;
        let mut lu = a.clone();
        let mut diag = vec![usize::MAX; n];
        for i in 0..n {
            for k in lu.row_ptr[i]..lu.row_ptr[i + 1] {
                if lu.cols[k] == i {
                    diag[i] = k;
                }
            }
            if diag[i] == usize::MAX {
                return Err(Error::Numerical(format!("ILU(0): row {i} has no diagonal entry")));
            }
        }
        let mut pos = vec![usize::MAX; n];
        for i in 0..n {
            let (start, end) = (lu.row_ptr[i], lu.row_ptr[i + 1]);
            for k in start..end {
                pos[lu.cols[k]] = k;
            }
            for k in start..end {
                let c = lu.cols[k];
                if c >= i {
                    break;
                }
                let pivot = lu.vals[diag[c]];
                if pivot == 0.0 {
                    return Err(Error::Numerical(format!("ILU(0): zero pivot in row {c}")));
                }
                let f = lu.vals[k] / pivot;
                lu.vals[k] = f;
                for m in diag[c] + 1..lu.row_ptr[c + 1] {
                    let p = pos[lu.cols[m]];
                    if p != usize::MAX {
                        lu.vals[p] -= f * lu.vals[m];
                    }
                }
            }
            for k in start..end {
                pos[lu.cols[k]] = usize::MAX;
            }
            if lu.vals[diag[i]] == 0.0 {
                return Err(Error::Numerical(format!("ILU(0): zero pivot in row {i}")));
            }
        }
        Ok(Self { lu, diag })
    }

    /// Solves `L U z = r` in place.
    pub fn apply(&self, z: &mut [f64]) {
        let lu = &self.lu;
        for i in 0..lu.n {
            let mut s = z[i];
            for k in lu.row_ptr[i]..self.diag[i] {
                s -= lu.vals[k] * z[lu.cols[k]];
            }
            z[i] = s;
        }
        for i in (0..lu.n).rev() {
            let mut s = z[i];
            for k in self.diag[i] + 1..lu.row_ptr[i + 1] {
                s -= lu.vals[k] * z[lu.cols[k]];
            }
            z[i] = s / lu.vals[self.diag[i]];
        }
    }
}

/// Settings for [`bicgstab`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KrylovConfig {
    /// Target for the backward error `‖b − A x‖₂ / (‖A‖∞ ‖x‖₂ + ‖b‖₂)`.
    pub rel_tol: f64,
    pub max_iters: usize,
}

impl Default for KrylovConfig {
    fn default() -> Self {
        Self { rel_tol: 1e-14, max_iters: 20_000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KrylovStats {
    pub iterations: usize,
    /// Normwise backward error `‖b − A x‖ / (‖A‖∞ ‖x‖ + ‖b‖)` at exit.
    pub rel_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solves `A x = b` with right-preconditioned BiCGSTAB, starting from the
/// contents of `x`. The true residual is recomputed at convergence and the
/// iteration restarts if it disagrees with the recursive one.
/// Iterations without halving the residual before BiCGSTAB restarts.
const STAGNATION_WINDOW: usize = 200;

pub fn bicgstab(a: &CsrMatrix, pre: &Ilu0, b: &[f64], x: &mut [f64], cfg: KrylovConfig) -> Result<KrylovStats> {
    let n = a.n;
    let bnorm = norm(b);
    let anorm = a.norm_inf();
    let scale = |x: &[f64]| anorm * norm(x) + bnorm;
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(KrylovStats { iterations: 0, rel_residual: 0.0 });
    }
    let mut r = vec![0.0; n];
    let mut rhat = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut phat = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut shat = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut total = 0usize;
    let mut rel = f64::INFINITY;
    'outer: while total < cfg.max_iters {
        a.mul_vec(x, &mut r);
        for i in 0..n {
            r[i] = b[i] - r[i];
        }
        rel = norm(&r) / scale(x);
        if rel <= cfg.rel_tol {
            return Ok(KrylovStats { iterations: total, rel_residual: rel });
        }
        rhat.copy_from_slice(&r);
        p.iter_mut().for_each(|e| *e = 0.0);
        v.iter_mut().for_each(|e| *e = 0.0);
        let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
        let mut best = f64::INFINITY;
        let mut best_at = total;
        while total < cfg.max_iters {
            total += 1;
            let rho_new = dot(&rhat, &r);
            if rho_new == 0.0 || !rho_new.is_finite() {
                continue 'outer;
            }
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            for i in 0..n {
                p[i] = r[i] + beta * (p[i] - omega * v[i]);
            }
            phat.copy_from_slice(&p);
            pre.apply(&mut phat);
            a.mul_vec(&phat, &mut v);
            let rv = dot(&rhat, &v);
            if rv == 0.0 {
                continue 'outer;
            }
            alpha = rho / rv;
            for i in 0..n {
                s[i] = r[i] - alpha * v[i];
            }
            if norm(&s) <= cfg.rel_tol * scale(x) {
                for i in 0..n {
                    x[i] += alpha * phat[i];
                }
                continue 'outer;
            }
            shat.copy_from_slice(&s);
            pre.apply(&mut shat);
            a.mul_vec(&shat, &mut t);
            let tt = dot(&t, &t);
            if tt == 0.0 {
                continue 'outer;
            }
            omega = dot(&t, &s) / tt;
            for i in 0..n {
                x[i] += alpha * phat[i] + omega * shat[i];
                r[i] = s[i] - omega * t[i];
            }
            let rec = norm(&r) / scale(x);
            if rec <= cfg.rel_tol {
                continue 'outer;
            }
            if rec < 0.5 * best {
                best = rec;
                best_at = total;
            } else if total - best_at > STAGNATION_WINDOW {
                continue 'outer;
            }
            if omega == 0.0 {
                continue 'outer;
            }
        }
    }
    Err(Error::Solver { message: format!("BiCGSTAB did not converge (n = {n})"), iterations: total, gap: rel, last_iterate: Vec::new() })
}

/// Factorizes once and solves for each right-hand side.
pub fn solve_many(a: &CsrMatrix, rhs: &[&[f64]], cfg: KrylovConfig) -> Result<Vec<Vec<f64>>> {
    let pre = Ilu0::new(a)?;
    rhs.iter()
        .map(|b| {
            let mut x = vec![0.0; a.n];
            bicgstab(a, &pre, b, &mut x, cfg)?;
            Ok(x)
        })
        .collect()
}
