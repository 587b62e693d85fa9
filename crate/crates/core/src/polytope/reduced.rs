//! The per-state minimization restricted to its active variables.
//!
//! At a state `x`, an entry `u_ij` can influence the drift or the cost only when
//! `x_j < 0`, and it can be nonzero only when `x_i > 0` (row constraint) and the
//! route is allowed. Every other entry is pinned to 0, which leaves a small
//! polytope in the active variables `v_k = u_{i_k j_k}`:
//!
//! * `0 ≤ v_k ≤ 1`,
//! * `Σ_{k in column j} v_k ≤ 1`,
//! * `Σ_{k in row i} w_k v_k ≤ x_i⁺` with `w_k = x_{j_k}⁻`.

use smallvec::SmallVec;

use crate::cost::CostSpec;
use crate::error::{Error, Result};
use crate::model::{neg, pos, ModelParams};

pub(crate) type Vars = SmallVec<[f64; 8]>;

const DYKSTRA_MAX_ITERS: usize = 20_000;
const DYKSTRA_TOL: f64 = 1e-14;
const VERTEX_COMBINATION_CAP: u64 = 200_000;
const FEAS_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub(crate) struct Reduced {
    pub d: usize,
    /// Flat row-major index `i * d + j` of each active variable, ascending.
    pub flat: SmallVec<[usize; 8]>,
    pub row: SmallVec<[usize; 8]>,
    pub col: SmallVec<[usize; 8]>,
    pub w: Vars,
    /// Tightest single-variable upper bound `min(1, x_i⁺ / w_k)`.
    pub cap: Vars,
    pub xplus: SmallVec<[f64; 8]>,
    /// No row or column holds two active variables, so the polytope is a box.
    pub singleton: bool,
}

impl Reduced {
    pub fn new(x: &[f64], mask: &[bool]) -> Self {
        let d = x.len();
        let mut r = Reduced {
            d,
            flat: SmallVec::new(),
            row: SmallVec::new(),
            col: SmallVec::new(),
            w: SmallVec::new(),
            cap: SmallVec::new(),
            xplus: x.iter().map(|&v| pos(v)).collect(),
            singleton: true,
        };
        let mut row_count = [0u8; 64];
        let mut col_count = [0u8; 64];
        for i in 0..d {
            let xp = pos(x[i]);
            if xp <= 0.0 {
                continue;
            }
            for j in 0..d {
                let xm = neg(x[j]);
                if i == j || xm <= 0.0 || !mask[i * d + j] {
                    continue;
                }
                r.flat.push(i * d + j);
                r.row.push(i);
                r.col.push(j);
                r.w.push(xm);
                r.cap.push((xp / xm).min(1.0));
                row_count[i] += 1;
                col_count[j] += 1;
            }
        }
        r.singleton = row_count[..d].iter().chain(&col_count[..d]).all(|&c| c <= 1);
        r
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.flat.len()
    }

    pub fn scatter(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|e| *e = 0.0);
        for (k, &f) in self.flat.iter().enumerate() {
            out[f] = v[k];
        }
    }

    pub fn gather(&self, u: &[f64]) -> Vars {
        self.flat.iter().map(|&f| u[f]).collect()
    }

    #[cfg(test)]
    pub fn is_feasible(&self, v: &[f64], tol: f64) -> bool {
        if v.iter().any(|&e| e < -tol || e > 1.0 + tol) {
            return false;
        }
        let mut colsum = [0.0f64; 64];
        let mut rowsum = [0.0f64; 64];
        for k in 0..self.n() {
            colsum[self.col[k]] += v[k];
            rowsum[self.row[k]] += self.w[k] * v[k];
        }
        (0..self.d).all(|i| colsum[i] <= 1.0 + tol && rowsum[i] <= self.xplus[i] + tol)
    }

    /// Euclidean projection onto the reduced polytope. Exact for box-shaped
    /// polytopes; Dykstra's alternating projections otherwise, followed by a
    /// scaling step that makes the result exactly feasible.
    pub fn project(&self, z: &[f64], out: &mut [f64]) {
        let n = self.n();
        if self.singleton {
            for k in 0..n {
                out[k] = z[k].clamp(0.0, self.cap[k]);
            }
            return;
        }
        let mut x: Vars = z.iter().copied().collect();
        let mut p1: Vars = SmallVec::from_elem(0.0, n);
        let mut p2 = p1.clone();
        let mut p3 = p1.clone();
        let mut y = p1.clone();
        for _ in 0..DYKSTRA_MAX_ITERS {
            // The iterate alone can stall for a cycle before convergence, so the
            // correction terms are part of the stopping test.
            let prev: SmallVec<[f64; 32]> = x.iter().chain(&p1).chain(&p2).chain(&p3).copied().collect();
            for k in 0..n {
                let t = x[k] + p1[k];
                y[k] = t.clamp(0.0, 1.0);
                p1[k] = t - y[k];
            }
            let mut t: Vars = (0..n).map(|k| y[k] + p2[k]).collect();
            self.project_columns(&mut t);
            for k in 0..n {
                p2[k] = y[k] + p2[k] - t[k];
                y[k] = t[k];
            }
            let mut t: Vars = (0..n).map(|k| y[k] + p3[k]).collect();
            self.project_rows(&mut t);
            for k in 0..n {
                p3[k] = y[k] + p3[k] - t[k];
                x[k] = t[k];
            }
            let change = x.iter().chain(&p1).chain(&p2).chain(&p3).zip(&prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if change <= DYKSTRA_TOL {
                break;
            }
        }
        out[..n].copy_from_slice(&x);
        self.make_feasible(out);
        self.polish_projection(z, out);
    }

    fn project_columns(&self, v: &mut [f64]) {
        for j in 0..self.d {
            let (mut s, mut cnt) = (0.0, 0usize);
            for k in 0..self.n() {
                if self.col[k] == j {
                    s += v[k];
                    cnt += 1;
                }
            }
            if cnt > 0 && s > 1.0 {
                let shift = (s - 1.0) / cnt as f64;
                for k in 0..self.n() {
                    if self.col[k] == j {
                        v[k] -= shift;
                    }
                }
            }
        }
    }

    fn project_rows(&self, v: &mut [f64]) {
        for i in 0..self.d {
            let (mut s, mut ww) = (0.0, 0.0);
            for k in 0..self.n() {
                if self.row[k] == i {
                    s += self.w[k] * v[k];
                    ww += self.w[k] * self.w[k];
                }
            }
            if ww > 0.0 && s > self.xplus[i] {
                let lam = (s - self.xplus[i]) / ww;
                for k in 0..self.n() {
                    if self.row[k] == i {
                        v[k] -= lam * self.w[k];
                    }
                }
            }
        }
    }

    /// Clamps to the box, then scales overfull columns and rows down. Each step
    /// preserves the constraints enforced before it.
    pub fn make_feasible(&self, v: &mut [f64]) {
        let n = self.n();
        for e in v[..n].iter_mut() {
            *e = e.clamp(0.0, 1.0);
        }
        for j in 0..self.d {
            let s: f64 = (0..n).filter(|&k| self.col[k] == j).map(|k| v[k]).sum();
            if s > 1.0 {
                for k in 0..n {
                    if self.col[k] == j {
                        v[k] /= s;
                    }
                }
            }
        }
        for i in 0..self.d {
            let s: f64 = (0..n).filter(|&k| self.row[k] == i).map(|k| self.w[k] * v[k]).sum();
            if s > self.xplus[i] {
                let f = self.xplus[i] / s;
                for k in 0..n {
                    if self.row[k] == i {
                        v[k] *= f;
                    }
                }
            }
        }
    }

    /// Constraint rows `a_r · v ≤ b_r`: lower and upper bounds, columns with
    /// two or more members, and every nonempty row.
    fn constraints(&self) -> (Vec<Vars>, Vec<f64>) {
        let n = self.n();
        let mut a: Vec<Vars> = Vec::new();
        let mut b: Vec<f64> = Vec::new();
        for k in 0..n {
            let mut lo: Vars = SmallVec::from_elem(0.0, n);
            lo[k] = -1.0;
            a.push(lo);
            b.push(0.0);
            let mut hi: Vars = SmallVec::from_elem(0.0, n);
            hi[k] = 1.0;
            a.push(hi);
            b.push(1.0);
        }
        for j in 0..self.d {
            if (0..n).filter(|&k| self.col[k] == j).count() >= 2 {
                a.push((0..n).map(|k| if self.col[k] == j { 1.0 } else { 0.0 }).collect());
                b.push(1.0);
            }
        }
        for i in 0..self.d {
            if (0..n).any(|k| self.row[k] == i) {
                a.push((0..n).map(|k| if self.row[k] == i { self.w[k] } else { 0.0 }).collect());
                b.push(self.xplus[i]);
            }
        }
        (a, b)
    }

    /// Replaces an approximate projection of `z` by the exact projection onto
    /// the face it identifies, provided the result is feasible and the
    /// multipliers have the right sign.
    fn polish_projection(&self, z: &[f64], v: &mut [f64]) {
        let n = self.n();
        let (a, b) = self.constraints();
        let active: Vec<usize> = (0..a.len()).filter(|&r| dot(&a[r], v) >= b[r] - 1e-9).collect();
        if active.is_empty() {
            return;
        }
        let m = active.len();
        let amat = nalgebra::DMatrix::from_fn(m, n, |r, c| a[active[r]][c]);
        let rhs = nalgebra::DVector::from_fn(m, |r, _| dot(&a[active[r]], z) - b[active[r]]);
        let gram = &amat * amat.transpose();
        let Ok(lam) = gram.svd(true, true).solve(&rhs, 1e-12) else {
            return;
        };
        if lam.iter().any(|&l| l < -1e-10) {
            return;
        }
        let shift = amat.transpose() * lam;
        let cand: Vars = (0..n).map(|k| z[k] - shift[k]).collect();
        if (0..a.len()).all(|r| dot(&a[r], &cand) <= b[r] + 1e-13) {
            v[..n].copy_from_slice(&cand);
            self.make_feasible(v);
        }
    }

    /// All vertices of the reduced polytope, or `None` when enumeration would
    /// exceed the combination cap.
    pub fn vertices(&self) -> Option<Vec<Vars>> {
        let n = self.n();
        if n == 0 {
            return Some(vec![SmallVec::new()]);
        }
        if self.singleton {
            let mut out = Vec::with_capacity(1 << n);
            for mask in 0..(1u32 << n) {
                out.push((0..n).map(|k| if mask >> k & 1 == 1 { self.cap[k] } else { 0.0 }).collect());
            }
            return Some(out);
        }
        let (a, b) = self.constraints();
        let m = a.len();
        if binomial(m as u64, n as u64) > VERTEX_COMBINATION_CAP {
            return None;
        }
        let mut out: Vec<Vars> = Vec::new();
        let mut combo: Vec<usize> = (0..n).collect();
        loop {
            if let Some(v) =
                solve_square(&combo.iter().map(|&r| a[r].clone()).collect::<Vec<_>>(), &combo.iter().map(|&r| b[r]).collect::<Vec<_>>())
            {
                let feasible = (0..m).all(|r| dot(&a[r], &v) <= b[r] + FEAS_TOL);
                if feasible {
                    let mut v = v;
                    for e in v.iter_mut() {
                        if e.abs() < 1e-14 {
                            *e = 0.0;
                        }
                    }
                    self.make_feasible(&mut v);
                    if !out.iter().any(|o| o.iter().zip(&v).all(|(p, q)| (p - q).abs() < 1e-10)) {
                        out.push(v);
                    }
                }
            }
            if !next_combination(&mut combo, m) {
                break;
            }
        }
        Some(out)
    }
}

fn binomial(m: u64, k: u64) -> u64 {
    if k > m {
        return 0;
    }
    let k = k.min(m - k);
    let mut r: u64 = 1;
    for i in 0..k {
        r = r.saturating_mul(m - i) / (i + 1);
    }
    r
}

fn next_combination(c: &mut [usize], m: usize) -> bool {
    let k = c.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if c[i] < m - k + i {
            c[i] += 1;
            for t in i + 1..k {
                c[t] = c[t - 1] + 1;
            }
            return true;
        }
    }
    false
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gaussian elimination with partial pivoting; `None` for (near-)singular systems.
fn solve_square(a: &[Vars], b: &[f64]) -> Option<Vars> {
    let n = b.len();
    let mut m: Vec<Vars> = a.to_vec();
    let mut rhs: Vars = b.iter().copied().collect();
    for c in 0..n {
        let piv = (c..n).max_by(|&r, &s| m[r][c].abs().total_cmp(&m[s][c].abs()))?;
        if m[piv][c].abs() < 1e-12 {
            return None;
        }
        m.swap(c, piv);
        rhs.swap(c, piv);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            if f != 0.0 {
                for t in c..n {
                    let v = m[c][t];
                    m[r][t] -= f * v;
                }
                rhs[r] -= f * rhs[c];
            }
        }
    }
    let mut x: Vars = SmallVec::from_elem(0.0, n);
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|t| m[r][t] * x[t]).sum();
        x[r] = (rhs[r] - s) / m[r][r];
    }
    Some(x)
}

/// The objective `p·b(x, u) + r(q(x, u)⁺) + ε‖u‖²` in reduced coordinates.
pub(crate) struct Objective<'a> {
    pub red: &'a Reduced,
    pub cost: &'a CostSpec,
    /// `p·b(x, 0)`.
    pub base: f64,
    /// Coefficient of `v_k` in `p·b`, i.e. `p_i (γ_i − μ_ij) w_k`.
    pub lin: Vars,
    pub eps: f64,
}

impl<'a> Objective<'a> {
    pub fn new(params: &ModelParams, cost: &'a CostSpec, red: &'a Reduced, x: &[f64], p: &[f64], eps: f64) -> Self {
        let d = red.d;
        let gamma = params.gamma();
        let ell = params.ell();
        let mut base = 0.0;
        for i in 0..d {
            let b0 = ell[i] + params.mu(i, i) * neg(x[i]) - gamma[i] * pos(x[i]);
            base += p[i] * b0;
        }
        let lin = (0..red.n())
            .map(|k| {
                let (i, j) = (red.row[k], red.col[k]);
                p[i] * (gamma[i] - params.mu(i, j)) * red.w[k]
            })
            .collect();
        Objective { red, cost, base, lin, eps }
    }

    fn queues(&self, v: &[f64]) -> SmallVec<[f64; 8]> {
        let mut q = self.red.xplus.clone();
        for k in 0..self.red.n() {
            q[self.red.row[k]] -= self.red.w[k] * v[k];
        }
        for e in q.iter_mut() {
            *e = pos(*e);
        }
        q
    }

    pub fn value(&self, v: &[f64]) -> f64 {
        let q = self.queues(v);
        let mut s = self.base + self.cost.eval(&q);
        for k in 0..self.red.n() {
            s += self.lin[k] * v[k] + self.eps * v[k] * v[k];
        }
        s
    }

    pub fn grad(&self, v: &[f64], out: &mut [f64]) {
        let q = self.queues(v);
        let mut rq: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, self.red.d);
        self.cost.grad_into(&q, &mut rq);
        for k in 0..self.red.n() {
            out[k] = self.lin[k] - rq[self.red.row[k]] * self.red.w[k] + 2.0 * self.eps * v[k];
        }
    }

    /// Gradient of the part that is linear in `v` when the cost is linear.
    fn linear_coeffs(&self) -> Vars {
        let h = self.cost.h();
        (0..self.red.n()).map(|k| self.lin[k] - h[self.red.row[k]] * self.red.w[k]).collect()
    }

    /// Exact minimizer of a linear cost with `ε > 0`: a projection of the
    /// unconstrained stationary point.
    pub fn solve_linear_quadratic(&self, out: &mut [f64]) {
        let g = self.linear_coeffs();
        let z: Vars = g.iter().map(|&c| -c / (2.0 * self.eps)).collect();
        self.red.project(&z, out);
    }

    /// Exact minimizer when every active variable is decoupled: a monotone
    /// one-dimensional root search per variable.
    pub fn solve_separable(&self, out: &mut [f64]) {
        let n = self.red.n();
        let mut v: Vars = SmallVec::from_elem(0.0, n);
        for k in 0..n {
            let deriv = |t: f64, v: &mut Vars| {
                v[k] = t;
                let mut g: Vars = SmallVec::from_elem(0.0, n);
                self.grad(v, &mut g);
                g[k]
            };
            let cap = self.red.cap[k];
            if deriv(0.0, &mut v) >= 0.0 {
                v[k] = 0.0;
                continue;
            }
            if deriv(cap, &mut v) <= 0.0 {
                v[k] = cap;
                continue;
            }
            let (mut lo, mut hi) = (0.0, cap);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if deriv(mid, &mut v) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            v[k] = 0.5 * (lo + hi);
        }
        out[..n].copy_from_slice(&v);
    }

    /// Minimizes a linear objective over the polytope, returning the
    /// lexicographically smallest optimal vertex.
    pub fn solve_lp(&self, vertices: Option<&[Vars]>, out: &mut [f64]) -> Result<()> {
        let g = self.linear_coeffs();
        let n = self.red.n();
        if self.red.singleton {
            for k in 0..n {
                out[k] = if g[k] < 0.0 { self.red.cap[k] } else { 0.0 };
            }
            return Ok(());
        }
        let verts = vertices.ok_or_else(|| Error::Capacity(format!("vertex enumeration over {n} active variables exceeds the cap")))?;
        let best = lexicographic_argmin(verts, |v| dot(&g, v));
        out[..n].copy_from_slice(&verts[best]);
        Ok(())
    }

    /// Accelerated projected gradient with backtracking and adaptive restart.
    /// Stops when the Frank–Wolfe gap (if vertices are known) is below `tol`
    /// relative to the objective and the projected-gradient step has stalled.
    pub fn solve_fista(
        &self,
        start: &[f64],
        vertices: Option<&[Vars]>,
        tol: f64,
        max_iters: usize,
        out: &mut [f64],
    ) -> Result<(usize, f64)> {
        let n = self.red.n();
        if n == 0 {
            return Ok((0, 0.0));
        }
        let mut v: Vars = SmallVec::from_elem(0.0, n);
        self.red.project(start, &mut v);
        let mut y = v.clone();
        let mut fv = self.value(&v);
        let mut t: f64 = 1.0;
        let mut lip = (2.0 * self.eps).max(1e-3);
        let mut g: Vars = SmallVec::from_elem(0.0, n);
        let mut gv: Vars = SmallVec::from_elem(0.0, n);
        let mut cand: Vars = SmallVec::from_elem(0.0, n);
        let mut gap = f64::INFINITY;
        for it in 0..max_iters {
            self.grad(&y, &mut g);
            let fy = self.value(&y);
            loop {
                let z: Vars = (0..n).map(|k| y[k] - g[k] / lip).collect();
                self.red.project(&z, &mut cand);
                let diff: Vars = (0..n).map(|k| cand[k] - y[k]).collect();
                let model = fy + dot(&g, &diff) + 0.5 * lip * dot(&diff, &diff);
                let fc = self.value(&cand);
                if fc <= model + 1e-14 * (1.0 + fy.abs()) || lip > 1e14 {
                    break;
                }
                lip *= 2.0;
            }
            let fc = self.value(&cand);
            // A plain gradient step (t = 1) is always accepted: with backtracking
            // it can only rise through rounding.
            if fc > fv + 1e-15 * (1.0 + fv.abs()) && t > 1.0 {
                // Adaptive restart: drop momentum and retry from the last iterate.
                y.copy_from_slice(&v);
                t = 1.0;
                if it + 1 == max_iters {
                    break;
                }
                continue;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            for k in 0..n {
                y[k] = cand[k] + beta * (cand[k] - v[k]);
            }
            v.copy_from_slice(&cand);
            fv = fc;
            t = t_next;
            lip = (lip * 0.9).max(1e-6);

            // Convergence at the accepted iterate.
            self.grad(&v, &mut gv);
            let z: Vars = (0..n).map(|k| v[k] - gv[k] / lip).collect();
            self.red.project(&z, &mut cand);
            let step = (0..n).map(|k| (cand[k] - v[k]).abs()).fold(0.0, f64::max);
            gap = match vertices {
                Some(verts) => {
                    let s = verts.iter().map(|s| dot(&gv, s)).fold(f64::INFINITY, f64::min);
                    dot(&gv, &v) - s
                }
                None => lip * step * step + step * gv.iter().map(|e| e.abs()).sum::<f64>(),
            };
            if gap <= tol * (1.0 + fv.abs()) && step <= 1e-12 {
                out[..n].copy_from_slice(&v);
                return Ok((it + 1, gap.max(0.0)));
            }
        }
        out[..n].copy_from_slice(&v);
        Err(Error::Solver {
            message: "projected-gradient minimizer did not reach the objective tolerance".into(),
            iterations: max_iters,
            gap,
            last_iterate: v.to_vec(),
        })
    }
}

/// Index of the minimum of `f` over `items`, breaking ties (within a relative
/// 1e-12) toward the lexicographically smallest item.
pub(crate) fn lexicographic_argmin(items: &[Vars], f: impl Fn(&[f64]) -> f64) -> usize {
    let vals: Vec<f64> = items.iter().map(|v| f(v)).collect();
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * (1.0 + min.abs());
    let mut best: Option<usize> = None;
    for (i, &val) in vals.iter().enumerate() {
        if val <= min + tol {
            best = match best {
                None => Some(i),
                Some(b) if lex_less(&items[i], &items[b]) => Some(i),
                keep => keep,
            };
        }
    }
    best.unwrap_or(0)
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if (x - y).abs() > 1e-12 {
            return x < y;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_d2_is_singleton_box() {
        let r = Reduced::new(&[2.0, -1.0], &[false, true, true, false]);
        assert_eq!(r.n(), 1);
        assert_eq!(r.flat.as_slice(), &[1]);
        assert!(r.singleton);
        assert_eq!(r.cap[0], 1.0);
        let r = Reduced::new(&[0.5, -2.0], &[false, true, true, false]);
        assert_eq!(r.cap[0], 0.25);
        let r = Reduced::new(&[2.0, 1.0], &[false, true, true, false]);
        assert_eq!(r.n(), 0);
    }

    #[test]
    fn coupled_projection_is_feasible_and_optimal_against_vertices() {
        // Two helpers into one column plus one helper row serving two columns.
        let mask = vec![true; 16];
        let x = [1.0, 0.5, -0.8, -1.5];
        let r = Reduced::new(&x, &mask);
        assert!(!r.singleton);
        let z: Vars = r.flat.iter().map(|_| 0.9).collect();
        let mut out: Vars = SmallVec::from_elem(0.0, r.n());
        r.project(&z, &mut out);
        assert!(r.is_feasible(&out, 1e-12));
        // Variational inequality: (z − P z)·(v − P z) ≤ 0 for every vertex v.
        for v in r.vertices().unwrap() {
            let s: f64 = (0..r.n()).map(|k| (z[k] - out[k]) * (v[k] - out[k])).sum();
            assert!(s <= 1e-9, "{s}");
        }
    }

    #[test]
    fn combination_enumeration_counts() {
        let mut c = vec![0, 1];
        let mut count = 1;
        while next_combination(&mut c, 5) {
            count += 1;
        }
        assert_eq!(count, 10);
        assert_eq!(binomial(12, 4), 495);
    }
}
