//! Model parameters, the Halfin–Whitt scaling sequence, and the drift/queue maps
//! shared by the limiting diffusion and the pre-limit queueing systems.
//!
//! Matrices are dense and row-major: entry `(i, j)` lives at `i * d + j`. For the
//! service-rate matrix, `(i, j)` is the rate at which pool `j` serves class `i`;
//! for a control, `u[(i, j)]` is the fraction of pool `j`'s idle servers that
//! help class `i`.

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{check_dim, Error, Result, Violation};

/// Largest supported number of classes (= pools).
pub const MAX_CLASSES: usize = 8;

#[inline]
pub fn pos(v: f64) -> f64 {
    v.max(0.0)
}

#[inline]
pub fn neg(v: f64) -> f64 {
    (-v).max(0.0)
}

/// Limiting rates of the model. This is the single source of truth for the
/// drift, the queue map, and the diffusion coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelParamsRaw", into = "ModelParamsRaw")]
pub struct ModelParams {
    d: usize,
    lambda: Vec<f64>,
    mu: Vec<f64>,
    gamma: Vec<f64>,
    ell: Vec<f64>,
    mask: Vec<bool>,
}

/// Wire form of [`ModelParams`] used in the JSON configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParamsRaw {
    pub lambda: Vec<f64>,
    pub mu: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
    pub ell: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing_mask: Option<Vec<Vec<bool>>>,
}

impl ModelParamsRaw {
    /// Collects every violation of the model invariants, with paths under `prefix`.
    pub fn violations(&self, prefix: &str) -> Vec<Violation> {
        let mut out = Vec::new();
        let d = self.lambda.len();
        if d == 0 {
            out.push(Violation::new(format!("{prefix}.lambda"), "must be non-empty"));
            return out;
        }
        if d > MAX_CLASSES {
            out.push(Violation::new(format!("{prefix}.lambda"), format!("at most {MAX_CLASSES} classes are supported, got {d}")));
        }
        for (i, &l) in self.lambda.iter().enumerate() {
            if !(l.is_finite() && l > 0.0) {
                out.push(Violation::new(format!("{prefix}.lambda[{i}]"), "must be finite and > 0"));
            }
        }
        if self.gamma.len() != d {
            out.push(Violation::new(format!("{prefix}.gamma"), format!("expected length {d}")));
        }
        for (i, &g) in self.gamma.iter().enumerate() {
            if !(g.is_finite() && g > 0.0) {
                out.push(Violation::new(format!("{prefix}.gamma[{i}]"), "must be finite and > 0"));
            }
        }
        if self.ell.len() != d {
            out.push(Violation::new(format!("{prefix}.ell"), format!("expected length {d}")));
        }
        for (i, &e) in self.ell.iter().enumerate() {
            if !e.is_finite() {
                out.push(Violation::new(format!("{prefix}.ell[{i}]"), "must be finite"));
            }
        }
        if self.mu.len() != d {
            out.push(Violation::new(format!("{prefix}.mu"), format!("expected {d} rows")));
        }
        for (i, row) in self.mu.iter().enumerate() {
            if row.len() != d {
                out.push(Violation::new(format!("{prefix}.mu[{i}]"), format!("expected {d} columns")));
                continue;
            }
            for (j, &m) in row.iter().enumerate() {
                let path = format!("{prefix}.mu[{i}][{j}]");
                if !m.is_finite() {
                    out.push(Violation::new(path, "must be finite"));
                } else if i == j && m <= 0.0 {
                    out.push(Violation::new(path, "own-pool service rate must be > 0"));
                } else if m < 0.0 {
                    out.push(Violation::new(path, "must be >= 0"));
                }
            }
        }
        if let Some(mask) = &self.routing_mask {
            if mask.len() != d {
                out.push(Violation::new(format!("{prefix}.routing_mask"), format!("expected {d} rows")));
            }
            for (i, row) in mask.iter().enumerate() {
                if row.len() != d {
                    out.push(Violation::new(format!("{prefix}.routing_mask[{i}]"), format!("expected {d} columns")));
                }
            }
        }
        out
    }
}

impl TryFrom<ModelParamsRaw> for ModelParams {
    type Error = Error;

    fn try_from(raw: ModelParamsRaw) -> Result<Self> {
        let violations = raw.violations("model");
        if !violations.is_empty() {
            return Err(Error::Config(violations));
        }
        let d = raw.lambda.len();
        let mut mask = vec![true; d * d];
        for i in 0..d {
            mask[i * d + i] = false;
        }
        if let Some(m) = &raw.routing_mask {
            for i in 0..d {
                for j in 0..d {
                    if i != j {
                        mask[i * d + j] = m[i][j];
                    }
                }
            }
        }
        let mut mu = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                // The mask is authoritative: forbidden routes carry no service rate.
                mu[i * d + j] = if i == j || mask[i * d + j] { raw.mu[i][j] } else { 0.0 };
            }
        }
        Ok(ModelParams { d, lambda: raw.lambda, mu, gamma: raw.gamma, ell: raw.ell, mask })
    }
}

impl From<ModelParams> for ModelParamsRaw {
    fn from(p: ModelParams) -> Self {
        let d = p.d;
        let rows = |v: &[f64]| (0..d).map(|i| v[i * d..(i + 1) * d].to_vec()).collect();
        let all_allowed = (0..d).all(|i| (0..d).all(|j| i == j || p.mask[i * d + j]));
        ModelParamsRaw {
            lambda: p.lambda.clone(),
            mu: rows(&p.mu),
            gamma: p.gamma.clone(),
            ell: p.ell.clone(),
            routing_mask: if all_allowed { None } else { Some((0..d).map(|i| (0..d).map(|j| p.mask[i * d + j]).collect()).collect()) },
        }
    }
}

impl ModelParams {
    /// Builds and validates a parameter set. `mu` is given as rows; `routing_mask`
    /// defaults to "every off-diagonal route allowed".
    pub fn new(lambda: Vec<f64>, mu: Vec<Vec<f64>>, gamma: Vec<f64>, ell: Vec<f64>, routing_mask: Option<Vec<Vec<bool>>>) -> Result<Self> {
        ModelParams::try_from(ModelParamsRaw { lambda, mu, gamma, ell, routing_mask })
    }

    /// Symmetric helper: own-pool rates `mu_diag`, every cross rate `mu_off`.
    pub fn symmetric(lambda: Vec<f64>, mu_diag: Vec<f64>, mu_off: f64, gamma: Vec<f64>, ell: Vec<f64>) -> Result<Self> {
        let d = lambda.len();
        check_dim("mu_diag", mu_diag.len(), d)?;
        let mu = (0..d).map(|i| (0..d).map(|j| if i == j { mu_diag[i] } else { mu_off }).collect()).collect();
        Self::new(lambda, mu, gamma, ell, None)
    }

    /// The two-class configuration used throughout the test and acceptance suites.
    pub fn reference() -> Self {
        Self::symmetric(vec![1.0, 1.0], vec![1.0, 1.0], 0.6, vec![1.0, 1.0], vec![-1.0, -1.0]).expect("reference parameters are valid")
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }
    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }
    pub fn ell(&self) -> &[f64] {
        &self.ell
    }
    /// Row-major service-rate matrix.
    pub fn mu_matrix(&self) -> &[f64] {
        &self.mu
    }
    #[inline]
    pub fn mu(&self, i: usize, j: usize) -> f64 {
        self.mu[i * self.d + j]
    }
    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.d + j]
    }
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn with_ell(&self, ell: Vec<f64>) -> Result<Self> {
        check_dim("ell", ell.len(), self.d)?;
        let mut p = self.clone();
        p.ell = ell;
        Ok(p)
    }

    pub(crate) fn rates(&self) -> Rates<'_> {
        Rates { d: self.d, ell: &self.ell, mu: &self.mu, gamma: &self.gamma }
    }
}

/// Borrowed view of the coefficients entering the drift formula, shared by the
/// limiting and the n-th system.
#[derive(Clone, Copy)]
pub(crate) struct Rates<'a> {
    pub d: usize,
    pub ell: &'a [f64],
    pub mu: &'a [f64],
    pub gamma: &'a [f64],
}

impl Rates<'_> {
    /// `b_i = ℓ_i + μ_ii x_i⁻ − Σ_{j≠i} μ_ij u_ij x_j⁻ − γ_i q_i(x, u)`.
    #[inline]
    pub fn drift_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let d = self.d;
        for i in 0..d {
            let mut help = 0.0;
            let mut help_rate = 0.0;
            for j in 0..d {
                if j != i {
                    let w = u[i * d + j] * neg(x[j]);
                    help += w;
                    help_rate += self.mu[i * d + j] * w;
                }
            }
            let q = pos(x[i]) - help;
            out[i] = self.ell[i] + self.mu[i * d + i] * neg(x[i]) - help_rate - self.gamma[i] * q;
        }
    }
}

/// Parameters of the n-th queueing system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledSystemParams {
    pub n: u64,
    pub lambda_n: Vec<f64>,
    /// Row-major, same layout as [`ModelParams::mu_matrix`].
    pub mu_n: Vec<f64>,
    pub gamma_n: Vec<f64>,
    pub ell_n: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ScaledSystemParams {
    /// Builds the n-th system directly from its rates; `ell_n` is derived.
    pub fn new(n: u64, lambda_n: Vec<f64>, mu_n: Vec<f64>, gamma_n: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let d = lambda_n.len();
        if n == 0 {
            return Err(Error::Argument("n must be >= 1".into()));
        }
        check_dim("mu_n", mu_n.len(), d * d)?;
        check_dim("gamma_n", gamma_n.len(), d)?;
        check_dim("mask", mask.len(), d * d)?;
        for (i, &l) in lambda_n.iter().enumerate() {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::config(format!("lambda_n[{i}]"), format!("arrival rate must be > 0, got {l}")));
            }
        }
        if gamma_n.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::Argument("gamma_n must be > 0".into()));
        }
        let mut mu_n = mu_n;
        for i in 0..d {
            if !(mu_n[i * d + i] > 0.0) {
                return Err(Error::Argument(format!("mu_n[{i}][{i}] must be > 0")));
            }
            for j in 0..d {
                if i != j {
                    if mu_n[i * d + j] < 0.0 {
                        return Err(Error::Argument(format!("mu_n[{i}][{j}] must be >= 0")));
                    }
                    if !mask[i * d + j] {
                        mu_n[i * d + j] = 0.0;
                    }
                }
            }
        }
        let sqrt_n = (n as f64).sqrt();
        let ell_n = (0..d).map(|i| (lambda_n[i] - mu_n[i * d + i] * n as f64) / sqrt_n).collect();
        Ok(Self { n, lambda_n, mu_n, gamma_n, ell_n, mask })
    }

    pub fn d(&self) -> usize {
        self.lambda_n.len()
    }

    #[inline]
    pub fn mu(&self, i: usize, j: usize) -> f64 {
        self.mu_n[i * self.d() + j]
    }

    pub(crate) fn rates(&self) -> Rates<'_> {
        Rates { d: self.d(), ell: &self.ell_n, mu: &self.mu_n, gamma: &self.gamma_n }
    }
}

/// A point of the control set: a d×d nonnegative matrix with zero diagonal.
///
/// The constructor only enforces the zero diagonal and finiteness; membership in
/// the state-dependent set is checked by [`crate::polytope::contains`].
#[derive(Clone, Debug, PartialEq)]
pub struct ControlMatrix {
    d: usize,
    entries: SmallVec<[f64; 16]>,
}

impl ControlMatrix {
    pub fn zeros(d: usize) -> Self {
        Self { d, entries: SmallVec::from_elem(0.0, d * d) }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        let mut m = Self::zeros(d);
        for (i, row) in rows.iter().enumerate() {
            check_dim("control row", row.len(), d)?;
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Argument(format!("control entry ({i},{j}) is not finite")));
                }
                if i == j && v != 0.0 {
                    return Err(Error::Argument(format!("control diagonal ({i},{i}) must be 0")));
                }
                m.entries[i * d + j] = v;
            }
        }
        Ok(m)
    }

    pub fn from_flat(d: usize, flat: &[f64]) -> Result<Self> {
        check_dim("control entries", flat.len(), d * d)?;
        let rows: Vec<Vec<f64>> = flat.chunks(d).map(|c| c.to_vec()).collect();
        Self::from_rows(&rows)
    }

    /// Matrix with a single off-diagonal entry set.
    pub fn single(d: usize, i: usize, j: usize, value: f64) -> Self {
        assert!(i != j, "diagonal entries are not controls");
        let mut m = Self::zeros(d);
        m.entries[i * d + j] = value;
        m
    }

    pub fn d(&self) -> usize {
        self.d
    }
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.d + j]
    }
    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        if i != j {
            self.entries[i * self.d + j] = value;
        }
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }
    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.entries
    }
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.d).map(|c| c.to_vec()).collect()
    }
    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|&v| v == 0.0)
    }
    /// Σ u_ij².
    pub fn norm_sq(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum()
    }
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.entries.iter().zip(other.entries.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
    /// Convex combination `(1 − t)·self + t·other`.
    pub fn lerp(&self, other: &Self, t: f64) -> Self {
        let mut m = self.clone();
        for (a, b) in m.entries.iter_mut().zip(other.entries.iter()) {
            *a = (1.0 - t) * *a + t * b;
        }
        m
    }
    /// Membership in the state-independent set M (no row constraint).
    pub fn in_unit_set(&self, mask: &[bool], slack: f64) -> bool {
        let d = self.d;
        for i in 0..d {
            let mut col = 0.0;
            for k in 0..d {
                let v = self.entries[k * d + i];
                if k == i {
                    if v != 0.0 {
                        return false;
                    }
                    continue;
                }
                if v < -slack || v > 1.0 + slack || (!mask[k * d + i] && v > slack) {
                    return false;
                }
                col += v;
            }
            if col > 1.0 + slack {
                return false;
            }
        }
        true
    }
}

impl Serialize for ControlMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ControlMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(de)?;
        ControlMatrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

fn check_control(x: &[f64], u: &ControlMatrix) -> Result<()> {
    check_dim("control", u.d(), x.len())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("state has non-finite components".into()));
    }
    Ok(())
}

/// `q_i(x, u) = x_i⁺ − Σ_{j≠i} u_ij x_j⁻`, without clamping.
pub fn queue_map(x: &[f64], u: &ControlMatrix) -> Result<Vec<f64>> {
    check_control(x, u)?;
    let mut q = vec![0.0; x.len()];
    queue_map_into(x, u.as_slice(), &mut q);
    Ok(q)
}

#[inline]
pub(crate) fn queue_map_into(x: &[f64], u: &[f64], out: &mut [f64]) {
    let d = x.len();
    for i in 0..d {
        let mut help = 0.0;
        for j in 0..d {
            if j != i {
                help += u[i * d + j] * neg(x[j]);
            }
        }
        out[i] = pos(x[i]) - help;
    }
}

/// Drift of the limiting diffusion.
pub fn limiting_drift(params: &ModelParams, x: &[f64], u: &ControlMatrix) -> Result<Vec<f64>> {
    check_dim("state", x.len(), params.d())?;
    check_control(x, u)?;
    let mut b = vec![0.0; x.len()];
    params.rates().drift_into(x, u.as_slice(), &mut b);
    Ok(b)
}

/// Drift of the n-th system at a diffusion-scaled state.
pub fn prelimit_drift(sys: &ScaledSystemParams, x: &[f64], u: &ControlMatrix) -> Result<Vec<f64>> {
    check_dim("state", x.len(), sys.d())?;
    check_control(x, u)?;
    let mut b = vec![0.0; x.len()];
    sys.rates().drift_into(x, u.as_slice(), &mut b);
    Ok(b)
}

/// Per-coordinate standard deviations `√(2λ_i)`; the covariance is diagonal.
pub fn diffusion_coeff(params: &ModelParams) -> Vec<f64> {
    params.lambda.iter().map(|l| (2.0 * l).sqrt()).collect()
}

/// The n-th system of the heavy-traffic sequence:
/// `λⁿ = nλ + √n λ̂`, `μᵢᵢⁿ = μᵢᵢ + μ̂/√n`, cross rates and abandonment fixed.
///
/// Requires `λ_i = μ_ii` (critical loading), otherwise `ℓⁿ` diverges.
pub fn scaling_sequence(params: &ModelParams, hat_lambda: &[f64], hat_mu: &[f64], n: u64) -> Result<ScaledSystemParams> {
    let d = params.d();
    check_dim("hat_lambda", hat_lambda.len(), d)?;
    check_dim("hat_mu", hat_mu.len(), d)?;
    if n == 0 {
        return Err(Error::Argument("n must be >= 1".into()));
    }
    if hat_lambda.iter().chain(hat_mu).any(|v| !v.is_finite()) {
        return Err(Error::Argument("hat vectors must be finite".into()));
    }
    for i in 0..d {
        let (l, m) = (params.lambda[i], params.mu(i, i));
        if (l - m).abs() > 1e-12 * l.max(m) {
            return Err(Error::config(format!("model.lambda[{i}]"), format!("critical loading requires lambda = mu_ii, got {l} vs {m}")));
        }
    }
    let nf = n as f64;
    let sqrt_n = nf.sqrt();
    let lambda_n: Vec<f64> = (0..d).map(|i| nf * params.lambda[i] + sqrt_n * hat_lambda[i]).collect();
    let mut mu_n = params.mu.clone();
    for i in 0..d {
        mu_n[i * d + i] += hat_mu[i] / sqrt_n;
    }
    ScaledSystemParams::new(n, lambda_n, mu_n, params.gamma.clone(), params.mask.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn one_d() -> ModelParams {
        ModelParams::new(vec![1.0], vec![vec![1.0]], vec![1.0], vec![0.0], None).unwrap()
    }

    #[test]
    fn queue_map_examples() {
        let u = ControlMatrix::single(2, 0, 1, 0.5);
        assert_eq!(queue_map(&[3.0, -2.0], &u).unwrap(), vec![2.0, 0.0]);
        let u = ControlMatrix::single(2, 1, 0, 0.5);
        assert_eq!(queue_map(&[-1.0, 2.0], &u).unwrap(), vec![0.0, 1.5]);
        let x = [1.5, -0.5, 2.0];
        assert_eq!(queue_map(&x, &ControlMatrix::zeros(3)).unwrap(), vec![1.5, 0.0, 2.0]);
        assert!(queue_map(&[1.0], &ControlMatrix::zeros(2)).is_err());
    }

    #[test]
    fn limiting_drift_examples() {
        let p = ModelParams::reference();
        let b = limiting_drift(&p, &[-1.0, 2.0], &ControlMatrix::zeros(2)).unwrap();
        assert_abs_diff_eq!(b[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b[1], -3.0, epsilon = 1e-15);
        let b = limiting_drift(&p, &[-1.0, 2.0], &ControlMatrix::single(2, 1, 0, 0.5)).unwrap();
        assert_abs_diff_eq!(b[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b[1], -2.8, epsilon = 1e-15);
        let b = limiting_drift(&p, &[0.0, 0.0], &ControlMatrix::zeros(2)).unwrap();
        assert_eq!(b, vec![-1.0, -1.0]);
    }

    #[test]
    fn diffusion_coeff_examples() {
        let p = ModelParams::new(vec![2.0, 0.5], vec![vec![2.0, 0.0], vec![0.0, 0.5]], vec![1.0, 1.0], vec![0.0, 0.0], None).unwrap();
        let s = diffusion_coeff(&p);
        assert_abs_diff_eq!(s[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s[1], 1.0, epsilon = 1e-15);
        let s = diffusion_coeff(&ModelParams::reference());
        assert_abs_diff_eq!(s[0] * s[0], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn scaling_sequence_examples() {
        let p = one_d();
        let s = scaling_sequence(&p, &[0.0], &[0.0], 100).unwrap();
        assert_eq!(s.lambda_n, vec![100.0]);
        assert_eq!(s.ell_n, vec![0.0]);
        let s = scaling_sequence(&p, &[-1.0], &[0.0], 100).unwrap();
        assert_eq!(s.lambda_n, vec![90.0]);
        assert_abs_diff_eq!(s.ell_n[0], -1.0, epsilon = 1e-14);
        // λⁿ = 1 − 2·1 < 0
        assert!(matches!(scaling_sequence(&p, &[-2.0], &[0.0], 1), Err(Error::Config(_))));
    }

    #[test]
    fn ell_n_approaches_limit() {
        let p = one_d();
        let (lh, mh) = (0.7, -0.4);
        let gaps: Vec<f64> = [100u64, 10_000, 1_000_000]
            .iter()
            .map(|&n| {
                let s = scaling_sequence(&p, &[lh], &[mh], n).unwrap();
                (s.ell_n[0] - (lh - mh)).abs()
            })
            .collect();
        // μⁿ carries the μ̂/√n correction, so ℓⁿ matches ℓ up to rounding at every n.
        assert!(gaps.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{gaps:?}");
        assert!(gaps[2] < 1e-9);
        let s = scaling_sequence(&p, &[lh], &[mh], 10_000).unwrap();
        assert_eq!(s.mu_n[0], 1.0 + mh / 100.0);
    }

    #[test]
    fn prelimit_matches_limit_when_coefficients_agree() {
        let p = ModelParams::reference();
        let sys = ScaledSystemParams {
            n: 1,
            lambda_n: p.lambda().to_vec(),
            mu_n: p.mu_matrix().to_vec(),
            gamma_n: p.gamma().to_vec(),
            ell_n: p.ell().to_vec(),
            mask: p.mask().to_vec(),
        };
        let u = ControlMatrix::single(2, 0, 1, 0.3);
        for x in [[1.0, -2.0], [-0.5, 0.25], [0.0, 0.0]] {
            assert_eq!(prelimit_drift(&sys, &x, &u).unwrap(), limiting_drift(&p, &x, &u).unwrap());
        }
        assert_eq!(prelimit_drift(&sys, &[0.0, 0.0], &ControlMatrix::zeros(2)).unwrap(), sys.ell_n);
    }

    #[test]
    fn prelimit_drift_converges_along_sequence() {
        // λ̂ only perturbs the arrival rate; the sup-gap is |ℓⁿ − ℓ| plus the μ̂ correction.
        let p = ModelParams::reference().with_ell(vec![-0.5, 0.3]).unwrap();
        let (lh, mh) = ([-0.5, 0.5], [0.0, 0.2]);
        let samples: Vec<[f64; 2]> = (0..11).flat_map(|a| (0..11).map(move |b| [a as f64 - 5.0, b as f64 - 5.0])).collect();
        let controls: Vec<ControlMatrix> =
            [0.0, 0.5, 1.0].iter().flat_map(|&s| [ControlMatrix::single(2, 0, 1, s), ControlMatrix::single(2, 1, 0, s)]).collect();
        let mut prev = f64::INFINITY;
        for n in [16u64, 32, 64, 128, 256, 512] {
            let sys = scaling_sequence(&p, &lh, &mh, n).unwrap();
            let mut sup: f64 = 0.0;
            for x in &samples {
                for u in &controls {
                    let bn = prelimit_drift(&sys, x, u).unwrap();
                    let b = limiting_drift(&p, x, u).unwrap();
                    sup = sup.max((bn[0] - b[0]).abs()).max((bn[1] - b[1]).abs());
                }
            }
            assert!(sup < prev, "n = {n}: {sup} !< {prev}");
            prev = sup;
        }
    }

    #[test]
    fn mask_forces_zero_rate() {
        let p = ModelParams::new(
            vec![1.0, 1.0],
            vec![vec![1.0, 0.5], vec![0.5, 1.0]],
            vec![1.0, 1.0],
            vec![0.0, 0.0],
            Some(vec![vec![false, false], vec![true, false]]),
        )
        .unwrap();
        assert_eq!(p.mu(0, 1), 0.0);
        assert_eq!(p.mu(1, 0), 0.5);
        assert!(!p.allowed(0, 1));
        assert!(!p.allowed(0, 0));
        let json = serde_json::to_string(&p).unwrap();
        let back: ModelParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn invalid_params_are_rejected_with_paths() {
        let err = ModelParams::new(vec![1.0], vec![vec![1.0]], vec![-1.0], vec![0.0], None).unwrap_err();
        match err {
            Error::Config(v) => assert_eq!(v[0].path, "model.gamma[0]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn control_matrix_rejects_diagonal() {
        assert!(ControlMatrix::from_rows(&[vec![0.1, 0.0], vec![0.0, 0.0]]).is_err());
        let u = ControlMatrix::from_rows(&[vec![0.0, 0.2], vec![0.3, 0.0]]).unwrap();
        let json = serde_json::to_string(&u).unwrap();
        assert_eq!(serde_json::from_str::<ControlMatrix>(&json).unwrap(), u);
    }
}
