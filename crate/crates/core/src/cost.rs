//! Running cost on queue lengths and its compositions with a control.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result, Violation};
use crate::model::{pos, queue_map_into, ControlMatrix, ModelParams};

/// Family of running costs supported by the solvers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// `r(q) = Σ h_i q_i^{m_i}`.
    #[default]
    PolynomialSum,
}

/// A convex, nondecreasing running cost `r(q) = Σ h_i q_i^{m_i}` on `q ≥ 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CostSpecRaw", into = "CostSpecRaw")]
pub struct CostSpec {
    kind: CostKind,
    h: Vec<f64>,
    m: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpecRaw {
    #[serde(default)]
    pub kind: CostKind,
    pub h: Vec<f64>,
    pub m: Vec<f64>,
}

impl CostSpecRaw {
    pub fn violations(&self, prefix: &str) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.h.is_empty() {
            out.push(Violation::new(format!("{prefix}.h"), "must be non-empty"));
        }
        if self.m.len() != self.h.len() {
            out.push(Violation::new(format!("{prefix}.m"), format!("expected length {}", self.h.len())));
        }
        for (i, &h) in self.h.iter().enumerate() {
            if !(h.is_finite() && h >= 0.0) {
                out.push(Violation::new(format!("{prefix}.h[{i}]"), "must be finite and >= 0"));
            }
        }
        for (i, &m) in self.m.iter().enumerate() {
            if !(m.is_finite() && m >= 1.0) {
                out.push(Violation::new(format!("{prefix}.m[{i}]"), "must be finite and >= 1"));
            }
        }
        out
    }
}

impl TryFrom<CostSpecRaw> for CostSpec {
    type Error = Error;
    fn try_from(raw: CostSpecRaw) -> Result<Self> {
        let v = raw.violations("cost");
        if !v.is_empty() {
            return Err(Error::Config(v));
        }
        Ok(CostSpec { kind: raw.kind, h: raw.h, m: raw.m })
    }
}

impl From<CostSpec> for CostSpecRaw {
    fn from(c: CostSpec) -> Self {
        CostSpecRaw { kind: c.kind, h: c.h, m: c.m }
    }
}

impl CostSpec {
    pub fn polynomial(h: Vec<f64>, m: Vec<f64>) -> Result<Self> {
        CostSpec::try_from(CostSpecRaw { kind: CostKind::PolynomialSum, h, m })
    }

    /// `r(q) = Σ q_i`.
    pub fn linear(d: usize) -> Self {
        Self::polynomial(vec![1.0; d], vec![1.0; d]).expect("valid linear cost")
    }

    /// `r ≡ 0`.
    pub fn zero(d: usize) -> Self {
        Self::polynomial(vec![0.0; d], vec![1.0; d]).expect("valid zero cost")
    }

    pub fn kind(&self) -> CostKind {
        self.kind
    }
    pub fn d(&self) -> usize {
        self.h.len()
    }
    pub fn h(&self) -> &[f64] {
        &self.h
    }
    pub fn m(&self) -> &[f64] {
        &self.m
    }

    /// True when every exponent is 1, so `r` is linear on the nonnegative orthant.
    pub fn is_linear(&self) -> bool {
        self.m.iter().zip(&self.h).all(|(&m, &h)| m == 1.0 || h == 0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.h.iter().all(|&h| h == 0.0)
    }

    /// Largest exponent with a nonzero weight (1 when the cost is zero).
    pub fn max_exponent(&self) -> f64 {
        self.m.iter().zip(&self.h).filter(|(_, &h)| h > 0.0).map(|(&m, _)| m).fold(1.0, f64::max)
    }

    /// Evaluates `r` at a nonnegative vector; no validation.
    #[inline]
    pub fn eval(&self, q: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.h.len() {
            let h = self.h[i];
            if h == 0.0 {
                continue;
            }
            let m = self.m[i];
            s += if m == 1.0 {
                h * q[i]
            } else if m == 2.0 {
                h * q[i] * q[i]
            } else {
                h * q[i].powf(m)
            };
        }
        s
    }

    /// Partial derivatives of `r` at a nonnegative vector.
    #[inline]
    pub fn grad_into(&self, q: &[f64], out: &mut [f64]) {
        for i in 0..self.h.len() {
            let (h, m) = (self.h[i], self.m[i]);
            out[i] = if h == 0.0 {
                0.0
            } else if m == 1.0 {
                h
            } else {
                h * m * q[i].max(0.0).powf(m - 1.0)
            };
        }
    }

    /// `r̃(x, u) = r(q(x, u)⁺)` from a flat row-major control; no validation.
    #[inline]
    pub(crate) fn control_cost_flat(&self, x: &[f64], u: &[f64], scratch: &mut [f64]) -> f64 {
        queue_map_into(x, u, scratch);
        for v in scratch.iter_mut() {
            *v = pos(*v);
        }
        self.eval(scratch)
    }
}

/// `r(x) = Σ h_i x_i^{m_i}` for `x ≥ 0`.
pub fn running_cost(spec: &CostSpec, x: &[f64]) -> Result<f64> {
    check_dim("state", x.len(), spec.d())?;
    if let Some(i) = x.iter().position(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Argument(format!("running cost needs a nonnegative finite argument, component {i} is {}", x[i])));
    }
    Ok(spec.eval(x))
}

/// `r̃(x, u) = r(q(x, u)⁺)`.
pub fn control_cost(spec: &CostSpec, params: &ModelParams, x: &[f64], u: &ControlMatrix) -> Result<f64> {
    check_dim("state", x.len(), params.d())?;
    check_dim("cost", spec.d(), params.d())?;
    check_dim("control", u.d(), params.d())?;
    let mut q = vec![0.0; x.len()];
    Ok(spec.control_cost_flat(x, u.as_slice(), &mut q))
}

/// `r̃_ε(x, u) = r̃(x, u) + ε Σ u_ij²`.
pub fn perturbed_cost(spec: &CostSpec, params: &ModelParams, x: &[f64], u: &ControlMatrix, epsilon: f64) -> Result<f64> {
    if !(epsilon >= 0.0) {
        return Err(Error::Argument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    Ok(control_cost(spec, params, x, u)? + epsilon * u.norm_sq())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn running_cost_examples() {
        let c = CostSpec::linear(2);
        assert_eq!(running_cost(&c, &[1.0, 2.0]).unwrap(), 3.0);
        let c = CostSpec::polynomial(vec![1.0, 0.0], vec![2.0, 1.0]).unwrap();
        assert_eq!(running_cost(&c, &[3.0, 5.0]).unwrap(), 9.0);
        assert_eq!(running_cost(&c, &[0.0, 0.0]).unwrap(), 0.0);
        assert!(running_cost(&c, &[-1.0, 0.0]).is_err());
    }

    #[test]
    fn control_cost_examples() {
        let p = ModelParams::reference();
        let c = CostSpec::linear(2);
        let x = [2.0, -1.0];
        assert_eq!(control_cost(&c, &p, &x, &ControlMatrix::zeros(2)).unwrap(), 2.0);
        let u = ControlMatrix::single(2, 0, 1, 1.0);
        assert_eq!(control_cost(&c, &p, &x, &u).unwrap(), 1.0);
        assert_abs_diff_eq!(perturbed_cost(&c, &p, &x, &u, 0.1).unwrap(), 1.1, epsilon = 1e-15);
        assert_eq!(perturbed_cost(&c, &p, &x, &u, 0.0).unwrap(), 1.0);
        // q₁ = 0.5 − 2 < 0 is clamped
        let x = [0.5, -2.0];
        assert_eq!(control_cost(&c, &p, &x, &u).unwrap(), 0.0);
        assert!(perturbed_cost(&c, &p, &x, &u, -1.0).is_err());
    }

    #[test]
    fn invalid_exponent_names_path() {
        match CostSpec::polynomial(vec![1.0], vec![0.5]).unwrap_err() {
            Error::Config(v) => assert_eq!(v[0].path, "cost.m[0]"),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn serde_round_trip() {
        let c = CostSpec::polynomial(vec![1.0, 2.0], vec![1.0, 1.5]).unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("polynomial_sum"));
        assert_eq!(serde_json::from_str::<CostSpec>(&s).unwrap(), c);
    }

    proptest! {
        #[test]
        fn growth_envelope(h in prop::collection::vec(0.0f64..3.0, 3),
                           m in prop::collection::vec(1.0f64..3.0, 3),
                           x in prop::collection::vec(0.0f64..20.0, 3)) {
            let c = CostSpec::polynomial(h.clone(), m.clone()).unwrap();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let hmax = h.iter().cloned().fold(0.0, f64::max);
            let r = running_cost(&c, &x).unwrap();
            prop_assert!(r >= 0.0);
            prop_assert!(r <= hmax * 3.0 * (1.0 + norm.powf(c.max_exponent())) + 1e-9);
        }

        #[test]
        fn monotone_and_convex(m in 1.0f64..3.0, a in 0.0f64..5.0, b in 0.0f64..5.0) {
            let c = CostSpec::polynomial(vec![1.0], vec![m]).unwrap();
            let (ra, rb) = (c.eval(&[a]), c.eval(&[b]));
            let mid = c.eval(&[(a + b) / 2.0]);
            prop_assert!(mid <= (ra + rb) / 2.0 + 1e-12);
            if a <= b { prop_assert!(ra <= rb + 1e-12); }
        }

        #[test]
        fn strict_convexity_in_control(t in 0.0f64..1.0, s in 0.0f64..1.0, eps in 0.01f64..1.0,
                                       x0 in 0.0f64..5.0, x1 in -5.0f64..0.0, m in 1.0f64..2.5) {
            let p = ModelParams::reference();
            let c = CostSpec::polynomial(vec![1.0, 1.0], vec![m, m]).unwrap();
            let x = [x0, x1];
            // Feasible along u₁₂ ∈ [0, min(1, x₁⁺/x₂⁻)].
            let cap = if x1 < 0.0 { (x0 / -x1).min(1.0) } else { 1.0 };
            let u = ControlMatrix::single(2, 0, 1, t * cap);
            let v = ControlMatrix::single(2, 0, 1, s * cap);
            let mid = u.lerp(&v, 0.5);
            let f = |w: &ControlMatrix| perturbed_cost(&c, &p, &x, w, eps).unwrap();
            let g = |w: &ControlMatrix| control_cost(&c, &p, &x, w).unwrap();
            let dist2 = (t * cap - s * cap).powi(2);
            prop_assert!(g(&mid) <= (g(&u) + g(&v)) / 2.0 + 1e-12);
            prop_assert!(f(&mid) <= (f(&u) + f(&v)) / 2.0 - eps / 4.0 * dist2 + 1e-12);
        }
    }
}
