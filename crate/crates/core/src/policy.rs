//! Stationary Markov feedback policies `x ↦ u(x) ∈ M(x)` shared by the
//! diffusion and queueing simulators.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cost::CostSpec;
use crate::error::{check_dim, Error, Result};
use crate::hjb::Grid;
use crate::model::{ControlMatrix, ModelParams};
use crate::polytope::{contains_flat, scale_into_set, ArgminConfig, HamiltonianMinimizer};

/// Where a policy came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Zero,
    FixedMatrixProjected,
    HjbExtracted,
}

#[derive(Debug)]
enum Inner {
    Zero {
        d: usize,
    },
    Fixed {
        matrix: ControlMatrix,
        mask: Vec<bool>,
    },
    Hjb {
        params: ModelParams,
        cost: CostSpec,
        epsilon: f64,
        grid: Grid,
        /// `d` gradient components per grid node.
        gradient: Vec<f64>,
    },
}

/// A feasible feedback control. Cheap to clone and safe to share across threads.
#[derive(Clone, Debug)]
pub struct MarkovPolicy {
    inner: Arc<Inner>,
}

impl MarkovPolicy {
    /// The policy that never helps.
    pub fn zero(d: usize) -> Self {
        Self { inner: Arc::new(Inner::Zero { d }) }
    }

    /// A constant matrix scaled down into `M(x)` at each state.
    pub fn fixed_projected(params: &ModelParams, matrix: ControlMatrix) -> Result<Self> {
        check_dim("control", matrix.d(), params.d())?;
        if !matrix.in_unit_set(params.mask(), 0.0) {
            return Err(Error::Argument("fixed policy matrix must lie in the unit control set".into()));
        }
        Ok(Self { inner: Arc::new(Inner::Fixed { matrix, mask: params.mask().to_vec() }) })
    }

    /// Minimizer of the Hamiltonian at the exact state, with the value-function
    /// gradient interpolated from a grid field.
    pub(crate) fn from_gradient(params: ModelParams, cost: CostSpec, epsilon: f64, grid: Grid, gradient: Vec<f64>) -> Result<Self> {
        check_dim("gradient field", gradient.len(), grid.len() * grid.d())?;
        ArgminConfig::new(epsilon).validate()?;
        Ok(Self { inner: Arc::new(Inner::Hjb { params, cost, epsilon, grid, gradient }) })
    }

    pub fn kind(&self) -> PolicyKind {
        match &*self.inner {
            Inner::Zero { .. } => PolicyKind::Zero,
            Inner::Fixed { .. } => PolicyKind::FixedMatrixProjected,
            Inner::Hjb { .. } => PolicyKind::HjbExtracted,
        }
    }

    pub fn d(&self) -> usize {
        match &*self.inner {
            Inner::Zero { d } => *d,
            Inner::Fixed { matrix, .. } => matrix.d(),
            Inner::Hjb { grid, .. } => grid.d(),
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<ControlMatrix> {
        let d = self.d();
        check_dim("state", x.len(), d)?;
        let mut u = ControlMatrix::zeros(d);
        self.evaluate_into(x, u.as_mut_slice())?;
        Ok(u)
    }

    /// Writes `u(x)` into a flat row-major buffer of length `d²`.
    pub fn evaluate_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        match &*self.inner {
            Inner::Zero { .. } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                Ok(())
            }
            Inner::Fixed { matrix, mask } => {
                out.copy_from_slice(matrix.as_slice());
                for (v, &m) in out.iter_mut().zip(mask) {
                    if !m {
                        *v = 0.0;
                    }
                }
                if !contains_flat(x, mask, out, 0.0) {
                    scale_into_set(x, out);
                }
                Ok(())
            }
            Inner::Hjb { params, cost, epsilon, grid, gradient } => {
                let d = grid.d();
                let mut p = [0.0f64; 8];
                grid.for_each_corner(x, |node, w| {
                    for a in 0..d {
                        p[a] += w * gradient[node * d + a];
                    }
                });
                let minimizer = HamiltonianMinimizer::new(params, cost, ArgminConfig::new(*epsilon))?;
                minimizer.argmin_into(x, &p[..d], out)?;
                Ok(())
            }
        }
    }

    /// The interpolated gradient used at `x` (HJB-extracted policies only).
    pub fn gradient_at(&self, x: &[f64]) -> Option<Vec<f64>> {
        match &*self.inner {
            Inner::Hjb { grid, gradient, .. } => {
                let d = grid.d();
                let mut p = vec![0.0; d];
                grid.for_each_corner(x, |node, w| {
                    for a in 0..d {
                        p[a] += w * gradient[node * d + a];
                    }
                });
                Some(p)
            }
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polytope::{contains, FeasibilityContext};

    #[test]
    fn fixed_policy_is_feasible_everywhere() {
        let p = ModelParams::reference();
        let pol = MarkovPolicy::fixed_projected(&p, ControlMatrix::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.0]]).unwrap()).unwrap();
        assert_eq!(pol.kind(), PolicyKind::FixedMatrixProjected);
        for x in [[3.0, -2.0], [0.5, -2.0], [-1.0, -1.0], [2.0, 2.0], [-4.0, 0.1]] {
            let u = pol.evaluate(&x).unwrap();
            assert!(contains(&FeasibilityContext::new(&p, &x).unwrap(), &u, 1e-12).unwrap(), "{x:?} {u:?}");
        }
        assert_eq!(pol.evaluate(&[3.0, -2.0]).unwrap().get(0, 1), 1.0);
        assert!((pol.evaluate(&[0.5, -2.0]).unwrap().get(0, 1) - 0.25).abs() < 1e-15);
        assert!(MarkovPolicy::fixed_projected(&p, ControlMatrix::from_rows(&[vec![0.0, 1.5], vec![0.0, 0.0]]).unwrap()).is_err());
    }

    #[test]
    fn zero_policy() {
        let pol = MarkovPolicy::zero(3);
        assert!(pol.evaluate(&[1.0, -1.0, 0.0]).unwrap().is_zero());
        assert!(pol.gradient_at(&[0.0; 3]).is_none());
    }
}
