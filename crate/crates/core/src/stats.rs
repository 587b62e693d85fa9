//! Replication statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// A sample mean with the half-width of its Student-t 95% confidence
/// interval over independent replications.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
    pub samples: usize,
}

impl Estimate {
    /// Combines replication means. One sample yields an infinite half-width.
    pub fn from_samples(xs: &[f64]) -> Self {
        let k = xs.len();
        let mean = if k == 0 { 0.0 } else { xs.iter().sum::<f64>() / k as f64 };
        let half_width = if k < 2 {
            f64::INFINITY
        } else {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
            t_975(k - 1) * (var / k as f64).sqrt()
        };
        Self { mean, half_width, samples: k }
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width
    }

    pub fn covers(&self, value: f64) -> bool {
        (value - self.mean).abs() <= self.half_width
    }
}

/// The 0.975 quantile of Student's t with `dof` degrees of freedom.
pub fn t_975(dof: usize) -> f64 {
    StudentsT::new(0.0, 1.0, dof as f64).expect("dof >= 1").inverse_cdf(0.975)
}
