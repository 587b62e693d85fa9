//! Uniform tensor grid on the truncation box `[−L, L]^d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default limit on the number of grid nodes.
pub const DEFAULT_MAX_NODES: usize = 4_000_000;

/// Uniform lattice with spacing `h` on `[−L, L]^d`. Node indices are
/// lexicographic with axis 0 varying fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    d: usize,
    half_width: f64,
    spacing: f64,
    per_axis: usize,
}

impl Grid {
    pub fn new(d: usize, half_width: f64, spacing: f64) -> Result<Self> {
        Self::with_cap(d, half_width, spacing, DEFAULT_MAX_NODES)
    }

    pub fn with_cap(d: usize, half_width: f64, spacing: f64, max_nodes: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::Argument("grid dimension must be >= 1".into()));
        }
        if !(half_width > 0.0 && half_width.is_finite() && spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::Argument(format!("grid needs L > 0 and h > 0, got L = {half_width}, h = {spacing}")));
        }
        let ratio = half_width / spacing;
        let cells = ratio.round();
        if cells < 1.0 || (ratio - cells).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::Argument(format!("L / h must be a positive integer, got {ratio}")));
        }
        let per_axis = 2 * cells as usize + 1;
        let total = (per_axis as f64).powi(d as i32);
        if total > max_nodes as f64 {
            return Err(Error::Capacity(format!("grid with {per_axis}^{d} = {total:.3e} nodes exceeds the cap of {max_nodes}")));
        }
        Ok(Self { d, half_width, spacing, per_axis })
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn half_width(&self) -> f64 {
        self.half_width
    }
    pub fn spacing(&self) -> f64 {
        self.spacing
    }
    pub fn per_axis(&self) -> usize {
        self.per_axis
    }
    pub fn len(&self) -> usize {
        self.per_axis.pow(self.d as u32)
    }
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        self.per_axis.pow(axis as u32)
    }

    #[inline]
    pub fn axis_index(&self, node: usize, axis: usize) -> usize {
        (node / self.stride(axis)) % self.per_axis
    }

    #[inline]
    pub fn coordinate(&self, index: usize) -> f64 {
        -self.half_width + index as f64 * self.spacing
    }

    pub fn coords_into(&self, node: usize, out: &mut [f64]) {
        let mut rem = node;
        for x in out.iter_mut().take(self.d) {
            *x = self.coordinate(rem % self.per_axis);
            rem /= self.per_axis;
        }
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.d];
        self.coords_into(node, &mut x);
        x
    }

    pub fn node(&self, multi: &[usize]) -> usize {
        multi.iter().rev().fold(0, |acc, &i| acc * self.per_axis + i)
    }

    /// The node at the origin (always present since `L / h` is an integer).
    pub fn origin(&self) -> usize {
        let mid = (self.per_axis - 1) / 2;
        self.node(&vec![mid; self.d])
    }

    /// Nodes with every coordinate in `[−L/2, L/2]`.
    pub fn inner_half_box(&self) -> impl Iterator<Item = usize> + '_ {
        let lim = 0.5 * self.half_width + 1e-9;
        (0..self.len()).filter(move |&n| (0..self.d).all(|a| self.coordinate(self.axis_index(n, a)).abs() <= lim))
    }

    /// Nearest node to `x` after projecting onto the box.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let multi: Vec<usize> = x
            .iter()
            .map(|&v| {
                let t = ((v.clamp(-self.half_width, self.half_width) + self.half_width) / self.spacing).round();
                (t as usize).min(self.per_axis - 1)
            })
            .collect();
        self.node(&multi)
    }

    /// Multilinear interpolation weights: calls `f(node, weight)` for each of
    /// the `2^d` cell corners around the box projection of `x`.
    pub fn for_each_corner(&self, x: &[f64], mut f: impl FnMut(usize, f64)) {
        let d = self.d;
        let mut base = [0usize; 8];
        let mut frac = [0.0f64; 8];
        for a in 0..d {
            let t = (x[a].clamp(-self.half_width, self.half_width) + self.half_width) / self.spacing;
            let i = (t.floor() as usize).min(self.per_axis - 2);
            base[a] = i;
            frac[a] = (t - i as f64).clamp(0.0, 1.0);
        }
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut node = 0;
            for a in (0..d).rev() {
                let bit = (corner >> a) & 1;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                node = node * self.per_axis + base[a] + bit;
            }
            if w != 0.0 {
                f(node, w);
            }
        }
    }

    /// Multilinear interpolation of a scalar node field.
    pub fn interpolate(&self, field: &[f64], x: &[f64]) -> f64 {
        let mut s = 0.0;
        self.for_each_corner(x, |n, w| s += w * field[n]);
        s
    }
}
