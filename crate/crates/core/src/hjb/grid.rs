use serde::{Deserialize, Serialize};

use super::HjbError;

/// Uniform grid on the box `[0, L]^N` covering the probability simplex.
///
/// Nodes are stored in mixed-radix order with axis 0 varying fastest. Nodes
/// with some coordinate equal to `L` lie on an outer face; all others are
/// interior for the scheme (the faces `x_i = 0` need no boundary data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    dim: usize,
    side: f64,
    dx: f64,
    per_axis: usize,
}

impl SpatialGrid {
    pub fn new(dim: usize, side: f64, dx: f64) -> Result<Self, HjbError> {
        if dim < 1 {
            return Err(HjbError::InvalidGrid("dimension must be positive".into()));
        }
        if !(side >= 1.0) || !side.is_finite() {
            return Err(HjbError::InvalidGrid(format!(
                "box side L = {side} must be at least 1"
            )));
        }
        if !(dx > 0.0) {
            return Err(HjbError::InvalidGrid(format!("dx = {dx} must be positive")));
        }
        let cells = (side / dx).round();
        if cells < 2.0 || ((cells * dx) - side).abs() > 1e-9 * side {
            return Err(HjbError::InvalidGrid(format!(
                "dx = {dx} must divide L = {side} into at least two cells"
            )));
        }
        let per_axis = cells as usize + 1;
        let total = (per_axis as f64).powi(dim as i32);
        if total > 5e7 {
            return Err(HjbError::InvalidGrid(format!(
                "{total} nodes is beyond what this solver is meant for"
            )));
        }
        Ok(Self {
            dim,
            side,
            dx: side / cells,
            per_axis,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn per_axis(&self) -> usize {
        self.per_axis
    }

    pub fn n_nodes(&self) -> usize {
        self.per_axis.pow(self.dim as u32)
    }

    /// Per-axis integer indices of a node.
    pub fn multi_index(&self, mut node: usize) -> Vec<usize> {
        (0..self.dim)
            .map(|_| {
                let i = node % self.per_axis;
                node /= self.per_axis;
                i
            })
            .collect()
    }

    pub fn node_of(&self, idx: &[usize]) -> usize {
        idx.iter().rev().fold(0, |acc, &i| acc * self.per_axis + i)
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        self.multi_index(node)
            .into_iter()
            .map(|i| i as f64 * self.dx)
            .collect()
    }

    /// Offset between a node and its neighbour along `axis`.
    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        self.per_axis.pow(axis as u32)
    }

    pub fn is_outer(&self, node: usize) -> bool {
        self.multi_index(node)
            .iter()
            .any(|&i| i == self.per_axis - 1)
    }

    /// Whether the coordinates of `node` sum to one.
    pub fn on_simplex(&self, node: usize) -> bool {
        let cells = (1.0 / self.dx).round();
        if (cells * self.dx - 1.0).abs() > 1e-9 {
            return false;
        }
        self.multi_index(node).iter().sum::<usize>() == cells as usize
    }

    /// Grid node closest to `x` (coordinates clamped to the box).
    pub fn nearest_node(&self, x: &[f64]) -> usize {
        let idx: Vec<usize> = x
            .iter()
            .map(|&c| ((c / self.dx).round().max(0.0) as usize).min(self.per_axis - 1))
            .collect();
        self.node_of(&idx)
    }

    /// Multilinear interpolation of nodal `values` at `x` inside the box.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        debug_assert!(x.len() == self.dim);
        let mut base = 0;
        let mut frac = [0.0f64; 8];
        let mut strides = [0usize; 8];
        let last = (self.per_axis - 2) as f64;
        for axis in 0..self.dim {
            let s = (x[axis] / self.dx).clamp(0.0, (self.per_axis - 1) as f64);
            let i0 = s.floor().min(last);
            let stride = self.stride(axis);
            base += i0 as usize * stride;
            frac[axis] = s - i0;
            strides[axis] = stride;
        }
        let mut total = 0.0;
        for corner in 0..(1usize << self.dim) {
            let mut w = 1.0;
            let mut node = base;
            for axis in 0..self.dim {
                if corner >> axis & 1 == 1 {
                    w *= frac[axis];
                    node += strides[axis];
                } else {
                    w *= 1.0 - frac[axis];
                }
            }
            if w != 0.0 {
                total += w * values[node];
            }
        }
        total
    }

    /// Value at any `x` of the cone: interpolation inside the box, degree-1
    /// homogeneous extension `v(x) = v(c x) / c` with `max(c x) = L - dx` outside.
    pub fn evaluate(&self, values: &[f64], x: &[f64]) -> f64 {
        let top = x.iter().copied().fold(0.0, f64::max);
        if top <= self.side {
            self.interpolate(values, x)
        } else {
            let c = (self.side - self.dx) / top;
            let y: Vec<f64> = x.iter().map(|v| v * c).collect();
            self.interpolate(values, &y) / c
        }
    }
}
