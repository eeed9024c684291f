use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::SpatialGrid;
use super::HjbError;
use crate::grid::TimeGrid;
use crate::model::{ControlModel, Horizon};

/// Step sizes and convergence data of a solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub dt: f64,
    pub dx: f64,
    pub cfl_bound: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
}

/// Nodal values and maximizing controls.
///
/// A parabolic solve stores `n_steps + 1` value layers (layer `n` at `t_n`)
/// and `n_steps` control layers (layer `n` governs `[t_n, t_{n+1})`). An
/// elliptic solve stores one of each.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    grid: SpatialGrid,
    times: Option<TimeGrid>,
    layers: Vec<Vec<f64>>,
    argmax: Vec<Vec<u32>>,
    report: SolverReport,
}

impl ValueGrid {
    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    /// Time grid of a parabolic solve; `None` for a stationary one.
    pub fn times(&self) -> Option<&TimeGrid> {
        self.times.as_ref()
    }

    pub fn report(&self) -> &SolverReport {
        &self.report
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, n: usize) -> &[f64] {
        &self.layers[n]
    }

    pub fn n_control_layers(&self) -> usize {
        self.argmax.len()
    }

    pub fn argmax_layer(&self, n: usize) -> &[u32] {
        &self.argmax[n]
    }

    pub(crate) fn argmax_layers(&self) -> &[Vec<u32>] {
        &self.argmax
    }

    /// `v(0, x)` (or `v(x)` when stationary) at any point of the cone.
    pub fn initial_value(&self, x: &[f64]) -> f64 {
        self.grid.evaluate(&self.layers[0], x)
    }

    /// Value at the layer nearest to `t`.
    pub fn value_at(&self, t: f64, x: &[f64]) -> f64 {
        let n = match &self.times {
            Some(g) => ((t / g.dt()).round().max(0.0) as usize).min(g.n_steps()),
            None => 0,
        };
        self.grid.evaluate(&self.layers[n], x)
    }
}

/// Largest step for which the scheme is monotone on `grid`.
///
/// The drift condition is `dt * sum_i |b_i| <= dx / 2` at every node and the
/// diffusion condition keeps the semi-Lagrangian feet inside the orthant:
/// `dt <= 1 / (2 d max |h_k(i)|^2)`.
pub fn cfl_bound(model: &ControlModel, grid: &SpatialGrid) -> f64 {
    let n = model.n_states();
    let d = model.d_obs().max(1);
    let knots = model.time_knots().len();
    let mut max_b: f64 = 0.0;
    let mut max_h: f64 = 0.0;
    for a in 0..model.n_controls() {
        for kn in 0..knots {
            let q = model.generator(a, kn);
            // sum_i |b_i| is convex in x, so its maximum over the box is at a vertex.
            for vertex in 0..(1usize << n) {
                let s: f64 = (0..n)
                    .map(|i| {
                        (0..n)
                            .filter(|j| vertex >> j & 1 == 1)
                            .map(|j| grid.side() * q[j * n + i])
                            .sum::<f64>()
                            .abs()
                    })
                    .sum();
                max_b = max_b.max(s);
            }
            for i in 0..n {
                for h in model.obs_drift(i, a, kn) {
                    max_h = max_h.max(h.abs());
                }
            }
        }
    }
    let drift = if max_b > 0.0 {
        0.5 * grid.dx() / max_b
    } else {
        f64::INFINITY
    };
    let diffusion = if max_h > 0.0 {
        1.0 / (2.0 * d as f64 * max_h * max_h)
    } else {
        f64::INFINITY
    };
    drift.min(diffusion)
}

/// Fewest time steps on `[0, horizon]` that satisfy [`cfl_bound`].
pub fn min_steps(model: &ControlModel, grid: &SpatialGrid, horizon: f64) -> usize {
    let bound = cfl_bound(model, grid);
    if bound.is_finite() {
        ((horizon / bound) * (1.0 + 1e-12)).ceil().max(1.0) as usize
    } else {
        1
    }
}

struct Stencil<'a> {
    model: &'a ControlModel,
    grid: &'a SpatialGrid,
    dt: f64,
    theta: f64,
    eps: f64,
    coords: Vec<f64>,
    interior: Vec<usize>,
    outer: Vec<(usize, Vec<f64>, f64, usize)>,
}

impl<'a> Stencil<'a> {
    fn new(model: &'a ControlModel, grid: &'a SpatialGrid, dt: f64) -> Result<Self, HjbError> {
        if grid.dim() != model.n_states() {
            return Err(HjbError::InvalidGrid(format!(
                "grid dimension {} differs from the number of states {}",
                grid.dim(),
                model.n_states()
            )));
        }
        let max_dt = cfl_bound(model, grid);
        if !(dt > 0.0) || dt > max_dt * (1.0 + 1e-12) {
            return Err(HjbError::CflViolation { dt, max_dt });
        }
        let n = grid.dim();
        let theta = 1.0 / (2.0 * model.d_obs().max(1) as f64);
        let mut coords = Vec::with_capacity(grid.n_nodes() * n);
        let mut interior = Vec::new();
        let mut outer = Vec::new();
        for node in 0..grid.n_nodes() {
            let x = grid.coords(node);
            coords.extend_from_slice(&x);
            if grid.is_outer(node) {
                let top = x.iter().copied().fold(0.0, f64::max);
                let c = (grid.side() - grid.dx()) / top;
                let y: Vec<f64> = x.iter().map(|v| v * c).collect();
                let near = grid.nearest_node(&y);
                outer.push((node, y, c, near));
            } else {
                interior.push(node);
            }
        }
        Ok(Self {
            model,
            grid,
            dt,
            theta,
            eps: (dt / theta).sqrt(),
            coords,
            interior,
            outer,
        })
    }

    /// `v(x) + dt (L^a v)(x) + dt <f(a), x>` at an interior node.
    fn candidate(&self, v: &[f64], node: usize, a: usize, knot: usize, z: &mut [f64]) -> f64 {
        let model = self.model;
        let grid = self.grid;
        let n = grid.dim();
        let x = &self.coords[node * n..(node + 1) * n];
        let q = model.generator(a, knot);
        let v0 = v[node];
        let mut out = v0;
        let dx = grid.dx();
        for i in 0..n {
            let b: f64 = (0..n).map(|j| x[j] * q[j * n + i]).sum();
            let r = model.running_reward(i, a, knot);
            out += self.dt * x[i] * r;
            let stride = grid.stride(i);
            if b > 0.0 {
                out += self.dt * b * (v[node + stride] - v0) / dx;
            } else if b < 0.0 && x[i] > 0.0 {
                out += self.dt * b * (v0 - v[node - stride]) / dx;
            }
        }
        for k in 0..model.d_obs() {
            let mut active = false;
            for i in 0..n {
                if model.obs_drift(i, a, knot)[k] != 0.0 && x[i] != 0.0 {
                    active = true;
                }
            }
            if !active {
                continue;
            }
            for i in 0..n {
                z[i] = x[i] * (1.0 + self.eps * model.obs_drift(i, a, knot)[k]);
            }
            let up = grid.evaluate(v, z);
            for i in 0..n {
                z[i] = (x[i] * (1.0 - self.eps * model.obs_drift(i, a, knot)[k])).max(0.0);
            }
            let down = grid.evaluate(v, z);
            out += 0.5 * self.theta * (up + down - 2.0 * v0);
        }
        out
    }

    /// One backward step `old -> new` with coefficients at `knot`, dividing by
    /// `1 + beta dt` for discounting. Returns the argmax layer.
    fn sweep(&self, old: &[f64], new: &mut [f64], knot: usize, discount: f64) -> Vec<u32> {
        let n = self.grid.dim();
        let nc = self.model.n_controls();
        let scale = 1.0 / (1.0 + discount * self.dt);
        let results: Vec<(f64, u32)> = self
            .interior
            .par_iter()
            .map_init(
                || vec![0.0; n],
                |z, &node| {
                    let mut best = (f64::NEG_INFINITY, 0u32);
                    for a in 0..nc {
                        let c = self.candidate(old, node, a, knot, z);
                        if c > best.0 {
                            best = (c, a as u32);
                        }
                    }
                    (best.0 * scale, best.1)
                },
            )
            .collect();
        let mut argmax = vec![0u32; self.grid.n_nodes()];
        for (&node, &(v, a)) in self.interior.iter().zip(&results) {
            new[node] = v;
            argmax[node] = a;
        }
        let faces: Vec<f64> = self
            .outer
            .iter()
            .map(|(_, y, c, _)| self.grid.interpolate(new, y) / c)
            .collect();
        for ((node, _, _, near), v) in self.outer.iter().zip(faces) {
            new[*node] = v;
            argmax[*node] = argmax[*near];
        }
        argmax
    }
}

fn linear_layer(grid: &SpatialGrid, weights: &[f64]) -> Vec<f64> {
    (0..grid.n_nodes())
        .map(|node| {
            grid.coords(node)
                .iter()
                .zip(weights)
                .map(|(x, g)| x * g)
                .sum()
        })
        .collect()
}

fn backward(
    model: &ControlModel,
    grid: &SpatialGrid,
    times: TimeGrid,
    terminal: Vec<f64>,
    discount: f64,
) -> Result<ValueGrid, HjbError> {
    let stencil = Stencil::new(model, grid, times.dt())?;
    let steps = times.n_steps();
    let mut layers = vec![Vec::new(); steps + 1];
    let mut argmax = vec![Vec::new(); steps];
    layers[steps] = terminal;
    for n in (0..steps).rev() {
        let mut new = vec![0.0; grid.n_nodes()];
        argmax[n] = stencil.sweep(
            &layers[n + 1],
            &mut new,
            model.knot_at(times.time(n)),
            discount,
        );
        layers[n] = new;
    }
    Ok(ValueGrid {
        grid: grid.clone(),
        times: Some(times),
        layers,
        argmax,
        report: SolverReport {
            dt: times.dt(),
            dx: grid.dx(),
            cfl_bound: cfl_bound(model, grid),
            n_steps: Some(steps),
            iterations: None,
            residual: None,
        },
    })
}

/// Solves the finite-horizon equation backward from `v(T, x) = <g, x>`.
pub fn solve_parabolic(
    model: &ControlModel,
    grid: &SpatialGrid,
    n_steps: usize,
) -> Result<ValueGrid, HjbError> {
    let horizon = match model.horizon() {
        Horizon::Finite(t) => t,
        Horizon::Discounted(_) => {
            return Err(HjbError::Unsupported(
                "the parabolic solver needs a finite-horizon model".into(),
            ))
        }
    };
    let times = TimeGrid::with_steps(horizon, n_steps.max(1))?;
    backward(
        model,
        grid,
        times,
        linear_layer(grid, model.terminal_rewards()),
        0.0,
    )
}

/// Discounted problem truncated at `horizon` with zero terminal value.
///
/// As `horizon` grows the time-zero layer approaches the stationary solution.
pub fn solve_discounted_truncated(
    model: &ControlModel,
    grid: &SpatialGrid,
    horizon: f64,
    n_steps: usize,
) -> Result<ValueGrid, HjbError> {
    let beta = discount_of(model)?;
    let times = TimeGrid::with_steps(horizon, n_steps.max(1))?;
    backward(model, grid, times, vec![0.0; grid.n_nodes()], beta)
}

fn discount_of(model: &ControlModel) -> Result<f64, HjbError> {
    match model.horizon() {
        Horizon::Discounted(b) => Ok(b),
        Horizon::Finite(_) => Err(HjbError::Unsupported(
            "this solver needs a discounted model".into(),
        )),
    }
}

/// Solves the discounted stationary equation by value iteration of the
/// discounted explicit step at `0.9` times the admissible step.
///
/// Iteration stops once `sup |v_{m+1} - v_m| <= tol * beta * dt`, which bounds
/// the distance to the discrete fixed point by about `tol`.
pub fn solve_elliptic(
    model: &ControlModel,
    grid: &SpatialGrid,
    tol: f64,
    max_iter: usize,
) -> Result<ValueGrid, HjbError> {
    let beta = discount_of(model)?;
    let bound = cfl_bound(model, grid);
    let dt = if bound.is_finite() { 0.9 * bound } else { 1.0 };
    let stencil = Stencil::new(model, grid, dt)?;
    let threshold = tol * beta * dt;
    let mut v = vec![0.0; grid.n_nodes()];
    let mut next = vec![0.0; grid.n_nodes()];
    let mut history = Vec::new();
    for it in 1..=max_iter {
        let argmax = stencil.sweep(&v, &mut next, 0, beta);
        let residual = v
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut v, &mut next);
        if it % 100 == 0 || residual <= threshold {
            history.push(residual);
        }
        if residual <= threshold {
            return Ok(ValueGrid {
                grid: grid.clone(),
                times: None,
                layers: vec![v],
                argmax: vec![argmax],
                report: SolverReport {
                    dt,
                    dx: grid.dx(),
                    cfl_bound: bound,
                    n_steps: None,
                    iterations: Some(it),
                    residual: Some(residual),
                },
            });
        }
        if !residual.is_finite() {
            break;
        }
    }
    let keep = history.len().saturating_sub(10);
    Err(HjbError::NoConvergence {
        iterations: max_iter,
        residuals: history.split_off(keep),
    })
}
