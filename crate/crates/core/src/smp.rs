//! The adjoint BSDE and the Hamiltonian maximum condition.
//!
//! Along a controlled filter `rho`, the costate solves
//!
//! ```text
//! -dp = -sum_k q^k dW^k + (Q^alpha p + sum_k h_k(alpha) * q^k + f(alpha)) dt,   p_T = g
//! ```
//!
//! where `*` is the componentwise product. [`solve_adjoint`] approximates it
//! backward in time by least-squares regression on polynomial features of
//! the filter state, and [`check_max_principle`] measures how far the used
//! control is from maximizing
//!
//! ```text
//! H(t, rho, a, p, q) = <f(a,t), rho> + <Q^a_t p, rho> + sum_k <q^k, h_k(a,t) * rho>
//! ```
//!
//! at every sample and step.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::sample_brownian;
use crate::control::{ControlPath, ControlSource};
use crate::filter::{integrate_filter_with, FilterError, FilterPath, Scheme};
use crate::grid::TimeGrid;
use crate::model::ControlModel;
use crate::rng::SeedRecord;
use crate::stats::quantile_sorted;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmpError {
    #[error("regression design at step {step} has rank {rank} below the basis size {basis}")]
    RegressionRankDeficient {
        step: usize,
        rank: usize,
        basis: usize,
    },

    #[error("batch of {n_samples} samples is below 10 x basis size {basis}")]
    BatchTooSmall { n_samples: usize, basis: usize },

    #[error("batch is inconsistent: {0}")]
    InconsistentBatch(String),

    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// Filter paths with the observation increments that produced them.
#[derive(Debug, Clone)]
pub struct FilterBatch {
    pub grid: TimeGrid,
    pub filters: Vec<FilterPath>,
    pub controls: Vec<ControlPath>,
    /// Per sample, `n_steps x d` increments, row-major.
    pub increments: Vec<Vec<f64>>,
}

impl FilterBatch {
    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }
}

/// Simulates `n_samples` filter paths from `x0` under the reference measure.
pub fn simulate_filter_batch(
    model: &ControlModel,
    source: ControlSource<'_>,
    x0: &[f64],
    grid: TimeGrid,
    scheme: Scheme,
    n_samples: usize,
    seed: u64,
) -> Result<FilterBatch, SmpError> {
    let runs: Vec<(FilterPath, ControlPath, Vec<f64>)> = (0..n_samples as u64)
        .into_par_iter()
        .map(|s| {
            let obs = sample_brownian(SeedRecord::new(seed, s), grid, model.d_obs());
            let (f, c) = integrate_filter_with(&obs, grid, source, x0, scheme, model)?;
            Ok((f, c, obs))
        })
        .collect::<Result<_, FilterError>>()?;
    let mut batch = FilterBatch {
        grid,
        filters: Vec::with_capacity(n_samples),
        controls: Vec::with_capacity(n_samples),
        increments: Vec::with_capacity(n_samples),
    };
    for (f, c, w) in runs {
        batch.filters.push(f);
        batch.controls.push(c);
        batch.increments.push(w);
    }
    Ok(batch)
}

/// Monomials of total degree `<= degree` in `(pi_1, .., pi_{N-1}, |rho|_1)`.
///
/// `pi_N` is left out because `sum_i pi_i = 1` would make the design singular.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    exponents: Vec<Vec<u32>>,
}

impl Basis {
    pub fn new(n_states: usize, degree: u32) -> Self {
        let vars = n_states.max(1);
        let mut exponents = vec![vec![0u32; vars]];
        for total in 1..=degree {
            let mut current = vec![0u32; vars];
            push_compositions(total, 0, &mut current, &mut exponents);
        }
        Self { exponents }
    }

    pub fn size(&self) -> usize {
        self.exponents.len()
    }

    pub fn eval(&self, rho: &[f64], out: &mut [f64]) {
        let n = rho.len();
        let mass: f64 = rho.iter().sum();
        let mut z = Vec::with_capacity(n);
        for r in &rho[..n - 1] {
            z.push(if mass > 0.0 { r / mass } else { 0.0 });
        }
        z.push(mass);
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = z.iter().zip(e).map(|(v, &p)| v.powi(p as i32)).product();
        }
    }
}

fn push_compositions(remaining: u32, pos: usize, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(current.clone());
        current[pos] = 0;
        return;
    }
    for k in (0..=remaining).rev() {
        current[pos] = k;
        push_compositions(remaining - k, pos + 1, current, out);
    }
    current[pos] = 0;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub basis_size: usize,
    pub rank: usize,
    /// Root-mean-square residual of the costate regression.
    pub residual_norm: f64,
    /// Standard error of the cross-sample mean of `q^k_i`, indexed `k * N + i`.
    pub q_std_error: Vec<f64>,
}

/// Costate `p` and loadings `q` per step and sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointPath {
    grid: TimeGrid,
    n_samples: usize,
    n_states: usize,
    d_obs: usize,
    p: Vec<f64>,
    q: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl AdjointPath {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// `p` at `t_n` (`n = 0..=n_steps`) for sample `s`.
    pub fn p(&self, n: usize, s: usize) -> &[f64] {
        let base = (n * self.n_samples + s) * self.n_states;
        &self.p[base..base + self.n_states]
    }

    /// Loadings on `[t_n, t_{n+1})` for sample `s`, `d x N` row-major.
    pub fn q(&self, n: usize, s: usize) -> &[f64] {
        let w = self.n_states * self.d_obs;
        let base = (n * self.n_samples + s) * w;
        &self.q[base..base + w]
    }

    /// Cross-sample mean of `p` at `t_n`.
    pub fn mean_p(&self, n: usize) -> Vec<f64> {
        self.mean_of(|s| self.p(n, s))
    }

    /// Cross-sample mean of `q` on step `n`.
    pub fn mean_q(&self, n: usize) -> Vec<f64> {
        self.mean_of(|s| self.q(n, s))
    }

    fn mean_of<'s>(&'s self, row: impl Fn(usize) -> &'s [f64]) -> Vec<f64> {
        let mut out = vec![0.0; row(0).len()];
        for s in 0..self.n_samples {
            for (o, v) in out.iter_mut().zip(row(s)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= self.n_samples as f64);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjointOptions {
    /// Polynomial degree of the regression basis; `0` is the cross-sample mean.
    pub degree: u32,
    /// Singular values below `rcond * s_max` count as rank loss.
    pub rcond: f64,
}

impl Default for AdjointOptions {
    fn default() -> Self {
        Self {
            degree: 2,
            rcond: 1e-10,
        }
    }
}

/// Backward regression for the adjoint BSDE along `batch`.
///
/// At each step the targets `p_{n+1}` and `p_{n+1} dW^k / dt` are regressed on
/// the basis evaluated at `rho_{t_n}`, and the driver is applied at the fitted
/// values. A constant `source` uses the constant basis. The first step always
/// does, since every sample shares `rho_0`.
pub fn solve_adjoint(
    model: &ControlModel,
    source: ControlSource<'_>,
    batch: &FilterBatch,
    opts: AdjointOptions,
) -> Result<AdjointPath, SmpError> {
    let n = model.n_states();
    let d = model.d_obs();
    let grid = batch.grid;
    let steps = grid.n_steps();
    let samples = batch.len();
    check_batch(batch, n, d)?;
    let degree = if matches!(source, ControlSource::Constant(_)) {
        0
    } else {
        opts.degree
    };
    let basis = Basis::new(n, degree);
    if samples < 10 * basis.size() {
        return Err(SmpError::BatchTooSmall {
            n_samples: samples,
            basis: basis.size(),
        });
    }
    let constant = Basis::new(n, 0);
    let dt = grid.dt();
    let width = n * (1 + d);
    let mut p = vec![0.0; (steps + 1) * samples * n];
    let mut q = vec![0.0; steps * samples * n * d];
    for s in 0..samples {
        let base = (steps * samples + s) * n;
        p[base..base + n].copy_from_slice(model.terminal_rewards());
    }
    let mut diagnostics = vec![
        StepDiagnostics {
            basis_size: 0,
            rank: 0,
            residual_norm: 0.0,
            q_std_error: Vec::new(),
        };
        steps
    ];
    for step in (0..steps).rev() {
        let b = if step == 0 { &constant } else { &basis };
        let mut design = DMatrix::<f64>::zeros(samples, b.size());
        let mut target = DMatrix::<f64>::zeros(samples, width);
        let mut row = vec![0.0; b.size()];
        for s in 0..samples {
            b.eval(batch.filters[s].rho(step), &mut row);
            for (j, v) in row.iter().enumerate() {
                design[(s, j)] = *v;
            }
            let next = &p[((step + 1) * samples + s) * n..][..n];
            let dw = &batch.increments[s][step * d..(step + 1) * d];
            for i in 0..n {
                target[(s, i)] = next[i];
                for k in 0..d {
                    target[(s, n + k * n + i)] = next[i] * dw[k] / dt;
                }
            }
        }
        let (fitted, rank) = least_squares(&design, &target, opts.rcond);
        if rank < b.size() {
            return Err(SmpError::RegressionRankDeficient {
                step,
                rank,
                basis: b.size(),
            });
        }
        let knot = model.knot_at(grid.time(step));
        let mut sq_resid = 0.0;
        let mut q_sum = vec![0.0; n * d];
        let mut q_sumsq = vec![0.0; n * d];
        for s in 0..samples {
            for c in 0..n {
                sq_resid += (target[(s, c)] - fitted[(s, c)]).powi(2);
            }
            for c in 0..n * d {
                let y = target[(s, n + c)];
                q_sum[c] += y;
                q_sumsq[c] += y * y;
            }
            let a = batch.controls[s].cell(step);
            let gen = model.generator(a, knot);
            let out = &mut p[(step * samples + s) * n..][..n];
            for i in 0..n {
                let p_hat = fitted[(s, i)];
                let qp: f64 = (0..n).map(|j| gen[i * n + j] * fitted[(s, j)]).sum();
                let hq: f64 = (0..d)
                    .map(|k| model.obs_drift(i, a, knot)[k] * fitted[(s, n + k * n + i)])
                    .sum();
                out[i] = p_hat + dt * (qp + hq + model.running_reward(i, a, knot));
            }
            let qo = &mut q[(step * samples + s) * n * d..][..n * d];
            for c in 0..n * d {
                qo[c] = fitted[(s, n + c)];
            }
        }
        let m = samples as f64;
        diagnostics[step] = StepDiagnostics {
            basis_size: b.size(),
            rank,
            residual_norm: (sq_resid / (m * n as f64)).sqrt(),
            q_std_error: q_sum
                .iter()
                .zip(&q_sumsq)
                .map(|(s1, s2)| {
                    let mean = s1 / m;
                    ((s2 / m - mean * mean).max(0.0) / (m - 1.0)).sqrt()
                })
                .collect(),
        };
    }
    if p.iter().chain(&q).any(|v| !v.is_finite()) {
        return Err(SmpError::InconsistentBatch(
            "adjoint values became non-finite".into(),
        ));
    }
    Ok(AdjointPath {
        grid,
        n_samples: samples,
        n_states: n,
        d_obs: d,
        p,
        q,
        diagnostics,
    })
}

fn check_batch(batch: &FilterBatch, n: usize, d: usize) -> Result<(), SmpError> {
    let steps = batch.grid.n_steps();
    if batch.filters.len() != batch.controls.len() || batch.filters.len() != batch.increments.len()
    {
        return Err(SmpError::InconsistentBatch(
            "filters, controls and increments differ in count".into(),
        ));
    }
    for (s, ((f, c), w)) in batch
        .filters
        .iter()
        .zip(&batch.controls)
        .zip(&batch.increments)
        .enumerate()
    {
        if f.grid().n_steps() != steps
            || c.as_slice().len() != steps
            || w.len() != steps * d
            || f.n_states() != n
        {
            return Err(SmpError::InconsistentBatch(format!(
                "sample {s} does not match the batch grid"
            )));
        }
    }
    Ok(())
}

/// Least squares with column scaling and an SVD; returns fitted values and rank.
fn least_squares(
    design: &DMatrix<f64>,
    target: &DMatrix<f64>,
    rcond: f64,
) -> (DMatrix<f64>, usize) {
    let mut scaled = design.clone();
    let scales: Vec<f64> = (0..design.ncols())
        .map(|j| {
            let norm = design.column(j).norm();
            if norm > 0.0 {
                norm
            } else {
                1.0
            }
        })
        .collect();
    for (j, s) in scales.iter().enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / s);
    }
    let svd = scaled.clone().svd(true, true);
    let s_max = svd.singular_values.max();
    let eps = rcond * s_max;
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    let coef = svd
        .solve(target, eps)
        .unwrap_or_else(|_| DMatrix::zeros(design.ncols(), target.ncols()));
    (scaled * coef, rank)
}

/// `<f(a,t), rho> + <Q^a_t p, rho> + sum_k <q^k, h_k(a,t) * rho>`; `q` is `d x N` row-major.
pub fn hamiltonian_smp(
    model: &ControlModel,
    t: f64,
    rho: &[f64],
    a: usize,
    p: &[f64],
    q: &[f64],
) -> f64 {
    let n = model.n_states();
    let knot = model.knot_at(t);
    let gen = model.generator(a, knot);
    let mut total = 0.0;
    for i in 0..n {
        let qp: f64 = (0..n).map(|j| gen[i * n + j] * p[j]).sum();
        let hq: f64 = (0..model.d_obs())
            .map(|k| q[k * n + i] * model.obs_drift(i, a, knot)[k])
            .sum();
        total += rho[i] * (model.running_reward(i, a, knot) + qp + hq);
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapQuantiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmpReport {
    pub n_samples: usize,
    pub n_steps: usize,
    pub tolerance: f64,
    /// Largest violation fraction that still passes.
    pub level: f64,
    pub violation_fraction: f64,
    pub gap_quantiles: GapQuantiles,
    pub pass: bool,
}

/// Gap `max_a H - H(used control)` per sample and step, divided by `|rho|_1`
/// so that it depends on the normalized filter only.
pub fn max_principle_gaps(
    adjoint: &AdjointPath,
    batch: &FilterBatch,
    model: &ControlModel,
) -> Vec<f64> {
    let steps = batch.grid.n_steps();
    (0..batch.len())
        .into_par_iter()
        .flat_map_iter(|s| {
            (0..steps).map(move |n| {
                let t = batch.grid.time(n);
                let rho = batch.filters[s].rho(n);
                let mass: f64 = rho.iter().sum();
                let (p, q) = (adjoint.p(n, s), adjoint.q(n, s));
                let used = hamiltonian_smp(model, t, rho, batch.controls[s].cell(n), p, q);
                let best = (0..model.n_controls())
                    .map(|a| hamiltonian_smp(model, t, rho, a, p, q))
                    .fold(f64::NEG_INFINITY, f64::max);
                if mass > 0.0 {
                    (best - used).max(0.0) / mass
                } else {
                    0.0
                }
            })
        })
        .collect()
}

/// Distribution of Hamiltonian gaps; passes iff the fraction above
/// `tolerance` is at most `level`.
pub fn check_max_principle(
    adjoint: &AdjointPath,
    batch: &FilterBatch,
    model: &ControlModel,
    tolerance: f64,
    level: f64,
) -> SmpReport {
    let mut gaps = max_principle_gaps(adjoint, batch, model);
    let violations = gaps.iter().filter(|&&g| g > tolerance).count();
    gaps.sort_by(f64::total_cmp);
    let fraction = violations as f64 / gaps.len().max(1) as f64;
    let q = |p| {
        if gaps.is_empty() {
            0.0
        } else {
            quantile_sorted(&gaps, p)
        }
    };
    SmpReport {
        n_samples: batch.len(),
        n_steps: batch.grid.n_steps(),
        tolerance,
        level,
        violation_fraction: fraction,
        gap_quantiles: GapQuantiles {
            p50: q(0.5),
            p90: q(0.9),
            p99: q(0.99),
            max: gaps.last().copied().unwrap_or(0.0),
        },
        pass: fraction <= level,
    }
}
