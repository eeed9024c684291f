//! The Girsanov density along a path and the three reward estimators.
//!
//! The same reward can be computed three ways:
//!
//! * under the reference measure, weighting the chain's rewards by
//!   `Z_t = exp(int h . dW - 1/2 int |h|^2 ds)` while `W` is a Brownian motion
//!   independent of the jumps;
//! * under the physical measure, where `W = int h dt + B` and no weight is
//!   needed;
//! * through the separated problem, integrating `<rho_t, f>` along the
//!   unnormalized filter.
//!
//! All quadratures use the left endpoint of each grid cell for `Z` and `rho`
//! and integrate piecewise-constant coefficients exactly in between. Inside a
//! cell that contains a jump, the `dW` term of `log Z` is attributed to the
//! state at the left endpoint, which keeps the stochastic integral
//! non-anticipating and the scheme first order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{
    sample_driving, simulate_physical, thin_chain, ChainError, ChainPath, InitialLaw,
};
use crate::control::{ControlPath, ControlSource};
use crate::filter::{integrate_filter_with, FilterError, FilterPath, Scheme, BLOCK};
use crate::grid::TimeGrid;
use crate::model::{ControlModel, Horizon};
use crate::rng::SeedRecord;
use crate::stats::{Accumulator, MeanSe};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error(transparent)]
    Chain(#[from] ChainError),

    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// `Z_{t_k}` and `log Z_{t_k}` on the control grid, `Z_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityPath {
    pub grid: TimeGrid,
    pub log_values: Vec<f64>,
    pub values: Vec<f64>,
}

impl DensityPath {
    #[inline]
    pub fn value(&self, k: usize) -> f64 {
        self.values[k]
    }

    pub fn terminal(&self) -> f64 {
        *self.values.last().unwrap()
    }
}

/// `log Z` increment per cell: `h(X_{t_k}) . dW_k - 1/2 int_cell |h(X_s)|^2 ds`.
pub fn girsanov_density(
    chain: &ChainPath,
    control: &ControlPath,
    obs_increments: &[f64],
    model: &ControlModel,
) -> Result<DensityPath, MeasureError> {
    let grid = *control.grid();
    let d = model.d_obs();
    if obs_increments.len() != grid.n_steps() * d {
        return Err(MeasureError::GridMismatch(format!(
            "{} observation increments for {} cells of dimension {d}",
            obs_increments.len(),
            grid.n_steps()
        )));
    }
    let mut quad = vec![0.0; grid.n_steps()];
    let mut stoch = vec![0.0; grid.n_steps()];
    let mut last_cell = usize::MAX;
    chain.for_each_segment(control, model, |seg| {
        let h = model.obs_drift(seg.state, seg.control, seg.knot);
        if seg.cell != last_cell {
            last_cell = seg.cell;
            let dw = &obs_increments[seg.cell * d..(seg.cell + 1) * d];
            stoch[seg.cell] = h.iter().zip(dw).map(|(a, b)| a * b).sum();
        }
        quad[seg.cell] += 0.5 * h.iter().map(|x| x * x).sum::<f64>() * seg.len();
    });
    let mut log_values = Vec::with_capacity(grid.n_steps() + 1);
    let mut log_z = 0.0;
    log_values.push(0.0);
    for k in 0..grid.n_steps() {
        log_z += stoch[k] - quad[k];
        log_values.push(log_z);
    }
    let values = log_values.iter().map(|x| x.exp()).collect();
    Ok(DensityPath {
        grid,
        log_values,
        values,
    })
}

/// `int_s0^s1 e^{-beta s} ds`, or `s1 - s0` without discounting.
#[inline]
fn time_weight(horizon: Horizon, s0: f64, s1: f64) -> f64 {
    match horizon {
        Horizon::Finite(_) => s1 - s0,
        Horizon::Discounted(beta) => ((-beta * s0).exp() - (-beta * s1).exp()) / beta,
    }
}

fn terminal_term(model: &ControlModel, state: usize) -> f64 {
    match model.horizon() {
        Horizon::Finite(_) => model.terminal_reward(state),
        Horizon::Discounted(_) => 0.0,
    }
}

/// Single-path reference-measure integrand `int Z f dt + Z_T g(X_T)`.
pub fn reward_reference(
    chain: &ChainPath,
    control: &ControlPath,
    density: &DensityPath,
    model: &ControlModel,
) -> Result<f64, MeasureError> {
    if density.values.len() != control.grid().n_steps() + 1 {
        return Err(MeasureError::GridMismatch(
            "density and control grids differ".into(),
        ));
    }
    let horizon = model.horizon();
    let mut total = 0.0;
    chain.for_each_segment(control, model, |seg| {
        total += density.value(seg.cell)
            * model.running_reward(seg.state, seg.control, seg.knot)
            * time_weight(horizon, seg.start, seg.end);
    });
    Ok(total + density.terminal() * terminal_term(model, chain.final_state()))
}

/// Single-path physical-measure integrand `int f dt + g(X_T)`.
pub fn reward_physical(chain: &ChainPath, control: &ControlPath, model: &ControlModel) -> f64 {
    let horizon = model.horizon();
    let mut total = 0.0;
    chain.for_each_segment(control, model, |seg| {
        total += model.running_reward(seg.state, seg.control, seg.knot)
            * time_weight(horizon, seg.start, seg.end);
    });
    total + terminal_term(model, chain.final_state())
}

/// Separated reward `int <rho_t, f(., alpha_t, t)> dt + <rho_T, g>` along a filter path.
pub fn reward_separated(
    filter: &FilterPath,
    control: &ControlPath,
    model: &ControlModel,
) -> Result<f64, MeasureError> {
    let grid = filter.grid();
    if control.grid().n_steps() != grid.n_steps() {
        return Err(MeasureError::GridMismatch(
            "filter and control grids differ".into(),
        ));
    }
    let horizon = model.horizon();
    let mut total = 0.0;
    for k in 0..grid.n_steps() {
        let a = control.cell(k);
        let rho = filter.rho(k);
        let (t0, t1) = (grid.time(k), grid.time(k + 1));
        let mut s = t0;
        while s < t1 {
            let e = model.next_knot_after(s).map_or(t1, |kn| kn.min(t1));
            let knot = model.knot_at(s);
            let w = time_weight(horizon, s, e);
            total += w * rho
                .iter()
                .enumerate()
                .map(|(i, r)| r * model.running_reward(i, a, knot))
                .sum::<f64>();
            s = e;
        }
    }
    let terminal = match horizon {
        Horizon::Finite(_) => filter
            .terminal()
            .iter()
            .zip(model.terminal_rewards())
            .map(|(r, g)| r * g)
            .sum(),
        Horizon::Discounted(_) => 0.0,
    };
    Ok(total + terminal)
}

/// Bound on the discounted reward beyond `t_trunc`: `e^{-beta t} sup|f| mass / beta`.
pub fn tail_bound(model: &ControlModel, t_trunc: f64, mass: f64) -> Option<f64> {
    model
        .discount()
        .map(|beta| (-beta * t_trunc).exp() * model.sup_running_reward() * mass / beta)
}

/// Smallest truncation time whose tail bound is `target_error / 10`.
pub fn truncation_time(model: &ControlModel, target_error: f64, mass: f64) -> Option<f64> {
    model.discount().map(|beta| {
        let scale = 10.0 * model.sup_running_reward() * mass / (beta * target_error);
        if scale <= 1.0 {
            0.0
        } else {
            scale.ln() / beta
        }
    })
}

/// Machine-readable summary of a Monte Carlo reward estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub scheme: String,
    pub dt: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_trunc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tail_bound: Option<f64>,
}

impl EstimatorReport {
    fn new(stats: MeanSe, grid: &TimeGrid, model: &ControlModel, mass: f64) -> Self {
        let t_trunc = model.discount().map(|_| grid.horizon());
        Self {
            estimate: stats.mean,
            std_error: stats.std_error,
            n_paths: stats.n,
            scheme: "left-endpoint".into(),
            dt: grid.dt(),
            t_trunc,
            tail_bound: t_trunc.and_then(|t| tail_bound(model, t, mass)),
        }
    }

    pub fn stats(&self) -> MeanSe {
        MeanSe {
            mean: self.estimate,
            std_error: self.std_error,
            n: self.n_paths,
        }
    }
}

/// Runs `sample(path)` over `n_paths` paths in fixed blocks and reduces in order.
pub(crate) fn batch<E: Send>(
    n_paths: usize,
    sample: impl Fn(u64) -> Result<f64, E> + Sync,
) -> Result<MeanSe, E> {
    let blocks: Vec<Result<Accumulator, E>> = (0..n_paths.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut acc = Accumulator::default();
            for p in b * BLOCK..((b + 1) * BLOCK).min(n_paths) {
                acc.push(sample(p as u64)?);
            }
            Ok(acc)
        })
        .collect();
    let mut total = Accumulator::default();
    for b in blocks {
        total = total.merge(b?);
    }
    Ok(total.finish())
}

fn open_loop(source: ControlSource<'_>, grid: TimeGrid) -> Result<ControlPath, MeasureError> {
    match source.open_loop_path(grid) {
        Some(p) => Ok(p.map_err(ChainError::from)?),
        None => Err(MeasureError::Filter(FilterError::NotOpenLoop)),
    }
}

/// Reference-measure Monte Carlo estimate of `J` for an open-loop control.
pub fn estimate_reference(
    model: &ControlModel,
    grid: TimeGrid,
    source: ControlSource<'_>,
    law: &InitialLaw,
    n_paths: usize,
    seed: u64,
) -> Result<EstimatorReport, MeasureError> {
    let control = open_loop(source, grid)?;
    control.check(model).map_err(ChainError::from)?;
    let stats = batch(n_paths, |p| {
        let noise = sample_driving(SeedRecord::new(seed, p), grid, model, law);
        let chain = thin_chain(&noise.jumps, &control, model)?;
        let density = girsanov_density(&chain, &control, &noise.brownian, model)?;
        reward_reference(&chain, &control, &density, model)
    })?;
    Ok(EstimatorReport::new(stats, &grid, model, 1.0))
}

/// Physical-measure Monte Carlo estimate of `J` for any control source.
pub fn estimate_physical(
    model: &ControlModel,
    grid: TimeGrid,
    source: ControlSource<'_>,
    law: &InitialLaw,
    scheme: Scheme,
    n_paths: usize,
    seed: u64,
) -> Result<EstimatorReport, MeasureError> {
    let stats = batch(n_paths, |p| {
        let out = simulate_physical(SeedRecord::new(seed, p), grid, model, source, law, scheme)?;
        Ok::<_, MeasureError>(reward_physical(&out.chain, &out.control, model))
    })?;
    Ok(EstimatorReport::new(stats, &grid, model, 1.0))
}

/// Separated-problem Monte Carlo estimate of `J(x0)`; `W` is Brownian and
/// the control may be feedback in the filter.
pub fn estimate_separated(
    model: &ControlModel,
    grid: TimeGrid,
    source: ControlSource<'_>,
    x0: &[f64],
    scheme: Scheme,
    n_paths: usize,
    seed: u64,
) -> Result<EstimatorReport, MeasureError> {
    let stats = batch(n_paths, |p| {
        let obs = crate::chain::sample_brownian(SeedRecord::new(seed, p), grid, model.d_obs());
        let (filter, control) = integrate_filter_with(&obs, grid, source, x0, scheme, model)?;
        reward_separated(&filter, &control, model)
    })?;
    Ok(EstimatorReport::new(stats, &grid, model, x0.iter().sum()))
}
