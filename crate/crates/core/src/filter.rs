//! The controlled Wonham filter for the unnormalized conditional law.
//!
//! The filter solves
//!
//! ```text
//! d rho^i = sum_j rho^j q(alpha, t, j, i) dt + rho^i h(i, alpha, t) . dW
//! ```
//!
//! Two first-order schemes are provided. [`Scheme::Em`] is the explicit
//! Euler-Maruyama step and may leave the cone at coarse steps.
//! [`Scheme::Robust`] steps the pathwise ODE for
//! `nu^i = rho^i exp(-int h(i) . dW)`, whose off-diagonal coefficients are
//! nonnegative, so a strictly positive state stays strictly positive as long
//! as `dt * max_i(|q(i,i)| + |h(i)|^2 / 2) < 1`.
//!
//! [`oracle_filter_openloop`] estimates the same quantity as an average of
//! `1{X_t = i} Z_t` over independently thinned chains with the observation
//! held fixed. It is only valid for open-loop controls.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{sample_jump_noise, thin_chain, ChainError, InitialLaw};
use crate::control::{ControlError, ControlPath, ControlSource};
use crate::grid::TimeGrid;
use crate::measure::girsanov_density;
use crate::model::ControlModel;
use crate::rng::SeedRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("step dt = {dt} breaks positivity of the robust step: dt * rate = {product} >= 1 (largest admissible dt is below {max_dt})")]
    StepTooLarge { dt: f64, product: f64, max_dt: f64 },

    #[error("filter state became non-finite at step {step}")]
    NonFiniteState { step: usize },

    #[error("initial condition must lie in the cone D: {0}")]
    InvalidInitial(String),

    #[error("observation increments have length {found}, expected {expected}")]
    GridMismatch { expected: usize, found: usize },

    #[error("the Monte Carlo oracle needs an open-loop control")]
    NotOpenLoop,

    #[error(transparent)]
    Control(#[from] ControlError),

    #[error("chain simulation failed: {0}")]
    Chain(String),
}

impl From<ChainError> for FilterError {
    fn from(e: ChainError) -> Self {
        match e {
            ChainError::Control(c) => FilterError::Control(c),
            ChainError::Filter(f) => f,
            other => FilterError::Chain(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Em,
    #[default]
    Robust,
}

impl Scheme {
    pub fn tag(&self) -> &'static str {
        match self {
            Scheme::Em => "em",
            Scheme::Robust => "robust",
        }
    }
}

/// One explicit Euler-Maruyama step.
pub fn step_em(
    rho: &[f64],
    a: usize,
    t: f64,
    dw: &[f64],
    dt: f64,
    model: &ControlModel,
) -> Vec<f64> {
    let mut out = vec![0.0; rho.len()];
    step_em_into(rho, a, model.knot_at(t), dw, dt, model, &mut out);
    out
}

fn step_em_into(
    rho: &[f64],
    a: usize,
    knot: usize,
    dw: &[f64],
    dt: f64,
    model: &ControlModel,
    out: &mut [f64],
) {
    let n = rho.len();
    let gen = model.generator(a, knot);
    for i in 0..n {
        let inflow: f64 = (0..n).map(|j| rho[j] * gen[j * n + i]).sum();
        let noise: f64 = model
            .obs_drift(i, a, knot)
            .iter()
            .zip(dw)
            .map(|(h, w)| h * w)
            .sum();
        out[i] = rho[i] + inflow * dt + rho[i] * noise;
    }
}

/// `max_i (|q(a,t,i,i)| + |h(i,a,t)|^2 / 2)`, the robust step's stiffness.
pub fn robust_rate(model: &ControlModel, a: usize, knot: usize) -> f64 {
    (0..model.n_states())
        .map(|i| {
            let h2: f64 = model.obs_drift(i, a, knot).iter().map(|h| h * h).sum();
            model.rate(a, knot, i, i).abs() + 0.5 * h2
        })
        .fold(0.0, f64::max)
}

/// Largest `robust_rate` over every control and knot.
pub fn max_robust_rate(model: &ControlModel) -> f64 {
    (0..model.n_controls())
        .flat_map(|a| (0..model.time_knots().len()).map(move |kn| (a, kn)))
        .map(|(a, kn)| robust_rate(model, a, kn))
        .fold(0.0, f64::max)
}

fn check_robust_step(
    model: &ControlModel,
    a: usize,
    knot: usize,
    dt: f64,
) -> Result<(), FilterError> {
    let rate = robust_rate(model, a, knot);
    let product = dt * rate;
    if product >= 1.0 {
        return Err(FilterError::StepTooLarge {
            dt,
            product,
            max_dt: 1.0 / rate,
        });
    }
    Ok(())
}

/// Running stochastic integrals `int_0^t h(i, alpha_s, s) . dW_s`, one per state.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustAccumulators(pub Vec<f64>);

impl RobustAccumulators {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }
}

/// One step of the robust form: an explicit Euler step of `d nu / dt = A(t) nu`
/// followed by the map back to `rho`.
pub fn step_robust(
    rho: &[f64],
    a: usize,
    t: f64,
    dw: &[f64],
    dt: f64,
    acc: &RobustAccumulators,
    model: &ControlModel,
) -> Result<(Vec<f64>, RobustAccumulators), FilterError> {
    let knot = model.knot_at(t);
    check_robust_step(model, a, knot, dt)?;
    let mut out = vec![0.0; rho.len()];
    let mut next = acc.clone();
    let mut nu = vec![0.0; rho.len()];
    step_robust_into(rho, a, knot, dw, dt, &mut next.0, model, &mut nu, &mut out);
    Ok((out, next))
}

#[allow(clippy::too_many_arguments)]
fn step_robust_into(
    rho: &[f64],
    a: usize,
    knot: usize,
    dw: &[f64],
    dt: f64,
    acc: &mut [f64],
    model: &ControlModel,
    nu: &mut [f64],
    out: &mut [f64],
) {
    let n = rho.len();
    let gen = model.generator(a, knot);
    for i in 0..n {
        nu[i] = rho[i] * (-acc[i]).exp();
    }
    for i in 0..n {
        let h = model.obs_drift(i, a, knot);
        let h2: f64 = h.iter().map(|x| x * x).sum();
        let mut d_nu = (gen[i * n + i] - 0.5 * h2) * nu[i];
        for j in 0..n {
            if j != i && gen[j * n + i] != 0.0 {
                d_nu += gen[j * n + i] * (acc[j] - acc[i]).exp() * nu[j];
            }
        }
        out[i] = nu[i] + dt * d_nu;
    }
    for i in 0..n {
        let inc: f64 = model
            .obs_drift(i, a, knot)
            .iter()
            .zip(dw)
            .map(|(h, w)| h * w)
            .sum();
        acc[i] += inc;
        out[i] *= acc[i].exp();
    }
}

/// Incremental filter state used by integrators and in-loop simulations.
#[derive(Debug, Clone)]
pub struct FilterStepper {
    scheme: Scheme,
    rho: Vec<f64>,
    acc: Vec<f64>,
    nu: Vec<f64>,
    next: Vec<f64>,
    steps: usize,
}

impl FilterStepper {
    pub fn new(x0: &[f64], scheme: Scheme, model: &ControlModel) -> Result<Self, FilterError> {
        check_initial(x0, model)?;
        let n = x0.len();
        Ok(Self {
            scheme,
            rho: x0.to_vec(),
            acc: vec![0.0; n],
            nu: vec![0.0; n],
            next: vec![0.0; n],
            steps: 0,
        })
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn step(
        &mut self,
        a: usize,
        t: f64,
        dw: &[f64],
        dt: f64,
        model: &ControlModel,
    ) -> Result<(), FilterError> {
        let knot = model.knot_at(t);
        match self.scheme {
            Scheme::Em => step_em_into(&self.rho, a, knot, dw, dt, model, &mut self.next),
            Scheme::Robust => {
                check_robust_step(model, a, knot, dt)?;
                step_robust_into(
                    &self.rho,
                    a,
                    knot,
                    dw,
                    dt,
                    &mut self.acc,
                    model,
                    &mut self.nu,
                    &mut self.next,
                );
            }
        }
        self.steps += 1;
        if self.next.iter().any(|x| !x.is_finite()) {
            return Err(FilterError::NonFiniteState { step: self.steps });
        }
        std::mem::swap(&mut self.rho, &mut self.next);
        Ok(())
    }
}

fn check_initial(x0: &[f64], model: &ControlModel) -> Result<(), FilterError> {
    if x0.len() != model.n_states() {
        return Err(FilterError::InvalidInitial(format!(
            "expected {} entries, found {}",
            model.n_states(),
            x0.len()
        )));
    }
    if x0.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(FilterError::InvalidInitial(format!("{x0:?}")));
    }
    Ok(())
}

/// Unnormalized conditional law on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPath {
    grid: TimeGrid,
    n_states: usize,
    scheme: Scheme,
    // (n_steps + 1) x N
    rho: Vec<f64>,
}

impl FilterPath {
    pub fn from_values(
        grid: TimeGrid,
        n_states: usize,
        scheme: Scheme,
        rho: Vec<f64>,
    ) -> Result<Self, FilterError> {
        if rho.len() != (grid.n_steps() + 1) * n_states {
            return Err(FilterError::GridMismatch {
                expected: (grid.n_steps() + 1) * n_states,
                found: rho.len(),
            });
        }
        Ok(Self {
            grid,
            n_states,
            scheme,
            rho,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// `rho_{t_k}`.
    pub fn rho(&self, k: usize) -> &[f64] {
        &self.rho[k * self.n_states..(k + 1) * self.n_states]
    }

    pub fn values(&self) -> &[f64] {
        &self.rho
    }

    pub fn terminal(&self) -> &[f64] {
        self.rho(self.grid.n_steps())
    }

    pub fn mass(&self, k: usize) -> f64 {
        self.rho(k).iter().sum()
    }

    /// `pi_{t_k} = rho / sum(rho)`, or `None` when the mass vanishes.
    pub fn normalized(&self, k: usize) -> Option<Vec<f64>> {
        let m = self.mass(k);
        (m > 0.0).then(|| self.rho(k).iter().map(|x| x / m).collect())
    }

    pub fn min_entry(&self) -> f64 {
        self.rho.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn check_obs(obs: &[f64], grid: &TimeGrid, model: &ControlModel) -> Result<(), FilterError> {
    let expected = grid.n_steps() * model.d_obs();
    if obs.len() != expected {
        return Err(FilterError::GridMismatch {
            expected,
            found: obs.len(),
        });
    }
    Ok(())
}

/// Integrates the filter along fixed observation increments and an open-loop control.
pub fn integrate_filter(
    obs_increments: &[f64],
    control: &ControlPath,
    x0: &[f64],
    scheme: Scheme,
    model: &ControlModel,
) -> Result<FilterPath, FilterError> {
    control.check(model)?;
    let (path, _) = integrate_filter_with(
        obs_increments,
        *control.grid(),
        ControlSource::OpenLoop(control),
        x0,
        scheme,
        model,
    )?;
    Ok(path)
}

/// Integrates the filter with controls decided per step from `source`; the
/// control of cell `k` sees only the filter state at `t_k`.
pub fn integrate_filter_with(
    obs_increments: &[f64],
    grid: TimeGrid,
    source: ControlSource<'_>,
    x0: &[f64],
    scheme: Scheme,
    model: &ControlModel,
) -> Result<(FilterPath, ControlPath), FilterError> {
    check_obs(obs_increments, &grid, model)?;
    let n = model.n_states();
    let d = model.d_obs();
    let mut stepper = FilterStepper::new(x0, scheme, model)?;
    let mut rho = Vec::with_capacity((grid.n_steps() + 1) * n);
    let mut controls = Vec::with_capacity(grid.n_steps());
    rho.extend_from_slice(stepper.rho());
    for k in 0..grid.n_steps() {
        let a = source.decide(&grid, k, stepper.rho());
        if a >= model.n_controls() {
            return Err(ControlError::OutOfRange {
                index: a,
                size: model.n_controls(),
            }
            .into());
        }
        controls.push(a);
        stepper.step(
            a,
            grid.time(k),
            &obs_increments[k * d..(k + 1) * d],
            grid.dt(),
            model,
        )?;
        rho.extend_from_slice(stepper.rho());
    }
    Ok((
        FilterPath {
            grid,
            n_states: n,
            scheme,
            rho,
        },
        ControlPath::new(grid, controls)?,
    ))
}

/// Monte Carlo estimate of the filter with per-entry standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleEstimate {
    pub grid: TimeGrid,
    pub n_states: usize,
    pub n_chains: usize,
    /// `(n_steps + 1) x N`
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
}

impl OracleEstimate {
    pub fn mean_at(&self, k: usize) -> &[f64] {
        &self.mean[k * self.n_states..(k + 1) * self.n_states]
    }

    pub fn std_error_at(&self, k: usize) -> &[f64] {
        &self.std_error[k * self.n_states..(k + 1) * self.n_states]
    }
}

/// Chains per work unit; fixed so that sums are reduced in a deterministic order.
pub(crate) const BLOCK: usize = 512;

/// Estimates `rho_t^i = E[1{X_t = i} Z_t | W]` by averaging over `n_chains`
/// chains thinned from independent jump records, with `W` held fixed.
pub fn oracle_filter_openloop(
    obs_increments: &[f64],
    grid: TimeGrid,
    source: ControlSource<'_>,
    x0: &[f64],
    n_chains: usize,
    seed: u64,
    model: &ControlModel,
) -> Result<OracleEstimate, FilterError> {
    let control = match source.open_loop_path(grid) {
        Some(path) => path?,
        None => return Err(FilterError::NotOpenLoop),
    };
    control.check(model)?;
    check_obs(obs_increments, &grid, model)?;
    check_initial(x0, model)?;
    let n = model.n_states();
    let len = (grid.n_steps() + 1) * n;
    let mass: f64 = x0.iter().sum();
    if mass == 0.0 || n_chains == 0 {
        return Ok(OracleEstimate {
            grid,
            n_states: n,
            n_chains,
            mean: vec![0.0; len],
            std_error: vec![0.0; len],
        });
    }
    let law = InitialLaw::from_weights(x0)?;

    let n_blocks = n_chains.div_ceil(BLOCK);
    let partials: Vec<Result<(Vec<f64>, Vec<f64>), FilterError>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut sum = vec![0.0; len];
            let mut sumsq = vec![0.0; len];
            for m in b * BLOCK..((b + 1) * BLOCK).min(n_chains) {
                let noise =
                    sample_jump_noise(SeedRecord::new(seed, m as u64), grid.horizon(), model, &law);
                let chain = thin_chain(&noise, &control, model)?;
                let density = girsanov_density(&chain, &control, obs_increments, model)
                    .map_err(|e| FilterError::Chain(e.to_string()))?;
                let mut next_jump = 0;
                let mut state = chain.initial_state;
                for k in 0..=grid.n_steps() {
                    let t = grid.time(k);
                    while next_jump < chain.jump_times.len() && chain.jump_times[next_jump] <= t {
                        state = chain.jump_states[next_jump];
                        next_jump += 1;
                    }
                    let z = density.value(k);
                    sum[k * n + state] += z;
                    sumsq[k * n + state] += z * z;
                }
            }
            Ok((sum, sumsq))
        })
        .collect();

    let mut sum = vec![0.0; len];
    let mut sumsq = vec![0.0; len];
    for p in partials {
        let (s, s2) = p?;
        sum.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        sumsq.iter_mut().zip(&s2).for_each(|(a, b)| *a += b);
    }
    let m = n_chains as f64;
    let mut mean = vec![0.0; len];
    let mut std_error = vec![0.0; len];
    for idx in 0..len {
        let mu = sum[idx] / m;
        let var = if n_chains > 1 {
            ((sumsq[idx] - m * mu * mu) / (m - 1.0)).max(0.0)
        } else {
            0.0
        };
        mean[idx] = mass * mu;
        std_error[idx] = mass * (var / m).sqrt();
    }
    Ok(OracleEstimate {
        grid,
        n_states: n,
        n_chains,
        mean,
        std_error,
    })
}
