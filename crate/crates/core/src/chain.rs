//! Controlled chains built by Poisson thinning.
//!
//! A dominating Poisson process of rate `K` proposes candidate times `T_n`
//! with uniform marks `X_n` on the state space and uniforms `U_n`. Starting
//! from `X_0`, the candidate `n` is accepted as the next jump when
//!
//! ```text
//! U_n < N * q(alpha(T_n), T_n, current, X_n) / K
//! ```
//!
//! using the off-diagonal rate; a candidate whose mark equals the current
//! state is always rejected. The accepted points form a chain whose jump
//! compensator is `q(alpha_t, t, X_{t-}, j) dt`.

use rand::Rng;
use rand_distr::{Distribution, Exp, Open01, StandardNormal};
use thiserror::Error;

use crate::control::{ControlError, ControlPath, ControlSource};
use crate::filter::{FilterError, FilterStepper, Scheme};
use crate::grid::TimeGrid;
use crate::model::ControlModel;
use crate::rng::{SeedRecord, StreamKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error(transparent)]
    Control(#[from] ControlError),

    #[error(transparent)]
    Filter(#[from] FilterError),

    #[error("invalid initial law: {0}")]
    InvalidInitialLaw(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),
}

/// Law of the initial state `X_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialLaw {
    probs: Vec<f64>,
}

impl InitialLaw {
    /// Point mass at state `i` (0-based) among `n` states.
    pub fn point(n: usize, i: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[i] = 1.0;
        Self { probs }
    }

    /// Normalizes a nonzero vector of the cone `D`.
    pub fn from_weights(w: &[f64]) -> Result<Self, ChainError> {
        if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(ChainError::InvalidInitialLaw(format!(
                "weights must be finite and nonnegative: {w:?}"
            )));
        }
        let mass: f64 = w.iter().sum();
        if mass <= 0.0 {
            return Err(ChainError::InvalidInitialLaw("weights sum to zero".into()));
        }
        Ok(Self {
            probs: w.iter().map(|x| x / mass).collect(),
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // u landed in the rounding gap above the last cumulative sum
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

/// The marked Poisson record driving the jumps.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpNoise {
    pub poisson_times: Vec<f64>,
    /// Candidate states, 0-based.
    pub marks: Vec<usize>,
    pub uniforms: Vec<f64>,
    pub initial_state: usize,
    pub horizon: f64,
    pub intensity: f64,
}

/// Jump record plus Brownian increments on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivingNoise {
    pub jumps: JumpNoise,
    /// `n_steps x d` increments, row-major by step.
    pub brownian: Vec<f64>,
    pub grid: TimeGrid,
    pub d_obs: usize,
    pub seed: SeedRecord,
}

impl DrivingNoise {
    pub fn increment(&self, k: usize) -> &[f64] {
        &self.brownian[k * self.d_obs..(k + 1) * self.d_obs]
    }
}

/// Samples the jump record on `[0, horizon]`: exponential(K) gaps until the
/// first time past the horizon, uniform marks, uniforms on `(0,1)`.
pub fn sample_jump_noise(
    seed: SeedRecord,
    horizon: f64,
    model: &ControlModel,
    law: &InitialLaw,
) -> JumpNoise {
    let k = model.k_intensity();
    let n = model.n_states();
    let exp = Exp::new(k).expect("validated intensity is positive");
    let mut time_rng = seed.stream(StreamKind::PoissonTimes);
    let mut mark_rng = seed.stream(StreamKind::Marks);
    let mut unif_rng = seed.stream(StreamKind::Uniforms);
    let mut init_rng = seed.stream(StreamKind::InitialState);

    let mut poisson_times = Vec::with_capacity((1.5 * k * horizon) as usize + 4);
    let mut t = 0.0;
    loop {
        t += exp.sample(&mut time_rng);
        if t > horizon {
            break;
        }
        poisson_times.push(t);
    }
    let marks = (0..poisson_times.len())
        .map(|_| mark_rng.random_range(0..n))
        .collect();
    let uniforms = (0..poisson_times.len())
        .map(|_| Open01.sample(&mut unif_rng))
        .collect();
    JumpNoise {
        poisson_times,
        marks,
        uniforms,
        initial_state: law.sample(&mut init_rng),
        horizon,
        intensity: k,
    }
}

/// Gaussian increments `N(0, dt I_d)` on every cell of `grid`.
pub fn sample_brownian(seed: SeedRecord, grid: TimeGrid, d: usize) -> Vec<f64> {
    let mut rng = seed.stream(StreamKind::Brownian);
    let sd = grid.dt().sqrt();
    (0..grid.n_steps() * d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        })
        .collect()
}

/// All driving randomness of one path.
pub fn sample_driving(
    seed: SeedRecord,
    grid: TimeGrid,
    model: &ControlModel,
    law: &InitialLaw,
) -> DrivingNoise {
    DrivingNoise {
        jumps: sample_jump_noise(seed, grid.horizon(), model, law),
        brownian: sample_brownian(seed, grid, model.d_obs()),
        grid,
        d_obs: model.d_obs(),
        seed,
    }
}

/// A piecewise-constant controlled trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPath {
    pub initial_state: usize,
    pub jump_times: Vec<f64>,
    pub jump_states: Vec<usize>,
    pub horizon: f64,
}

/// A maximal interval on which state, control and coefficient knot are constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub cell: usize,
    pub state: usize,
    pub control: usize,
    pub knot: usize,
}

impl Segment {
    #[inline]
    pub fn len(&self) -> f64 {
        self.end - self.start
    }
}

impl ChainPath {
    /// State at `t`: the last accepted state at or before `t`.
    pub fn state_at(&self, t: f64) -> usize {
        match self.jump_times.partition_point(|&s| s <= t) {
            0 => self.initial_state,
            p => self.jump_states[p - 1],
        }
    }

    pub fn final_state(&self) -> usize {
        self.jump_states
            .last()
            .copied()
            .unwrap_or(self.initial_state)
    }

    pub fn n_jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// Visits the constant pieces of `(state, control, knot)` over the control grid.
    pub fn for_each_segment(
        &self,
        control: &ControlPath,
        model: &ControlModel,
        mut visit: impl FnMut(&Segment),
    ) {
        let grid = control.grid();
        let mut next_jump = 0;
        let mut state = self.initial_state;
        for k in 0..grid.n_steps() {
            let t0 = grid.time(k);
            while next_jump < self.jump_times.len() && self.jump_times[next_jump] <= t0 {
                state = self.jump_states[next_jump];
                next_jump += 1;
            }
            let end =
                next_jump + self.jump_times[next_jump..].partition_point(|&s| s < grid.time(k + 1));
            visit_cell(
                t0,
                grid.time(k + 1),
                k,
                state,
                control.cell(k),
                &self.jump_times[next_jump..end],
                &self.jump_states[next_jump..end],
                model,
                &mut visit,
            );
            if end > next_jump {
                state = self.jump_states[end - 1];
                next_jump = end;
            }
        }
    }
}

/// Visits the pieces of one grid cell `[t0, t1)` given the jumps inside it.
#[allow(clippy::too_many_arguments)]
pub(crate) fn visit_cell(
    t0: f64,
    t1: f64,
    cell: usize,
    mut state: usize,
    control: usize,
    jump_times: &[f64],
    jump_states: &[usize],
    model: &ControlModel,
    visit: &mut impl FnMut(&Segment),
) {
    let mut t = t0;
    let mut jp = 0;
    while t < t1 {
        let mut next = t1;
        if jp < jump_times.len() && jump_times[jp] < next {
            next = jump_times[jp];
        }
        if let Some(kn) = model.next_knot_after(t) {
            if kn < next {
                next = kn;
            }
        }
        if next > t {
            visit(&Segment {
                start: t,
                end: next,
                cell,
                state,
                control,
                knot: model.knot_at(t),
            });
        }
        t = next;
        while jp < jump_times.len() && jump_times[jp] <= t {
            state = jump_states[jp];
            jp += 1;
        }
    }
}

#[inline]
fn accepts(model: &ControlModel, a: usize, t: f64, current: usize, mark: usize, u: f64) -> bool {
    if mark == current {
        return false;
    }
    let knot = model.knot_at(t);
    u < model.n_states() as f64 * model.rate(a, knot, current, mark) / model.k_intensity()
}

/// Applies the thinning recursion to a fixed jump record and control path.
pub fn thin_chain(
    noise: &JumpNoise,
    control: &ControlPath,
    model: &ControlModel,
) -> Result<ChainPath, ChainError> {
    control.check(model)?;
    let mut state = noise.initial_state;
    let mut jump_times = Vec::new();
    let mut jump_states = Vec::new();
    for ((&t, &mark), &u) in noise
        .poisson_times
        .iter()
        .zip(&noise.marks)
        .zip(&noise.uniforms)
    {
        let a = control.at(t)?;
        if accepts(model, a, t, state, mark, u) {
            state = mark;
            jump_times.push(t);
            jump_states.push(mark);
        }
    }
    Ok(ChainPath {
        initial_state: noise.initial_state,
        jump_times,
        jump_states,
        horizon: noise.horizon,
    })
}

/// `N_T(j) - int_0^T q(alpha_s, s, X_{s-}, j) 1{X_{s-} != j} ds`, the integral
/// evaluated exactly over the constant pieces.
pub fn compensator_residual(
    path: &ChainPath,
    control: &ControlPath,
    model: &ControlModel,
    target: usize,
) -> Result<f64, ChainError> {
    control.check(model)?;
    let horizon = control.grid().horizon();
    let count = path
        .jump_times
        .iter()
        .zip(&path.jump_states)
        .filter(|(&t, &s)| s == target && t <= horizon)
        .count() as f64;
    let mut integral = 0.0;
    path.for_each_segment(control, model, |seg| {
        if seg.state != target {
            integral += model.rate(seg.control, seg.knot, seg.state, target) * seg.len();
        }
    });
    Ok(count - integral)
}

/// Output of a physical-measure co-simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalPath {
    pub chain: ChainPath,
    /// Observation increments `dW = h(X, alpha, t) dt + dB`, `n_steps x d`.
    pub obs_increments: Vec<f64>,
    pub control: ControlPath,
    pub seed: SeedRecord,
}

impl PhysicalPath {
    /// Cumulative observation path `W_{t_k}`, `k = 0..=n_steps`.
    pub fn observation(&self) -> Vec<Vec<f64>> {
        cumulative(&self.obs_increments, self.chain_d())
    }

    fn chain_d(&self) -> usize {
        self.obs_increments.len() / self.control.grid().n_steps()
    }
}

/// Running sums of row-major increments with `d` columns, starting at 0.
pub fn cumulative(increments: &[f64], d: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(increments.len() / d + 1);
    let mut w = vec![0.0; d];
    out.push(w.clone());
    for dw in increments.chunks(d) {
        for (wk, x) in w.iter_mut().zip(dw) {
            *wk += x;
        }
        out.push(w.clone());
    }
    out
}

/// Co-simulates chain, observation and control under the physical measure.
///
/// On each cell the control is fixed at `t_k` (from the open-loop path or
/// from the feedback law applied to the in-loop filter), the chain is thinned
/// across the cell, and the observation increment is the exact cell integral
/// of `h` along the chain plus the Brownian increment.
pub fn simulate_physical(
    seed: SeedRecord,
    grid: TimeGrid,
    model: &ControlModel,
    source: ControlSource<'_>,
    law: &InitialLaw,
    scheme: Scheme,
) -> Result<PhysicalPath, ChainError> {
    if law.probs().len() != model.n_states() {
        return Err(ChainError::InvalidInitialLaw(format!(
            "law has {} entries, model has {} states",
            law.probs().len(),
            model.n_states()
        )));
    }
    if let ControlSource::OpenLoop(path) = source {
        path.check(model)?;
        if path.grid().n_steps() != grid.n_steps() {
            return Err(ChainError::GridMismatch(format!(
                "control has {} cells, simulation grid has {}",
                path.grid().n_steps(),
                grid.n_steps()
            )));
        }
    }
    let d = model.d_obs();
    let noise = sample_driving(seed, grid, model, law);
    let jumps = &noise.jumps;
    let mut stepper = match source {
        ControlSource::Feedback(_) => Some(FilterStepper::new(law.probs(), scheme, model)?),
        _ => None,
    };

    let mut state = jumps.initial_state;
    let mut jump_times = Vec::new();
    let mut jump_states = Vec::new();
    let mut controls = Vec::with_capacity(grid.n_steps());
    let mut obs = Vec::with_capacity(grid.n_steps() * d);
    let mut next = 0;
    let mut drift = vec![0.0; d];

    for k in 0..grid.n_steps() {
        let t0 = grid.time(k);
        let t1 = grid.time(k + 1);
        let a = match &stepper {
            Some(s) => source.decide(&grid, k, s.rho()),
            None => source.decide(&grid, k, &[]),
        };
        if a >= model.n_controls() {
            return Err(ControlError::OutOfRange {
                index: a,
                size: model.n_controls(),
            }
            .into());
        }
        controls.push(a);

        let first_jump = jump_times.len();
        let state_at_t0 = state;
        while next < jumps.poisson_times.len() && grid.cell_of(jumps.poisson_times[next]) == k {
            let t = jumps.poisson_times[next];
            let mark = jumps.marks[next];
            if accepts(model, a, t, state, mark, jumps.uniforms[next]) {
                state = mark;
                jump_times.push(t);
                jump_states.push(mark);
            }
            next += 1;
        }

        drift.iter_mut().for_each(|x| *x = 0.0);
        visit_cell(
            t0,
            t1,
            k,
            state_at_t0,
            a,
            &jump_times[first_jump..],
            &jump_states[first_jump..],
            model,
            &mut |seg: &Segment| {
                for (acc, h) in drift
                    .iter_mut()
                    .zip(model.obs_drift(seg.state, a, seg.knot))
                {
                    *acc += h * seg.len();
                }
            },
        );
        let db = noise.increment(k);
        let start = obs.len();
        obs.extend(drift.iter().zip(db).map(|(m, b)| m + b));
        if let Some(s) = stepper.as_mut() {
            s.step(a, t0, &obs[start..], grid.dt(), model)?;
        }
    }

    Ok(PhysicalPath {
        chain: ChainPath {
            initial_state: jumps.initial_state,
            jump_times,
            jump_states,
            horizon: grid.horizon(),
        },
        obs_increments: obs,
        control: ControlPath::new(grid, controls)?,
        seed,
    })
}
