use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::policy::FeedbackPolicy;
use super::solver::ValueGrid;
use super::HjbError;
use crate::chain::sample_brownian;
use crate::control::{ControlPath, ControlSource};
use crate::filter::{integrate_filter_with, FilterPath, Scheme};
use crate::grid::TimeGrid;
use crate::measure::{reward_separated, tail_bound, EstimatorReport};
use crate::model::ControlModel;
use crate::rng::SeedRecord;
use crate::stats::{mean_se, Accumulator};

/// One closed-loop filter trajectory and its separated reward.
#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    pub filter: FilterPath,
    pub control: ControlPath,
    pub reward: f64,
}

/// Runs the filter from `x0` with controls chosen by `policy`.
pub fn simulate_closed_loop(
    model: &ControlModel,
    policy: &FeedbackPolicy,
    x0: &[f64],
    grid: TimeGrid,
    scheme: Scheme,
    seed: SeedRecord,
) -> Result<ClosedLoopRun, HjbError> {
    let obs = sample_brownian(seed, grid, model.d_obs());
    run(
        model,
        ControlSource::Feedback(policy),
        x0,
        grid,
        scheme,
        &obs,
    )
}

fn run(
    model: &ControlModel,
    source: ControlSource<'_>,
    x0: &[f64],
    grid: TimeGrid,
    scheme: Scheme,
    obs: &[f64],
) -> Result<ClosedLoopRun, HjbError> {
    let (filter, control) = integrate_filter_with(obs, grid, source, x0, scheme, model)?;
    let reward = reward_separated(&filter, &control, model)?;
    Ok(ClosedLoopRun {
        filter,
        control,
        reward,
    })
}

/// A competing admissible control.
#[derive(Clone, Copy, Debug)]
pub struct Challenger<'a> {
    pub label: &'a str,
    pub source: ControlSource<'a>,
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub grid: TimeGrid,
    pub scheme: Scheme,
    pub n_paths: usize,
    pub seed: u64,
    /// Allowance for discretization error of the value and the policy.
    pub scheme_budget: f64,
    /// Multiplier on standard errors.
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChallengerOutcome {
    pub label: String,
    pub estimate: f64,
    pub std_error: f64,
    /// Mean and standard error of `J(challenger) - J(closed loop)` on common noise.
    pub diff_mean: f64,
    pub diff_std_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub value_at_x0: f64,
    pub closed_loop: EstimatorReport,
    pub value_gap: f64,
    pub value_tolerance: f64,
    pub value_pass: bool,
    pub challengers: Vec<ChallengerOutcome>,
    pub scheme_budget: f64,
    pub pass: bool,
}

/// Compares the closed-loop reward with `v(0, x0)` and with each challenger
/// on common observation noise.
pub fn verify_optimality(
    model: &ControlModel,
    values: &ValueGrid,
    policy: &FeedbackPolicy,
    x0: &[f64],
    challengers: &[Challenger<'_>],
    opts: &VerifyOptions,
) -> Result<VerificationReport, HjbError> {
    let grid = opts.grid;
    let mass: f64 = x0.iter().sum();
    let rows: Vec<Vec<f64>> = (0..opts.n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let obs = sample_brownian(SeedRecord::new(opts.seed, p), grid, model.d_obs());
            let mut row = vec![
                run(
                    model,
                    ControlSource::Feedback(policy),
                    x0,
                    grid,
                    opts.scheme,
                    &obs,
                )?
                .reward,
            ];
            for c in challengers {
                row.push(run(model, c.source, x0, grid, opts.scheme, &obs)?.reward);
            }
            Ok(row)
        })
        .collect::<Result<_, HjbError>>()?;
    let column = |j: usize| rows.iter().map(|r| r[j]).collect::<Vec<f64>>();
    let closed = mean_se(&column(0));
    let tail = model
        .discount()
        .and_then(|_| tail_bound(model, grid.horizon(), mass))
        .unwrap_or(0.0);
    let budget = opts.scheme_budget + tail;
    let value = values.initial_value(x0);
    let value_tolerance = opts.z * closed.std_error + budget;
    let value_gap = closed.mean - value;
    let value_pass = value_gap.abs() <= value_tolerance;
    let outcomes: Vec<ChallengerOutcome> = challengers
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let est = mean_se(&column(j + 1));
            let mut diff = Accumulator::default();
            for r in &rows {
                diff.push(r[j + 1] - r[0]);
            }
            let d = diff.finish();
            ChallengerOutcome {
                label: c.label.to_string(),
                estimate: est.mean,
                std_error: est.std_error,
                diff_mean: d.mean,
                diff_std_error: d.std_error,
                pass: d.mean <= opts.z * d.std_error + opts.scheme_budget,
            }
        })
        .collect();
    let pass = value_pass && outcomes.iter().all(|o| o.pass);
    Ok(VerificationReport {
        value_at_x0: value,
        closed_loop: EstimatorReport {
            estimate: closed.mean,
            std_error: closed.std_error,
            n_paths: closed.n,
            scheme: "left-endpoint".into(),
            dt: grid.dt(),
            t_trunc: model.discount().map(|_| grid.horizon()),
            tail_bound: model.discount().map(|_| tail),
        },
        value_gap,
        value_tolerance,
        value_pass,
        challengers: outcomes,
        scheme_budget: opts.scheme_budget,
        pass,
    })
}
