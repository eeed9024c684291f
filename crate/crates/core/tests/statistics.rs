//! Statistical oracles for simulation, density, filter and reward estimators.

mod common;

use common::*;
use rayon::prelude::*;
use wonham_control::chain::{
    compensator_residual, sample_brownian, sample_jump_noise, simulate_physical, thin_chain,
};
use wonham_control::filter::{integrate_filter, oracle_filter_openloop};
use wonham_control::measure::{estimate_reference, estimate_separated, tail_bound};
use wonham_control::stats::{ks_critical_1pct, ks_statistic, mean_se};
use wonham_control::*;

fn symmetric(
    rate: f64,
    h: [f64; 2],
    f: [f64; 2],
    horizon: Horizon,
    k: Option<f64>,
) -> ControlModel {
    let mut doc = ModelDocument::homogeneous(
        vec!["a".into()],
        vec![vec![vec![0.0, rate], vec![rate, 0.0]]],
        vec![vec![vec![h[0]], vec![h[1]]]],
        vec![f.to_vec()],
        vec![0.0, 0.0],
        horizon,
    );
    doc.k_intensity = k;
    validate_model(&doc).unwrap()
}

/// `P(X_t = 1 | X_0 = 1)` for the symmetric two-state chain with unit rates.
fn stay_probability(t: f64) -> f64 {
    0.5 + 0.5 * (-2.0 * t).exp()
}

#[test]
fn poisson_candidate_count_has_mean_k_t() {
    let m = symmetric(
        1.0,
        [0.0, 0.0],
        [0.0, 0.0],
        Horizon::Finite(10.0),
        Some(4.0),
    );
    let law = InitialLaw::point(2, 0);
    let counts: Vec<f64> = (0..10_000u64)
        .map(|p| {
            sample_jump_noise(SeedRecord::new(11, p), 10.0, &m, &law)
                .poisson_times
                .len() as f64
        })
        .collect();
    let s = mean_se(&counts);
    assert!(
        (s.mean - 40.0).abs() <= 3.0 * (40.0f64 / 1e4).sqrt(),
        "{}",
        s.mean
    );
}

#[test]
fn brownian_increments_have_variance_dt() {
    let grid = TimeGrid::with_steps(1.0, 100).unwrap();
    let w = sample_brownian(SeedRecord::new(12, 0), grid, 1);
    let all: Vec<f64> = (0..100u64)
        .flat_map(|p| sample_brownian(SeedRecord::new(12, p), grid, 1))
        .map(|x| x * x)
        .collect();
    assert_eq!(w.len(), 100);
    let s = mean_se(&all);
    assert!((s.mean - 0.01).abs() <= 3.0 * s.std_error);
}

#[test]
fn two_state_holding_times_are_exponential() {
    let m = symmetric(
        1.0,
        [0.0, 0.0],
        [0.0, 0.0],
        Horizon::Finite(10.0),
        Some(4.0),
    );
    let grid = TimeGrid::with_steps(10.0, 1).unwrap();
    let control = ControlPath::constant(grid, 0);
    let law = InitialLaw::point(2, 0);
    // The first sojourn is censored only beyond T = 10, with probability e^{-10}.
    let holding: Vec<f64> = (0..100_000u64)
        .into_par_iter()
        .filter_map(|p| {
            let noise = sample_jump_noise(SeedRecord::new(13, p), 10.0, &m, &law);
            thin_chain(&noise, &control, &m)
                .unwrap()
                .jump_times
                .first()
                .copied()
        })
        .collect();
    let ks = ks_statistic(&holding, |t| 1.0 - (-t).exp());
    assert!(ks < ks_critical_1pct(holding.len()), "{ks}");
}

#[test]
fn two_state_compensator_has_mean_zero() {
    let m = symmetric(
        1.0,
        [0.0, 0.0],
        [0.0, 0.0],
        Horizon::Finite(10.0),
        Some(4.0),
    );
    let grid = TimeGrid::with_steps(10.0, 1).unwrap();
    let control = ControlPath::constant(grid, 0);
    let law = InitialLaw::point(2, 0);
    for target in 0..2 {
        let r: Vec<f64> = (0..10_000u64)
            .into_par_iter()
            .map(|p| {
                let noise = sample_jump_noise(SeedRecord::new(14, p), 10.0, &m, &law);
                let chain = thin_chain(&noise, &control, &m).unwrap();
                compensator_residual(&chain, &control, &m, target).unwrap()
            })
            .collect();
        let s = mean_se(&r);
        assert!(s.mean.abs() <= 3.0 * s.std_error, "target {target}: {s:?}");
    }
}

#[test]
fn observation_drift_is_recovered() {
    let c = 0.7;
    let m = symmetric(0.0, [c, c], [0.0, 0.0], Horizon::Finite(2.0), None);
    let grid = TimeGrid::with_steps(2.0, 50).unwrap();
    let law = InitialLaw::point(2, 1);
    let w_t: Vec<f64> = (0..10_000u64)
        .map(|p| {
            let out = simulate_physical(
                SeedRecord::new(15, p),
                grid,
                &m,
                ControlSource::Constant(0),
                &law,
                Scheme::Robust,
            )
            .unwrap();
            out.obs_increments.iter().sum()
        })
        .collect();
    let s = mean_se(&w_t);
    assert!((s.mean - c * 2.0).abs() <= 3.0 * s.std_error);
}

#[test]
fn reference_estimator_matches_occupancy() {
    let m = symmetric(1.0, [0.0, 0.0], [1.0, 0.0], Horizon::Finite(1.0), None);
    let grid = TimeGrid::with_steps(1.0, 100).unwrap();
    let r = estimate_reference(
        &m,
        grid,
        ControlSource::Constant(0),
        &InitialLaw::point(2, 0),
        10_000,
        16,
    )
    .unwrap();
    let exact = 0.5 + 0.25 * (1.0 - (-2.0f64).exp());
    assert!((r.estimate - exact).abs() <= 3.0 * r.std_error, "{r:?}");
}

#[test]
fn discounted_constant_reward_is_c_over_beta() {
    let (c, beta) = (0.6, 1.5);
    let m = symmetric(1.0, [1.0, -1.0], [c, c], Horizon::Discounted(beta), None);
    let grid = TimeGrid::with_steps(8.0, 800).unwrap();
    let r = estimate_separated(
        &m,
        grid,
        ControlSource::Constant(0),
        &[0.3, 0.7],
        Scheme::Robust,
        4_000,
        17,
    )
    .unwrap();
    let tail = tail_bound(&m, 8.0, 1.0).unwrap();
    assert_eq!(r.tail_bound, Some(tail));
    assert!(
        (r.estimate - c / beta).abs() <= 3.0 * r.std_error + tail,
        "{r:?}"
    );
}

#[test]
fn deterministic_filter_follows_the_matrix_exponential() {
    let m = symmetric(1.0, [0.0, 0.0], [1.0, 0.0], Horizon::Finite(1.0), None);
    for n in [100usize, 200] {
        let grid = TimeGrid::with_steps(1.0, n).unwrap();
        let w = vec![0.0; n];
        for scheme in [Scheme::Em, Scheme::Robust] {
            let f = integrate_filter(&w, &ControlPath::constant(grid, 0), &[1.0, 0.0], scheme, &m)
                .unwrap();
            for k in (0..=n).step_by(n / 10) {
                let p = stay_probability(grid.time(k));
                let err = (f.rho(k)[0] - p).abs().max((f.rho(k)[1] - (1.0 - p)).abs());
                // Explicit Euler on x' = Q^T x: error <= (dt/2) t |Q|^2 |x|.
                assert!(
                    err <= 0.5 * grid.dt() * grid.time(k) * 4.0 + 1e-12,
                    "{scheme:?} {k}"
                );
            }
        }
    }
}

#[test]
fn oracle_without_observation_matches_occupancy() {
    let m = symmetric(1.0, [0.0, 0.0], [0.0, 0.0], Horizon::Finite(1.0), None);
    let grid = TimeGrid::with_steps(1.0, 100).unwrap();
    let w = vec![0.0; 100];
    let o = oracle_filter_openloop(
        &w,
        grid,
        ControlSource::Constant(0),
        &[1.0, 0.0],
        20_000,
        18,
        &m,
    )
    .unwrap();
    for k in (0..=100).step_by(10) {
        let p = stay_probability(grid.time(k));
        assert!(
            (o.mean_at(k)[0] - p).abs() <= 3.0 * o.std_error_at(k)[0] + 1e-12,
            "{k}"
        );
    }
}

#[test]
fn oracle_agrees_with_robust_filter() {
    let m = symmetric(1.0, [1.0, -1.0], [0.0, 0.0], Horizon::Finite(1.0), None);
    let grid = TimeGrid::with_steps(1.0, 500).unwrap();
    let w = sample_brownian(SeedRecord::new(19, 0), grid, 1);
    let control = ControlPath::constant(grid, 0);
    let rho = integrate_filter(&w, &control, &[0.5, 0.5], Scheme::Robust, &m).unwrap();
    let o = oracle_filter_openloop(
        &w,
        grid,
        ControlSource::Constant(0),
        &[0.5, 0.5],
        20_000,
        20,
        &m,
    )
    .unwrap();
    for k in (50..=500).step_by(50) {
        for i in 0..2 {
            let err = (rho.rho(k)[i] - o.mean_at(k)[i]).abs();
            assert!(err <= 3.0 * o.std_error_at(k)[i] + 0.02, "{k} {i}: {err}");
        }
    }
}

#[test]
fn rate_control_example_is_valid() {
    let m = rate_control_model(1.0);
    assert_eq!(m.n_controls(), 11);
    assert_eq!(m.rate(10, 0, 0, 0), -1.0);
    assert_eq!(m.control_label(3), "0.3");
}
