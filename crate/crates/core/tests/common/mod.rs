#![allow(dead_code)]

use wonham_control::{validate_model, ControlModel, Horizon, ModelDocument};

/// Controls `0, 0.1, .., 1` with rates `a` in both directions, `h = (1, -1)`,
/// running reward `-a^2 / 2` and terminal reward `g = (1, 0)`.
pub fn rate_control_model(horizon: f64) -> ControlModel {
    let controls: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
    let doc = ModelDocument::homogeneous(
        controls.iter().map(|a| format!("{a:.1}")).collect(),
        controls
            .iter()
            .map(|&a| vec![vec![0.0, a], vec![a, 0.0]])
            .collect(),
        controls
            .iter()
            .map(|_| vec![vec![1.0], vec![-1.0]])
            .collect(),
        controls.iter().map(|&a| vec![-a * a / 2.0; 2]).collect(),
        vec![1.0, 0.0],
        Horizon::Finite(horizon),
    );
    validate_model(&doc).unwrap()
}

/// Symmetric unit rates, `f = (1, 0)`, `g = 0`, `T = 1`, one control.
/// Its value is `<x, w(0)>` with `w(0) = (1/2 + (1 - e^-2)/4, 1/2 - (1 - e^-2)/4)`.
pub fn linear_value_model(h: [f64; 2]) -> ControlModel {
    let doc = ModelDocument::homogeneous(
        vec!["only".into()],
        vec![vec![vec![0.0, 1.0], vec![1.0, 0.0]]],
        vec![vec![vec![h[0]], vec![h[1]]]],
        vec![vec![1.0, 0.0]],
        vec![0.0, 0.0],
        Horizon::Finite(1.0),
    );
    validate_model(&doc).unwrap()
}

/// Exact `w(t)` for [`linear_value_model`]: `-w' = Qw + f`, `w(1) = 0`.
pub fn linear_value_oracle(t: f64) -> [f64; 2] {
    // Sum and difference decouple: s(t) = 1 - t, d(t) = (1 - e^{-2(1-t)}) / 2.
    let s = 1.0 - t;
    let d = 0.5 * (1.0 - (-2.0 * (1.0 - t)).exp());
    [0.5 * (s + d), 0.5 * (s - d)]
}

/// Two controls on two states, both with `h = (1, -1)`.
pub fn two_control_model(horizon: Horizon) -> ControlModel {
    let doc = ModelDocument::homogeneous(
        vec!["calm".into(), "busy".into()],
        vec![
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![vec![0.0, 2.0], vec![0.5, 0.0]],
        ],
        vec![vec![vec![1.0], vec![-1.0]], vec![vec![1.0], vec![-1.0]]],
        vec![vec![1.0, -0.5], vec![0.3, 0.6]],
        vec![0.5, -1.0],
        horizon,
    );
    validate_model(&doc).unwrap()
}

/// Three states, one control, time-homogeneous rates at most 1, `K = 6`.
pub fn three_state_model(horizon: f64) -> ControlModel {
    let mut doc = ModelDocument::homogeneous(
        vec!["fixed".into()],
        vec![vec![
            vec![0.0, 0.7, 0.3],
            vec![1.0, 0.0, 0.5],
            vec![0.2, 0.9, 0.0],
        ]],
        vec![vec![vec![1.0], vec![0.0], vec![-1.0]]],
        vec![vec![1.0, 0.0, -1.0]],
        vec![0.0, 0.0, 0.0],
        Horizon::Finite(horizon),
    );
    doc.k_intensity = Some(6.0);
    validate_model(&doc).unwrap()
}

pub fn report(criterion: usize, pass: bool, detail: &str) {
    println!(
        "criterion {criterion:>2}: {} {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}
