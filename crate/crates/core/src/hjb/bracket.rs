use crate::model::ControlModel;

/// Drift, diffusion columns and running reward of the separated state at `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalCoefficients {
    /// `b_i = sum_j x_j q(a, t, j, i)`.
    pub drift: Vec<f64>,
    /// `sigma[k][i] = x_i h_k(i, a, t)`, one column per observation channel.
    pub diffusion: Vec<Vec<f64>>,
    /// `<f(., a, t), x>`.
    pub reward: f64,
}

pub fn local_coefficients(model: &ControlModel, t: f64, x: &[f64], a: usize) -> LocalCoefficients {
    let n = model.n_states();
    let knot = model.knot_at(t);
    let q = model.generator(a, knot);
    let drift = (0..n)
        .map(|i| (0..n).map(|j| x[j] * q[j * n + i]).sum())
        .collect();
    let diffusion = (0..model.d_obs())
        .map(|k| {
            (0..n)
                .map(|i| x[i] * model.obs_drift(i, a, knot)[k])
                .collect()
        })
        .collect();
    let reward = (0..n)
        .map(|i| x[i] * model.running_reward(i, a, knot))
        .sum();
    LocalCoefficients {
        drift,
        diffusion,
        reward,
    }
}

/// `1/2 sum_k sigma_k^T H sigma_k + <b, grad> + <f, x>` for control `a`;
/// `hess` is `N x N` row-major.
pub fn bracket_for(
    model: &ControlModel,
    t: f64,
    x: &[f64],
    grad: &[f64],
    hess: &[f64],
    a: usize,
) -> f64 {
    let n = model.n_states();
    let c = local_coefficients(model, t, x, a);
    let second: f64 = c
        .diffusion
        .iter()
        .map(|s| {
            (0..n)
                .map(|i| (0..n).map(|j| s[i] * hess[i * n + j] * s[j]).sum::<f64>())
                .sum::<f64>()
        })
        .sum();
    let first: f64 = c.drift.iter().zip(grad).map(|(b, p)| b * p).sum();
    0.5 * second + first + c.reward
}

/// Supremum of the bracket over controls and the first maximizing index.
pub fn hamiltonian_bracket(
    model: &ControlModel,
    t: f64,
    x: &[f64],
    grad: &[f64],
    hess: &[f64],
) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for a in 0..model.n_controls() {
        let v = bracket_for(model, t, x, grad, hess, a);
        if v > best.0 {
            best = (v, a);
        }
    }
    best
}
