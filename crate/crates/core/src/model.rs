//! The control problem datum: states, control grid, rate/observation/reward
//! tables and the horizon or discount.
//!
//! A [`ControlModel`] is only ever produced by [`validate_model`], so every
//! downstream module can rely on its invariants:
//!
//! * off-diagonal rates are nonnegative and the diagonal is derived as
//!   `q(a,t,i,i) = -sum_{j != i} q(a,t,i,j)`, so generator rows sum to zero;
//! * every off-diagonal rate, every observation-drift component, every
//!   running reward and every terminal reward is bounded by `k0`;
//! * `N * q(a,t,i,j) <= k_intensity` for the thinning construction;
//! * exactly one of a finite horizon or a discount rate is present, and
//!   discounted models have time-independent coefficients.
//!
//! Coefficients are piecewise constant in time: the value at time `t` is the
//! one attached to the last knot `<= t`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised while validating a model document.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("table `{table}` has the wrong shape: {detail}")]
    ShapeMismatch { table: &'static str, detail: String },

    #[error("{entry} = {value} exceeds the bound K0 = {k0}")]
    BoundViolation { entry: String, value: f64, k0: f64 },

    #[error("negative rate {entry} = {value}")]
    NegativeRate { entry: String, value: f64 },

    #[error("thinning intensity K = {k} is smaller than N * max q = {required}")]
    IntensityTooSmall { k: f64, required: f64 },

    #[error("exactly one of `horizon` and `discount` must be given ({detail})")]
    InconsistentHorizon { detail: String },

    #[error("invalid time knots: {0}")]
    InvalidKnots(String),

    #[error("invalid scalar `{name}` = {value}: {reason}")]
    InvalidScalar {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
}

/// Finite horizon `T` or discount rate `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Horizon {
    Finite(f64),
    Discounted(f64),
}

/// The JSON model document, exactly as it appears on disk.
///
/// Nested arrays are indexed `q[control][knot][i][j]`, `h[i][control][knot][k]`
/// and `f[i][control][knot]`. Array positions correspond to states `1..N`;
/// diagonal entries of `q` are ignored and recomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub n_states: usize,
    pub d_obs: usize,
    pub controls: Vec<String>,
    pub time_knots: Vec<f64>,
    pub q: Vec<Vec<Vec<Vec<f64>>>>,
    pub h: Vec<Vec<Vec<Vec<f64>>>>,
    pub f: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub g: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discount: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_intensity: Option<f64>,
}

impl ModelDocument {
    /// Time-homogeneous document with a single knot at 0.
    ///
    /// `q[a]` is the `N x N` rate matrix of control `a` (diagonal ignored),
    /// `h[a][i]` the `d`-vector drift of state `i`, `f[a][i]` the running reward.
    pub fn homogeneous(
        controls: Vec<String>,
        q: Vec<Vec<Vec<f64>>>,
        h: Vec<Vec<Vec<f64>>>,
        f: Vec<Vec<f64>>,
        g: Vec<f64>,
        horizon: Horizon,
    ) -> Self {
        let n_states = g.len().max(f.first().map_or(0, Vec::len));
        let d_obs = h.first().and_then(|row| row.first()).map_or(1, Vec::len);
        let n_controls = controls.len();
        let h_table = (0..n_states)
            .map(|i| (0..n_controls).map(|a| vec![h[a][i].clone()]).collect())
            .collect();
        let f_table = (0..n_states)
            .map(|i| (0..n_controls).map(|a| vec![f[a][i]]).collect())
            .collect();
        let (horizon, discount) = match horizon {
            Horizon::Finite(t) => (Some(t), None),
            Horizon::Discounted(beta) => (None, Some(beta)),
        };
        Self {
            n_states,
            d_obs,
            controls,
            time_knots: vec![0.0],
            q: q.into_iter().map(|m| vec![m]).collect(),
            h: h_table,
            f: f_table,
            g,
            horizon,
            discount,
            k0: None,
            k_intensity: None,
        }
    }
}

/// A validated control model. Immutable; share it freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlModel {
    n_states: usize,
    d_obs: usize,
    controls: Vec<String>,
    time_knots: Vec<f64>,
    // [control][knot][i][j], diagonal derived
    rates: Vec<f64>,
    // [i][control][knot][k]
    obs_drift: Vec<f64>,
    // [i][control][knot]
    reward: Vec<f64>,
    terminal: Vec<f64>,
    horizon: Horizon,
    k0: f64,
    k_intensity: f64,
}

fn shape_err(table: &'static str, detail: impl Into<String>) -> ModelError {
    ModelError::ShapeMismatch {
        table,
        detail: detail.into(),
    }
}

fn check_len<T>(v: &[T], want: usize, table: &'static str, at: &str) -> Result<(), ModelError> {
    if v.len() != want {
        return Err(shape_err(
            table,
            format!("{at}: expected length {want}, found {}", v.len()),
        ));
    }
    Ok(())
}

/// Validates a model document and derives the generator diagonals.
pub fn validate_model(doc: &ModelDocument) -> Result<ControlModel, ModelError> {
    let n = doc.n_states;
    let d = doc.d_obs;
    let n_controls = doc.controls.len();
    if n < 2 {
        return Err(shape_err("n_states", format!("need N >= 2, got {n}")));
    }
    if d < 1 {
        return Err(shape_err("d_obs", "need d >= 1"));
    }
    if n_controls == 0 {
        return Err(shape_err("controls", "control grid is empty"));
    }

    let horizon = match (doc.horizon, doc.discount) {
        (Some(t), None) => {
            if !(t > 0.0 && t.is_finite()) {
                return Err(ModelError::InvalidScalar {
                    name: "horizon",
                    value: t,
                    reason: "must be positive and finite",
                });
            }
            Horizon::Finite(t)
        }
        (None, Some(beta)) => {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(ModelError::InvalidScalar {
                    name: "discount",
                    value: beta,
                    reason: "must be positive and finite",
                });
            }
            Horizon::Discounted(beta)
        }
        (Some(_), Some(_)) => {
            return Err(ModelError::InconsistentHorizon {
                detail: "both given".into(),
            })
        }
        (None, None) => {
            return Err(ModelError::InconsistentHorizon {
                detail: "neither given".into(),
            })
        }
    };

    let knots = &doc.time_knots;
    if knots.is_empty() || knots[0] != 0.0 {
        return Err(ModelError::InvalidKnots("first knot must be 0".into()));
    }
    if knots.windows(2).any(|w| !(w[1] > w[0])) || knots.iter().any(|k| !k.is_finite()) {
        return Err(ModelError::InvalidKnots(
            "knots must be finite and strictly increasing".into(),
        ));
    }
    match horizon {
        Horizon::Finite(t) if *knots.last().unwrap() >= t => {
            return Err(ModelError::InvalidKnots(format!(
                "last knot {} must lie before the horizon {t}",
                knots.last().unwrap()
            )));
        }
        Horizon::Discounted(_) if knots.len() != 1 => {
            return Err(ModelError::InconsistentHorizon {
                detail: "discounted models need time-independent coefficients (one knot)".into(),
            });
        }
        _ => {}
    }
    let n_knots = knots.len();

    check_len(&doc.q, n_controls, "q", "controls")?;
    for (a, per_knot) in doc.q.iter().enumerate() {
        check_len(per_knot, n_knots, "q", &format!("control {a}"))?;
        for (kn, m) in per_knot.iter().enumerate() {
            check_len(m, n, "q", &format!("control {a}, knot {kn}"))?;
            for (i, row) in m.iter().enumerate() {
                check_len(
                    row,
                    n,
                    "q",
                    &format!("control {a}, knot {kn}, row {}", i + 1),
                )?;
            }
        }
    }
    check_len(&doc.h, n, "h", "states")?;
    for (i, per_control) in doc.h.iter().enumerate() {
        check_len(per_control, n_controls, "h", &format!("state {}", i + 1))?;
        for (a, per_knot) in per_control.iter().enumerate() {
            check_len(
                per_knot,
                n_knots,
                "h",
                &format!("state {}, control {a}", i + 1),
            )?;
            for (kn, v) in per_knot.iter().enumerate() {
                check_len(
                    v,
                    d,
                    "h",
                    &format!("state {}, control {a}, knot {kn}", i + 1),
                )?;
            }
        }
    }
    check_len(&doc.f, n, "f", "states")?;
    for (i, per_control) in doc.f.iter().enumerate() {
        check_len(per_control, n_controls, "f", &format!("state {}", i + 1))?;
        for (a, per_knot) in per_control.iter().enumerate() {
            check_len(
                per_knot,
                n_knots,
                "f",
                &format!("state {}, control {a}", i + 1),
            )?;
        }
    }
    let terminal = if doc.g.is_empty() {
        vec![0.0; n]
    } else {
        check_len(&doc.g, n, "g", "states")?;
        doc.g.clone()
    };

    let mut rates = vec![0.0; n_controls * n_knots * n * n];
    let mut max_rate: f64 = 0.0;
    let mut max_abs: Vec<(String, f64)> = Vec::new();
    for a in 0..n_controls {
        for kn in 0..n_knots {
            let base = (a * n_knots + kn) * n * n;
            for i in 0..n {
                let mut out = 0.0;
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let v = doc.q[a][kn][i][j];
                    let entry = format!("q[{}][knot {kn}][{}][{}]", doc.controls[a], i + 1, j + 1);
                    if !v.is_finite() {
                        return Err(ModelError::InvalidScalar {
                            name: "q",
                            value: v,
                            reason: "rates must be finite",
                        });
                    }
                    if v < 0.0 {
                        return Err(ModelError::NegativeRate { entry, value: v });
                    }
                    rates[base + i * n + j] = v;
                    out += v;
                    max_rate = max_rate.max(v);
                    max_abs.push((entry, v));
                }
                rates[base + i * n + i] = -out;
            }
        }
    }

    let mut obs_drift = Vec::with_capacity(n * n_controls * n_knots * d);
    let mut reward = Vec::with_capacity(n * n_controls * n_knots);
    for i in 0..n {
        for a in 0..n_controls {
            for kn in 0..n_knots {
                for (k, &v) in doc.h[i][a][kn].iter().enumerate() {
                    max_abs.push((
                        format!("h[{}][{}][knot {kn}][{}]", i + 1, doc.controls[a], k + 1),
                        v.abs(),
                    ));
                    obs_drift.push(v);
                }
                let v = doc.f[i][a][kn];
                max_abs.push((
                    format!("f[{}][{}][knot {kn}]", i + 1, doc.controls[a]),
                    v.abs(),
                ));
                reward.push(v);
            }
        }
    }
    for (i, &v) in terminal.iter().enumerate() {
        max_abs.push((format!("g[{}]", i + 1), v.abs()));
    }
    if let Some((_, v)) = max_abs.iter().find(|(_, v)| !v.is_finite()) {
        return Err(ModelError::InvalidScalar {
            name: "table entry",
            value: *v,
            reason: "must be finite",
        });
    }

    let observed_bound = max_abs.iter().map(|(_, v)| *v).fold(0.0, f64::max);
    let k0 = match doc.k0 {
        Some(k0) => {
            if let Some((entry, v)) = max_abs.iter().find(|(_, v)| *v > k0) {
                return Err(ModelError::BoundViolation {
                    entry: entry.clone(),
                    value: *v,
                    k0,
                });
            }
            k0
        }
        None => observed_bound,
    };

    let required = n as f64 * max_rate;
    let k_intensity = match doc.k_intensity {
        Some(k) => {
            if !(k > 0.0) || k < required {
                return Err(ModelError::IntensityTooSmall { k, required });
            }
            k
        }
        None => default_intensity(n, max_rate),
    };

    Ok(ControlModel {
        n_states: n,
        d_obs: d,
        controls: doc.controls.clone(),
        time_knots: knots.clone(),
        rates,
        obs_drift,
        reward,
        terminal,
        horizon,
        k0,
        k_intensity,
    })
}

/// `N * max q` with 10% slack, or 1 when every rate vanishes.
fn default_intensity(n: usize, max_rate: f64) -> f64 {
    let k = 1.1 * n as f64 * max_rate;
    if k > 0.0 {
        k
    } else {
        1.0
    }
}

impl ControlModel {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn d_obs(&self) -> usize {
        self.d_obs
    }

    pub fn n_controls(&self) -> usize {
        self.controls.len()
    }

    pub fn controls(&self) -> &[String] {
        &self.controls
    }

    pub fn control_label(&self, a: usize) -> &str {
        &self.controls[a]
    }

    pub fn control_index(&self, label: &str) -> Option<usize> {
        self.controls.iter().position(|c| c == label)
    }

    pub fn time_knots(&self) -> &[f64] {
        &self.time_knots
    }

    pub fn horizon(&self) -> Horizon {
        self.horizon
    }

    /// The finite horizon `T`, if this is a finite-horizon model.
    pub fn final_time(&self) -> Option<f64> {
        match self.horizon {
            Horizon::Finite(t) => Some(t),
            Horizon::Discounted(_) => None,
        }
    }

    /// The discount rate `beta`, if this is an infinite-horizon model.
    pub fn discount(&self) -> Option<f64> {
        match self.horizon {
            Horizon::Finite(_) => None,
            Horizon::Discounted(beta) => Some(beta),
        }
    }

    pub fn k0(&self) -> f64 {
        self.k0
    }

    pub fn k_intensity(&self) -> f64 {
        self.k_intensity
    }

    /// Index of the knot whose coefficients apply at time `t`.
    #[inline]
    pub fn knot_at(&self, t: f64) -> usize {
        if self.time_knots.len() == 1 {
            return 0;
        }
        match self.time_knots.partition_point(|&k| k <= t) {
            0 => 0,
            p => p - 1,
        }
    }

    /// First knot strictly after `t`, if any.
    #[inline]
    pub fn next_knot_after(&self, t: f64) -> Option<f64> {
        let p = self.time_knots.partition_point(|&k| k <= t);
        self.time_knots.get(p).copied()
    }

    /// The `N x N` generator of control `a` at knot `knot`, row-major.
    #[inline]
    pub fn generator(&self, a: usize, knot: usize) -> &[f64] {
        let n2 = self.n_states * self.n_states;
        let base = (a * self.time_knots.len() + knot) * n2;
        &self.rates[base..base + n2]
    }

    /// `q(a, t, i, j)` including the derived diagonal.
    #[inline]
    pub fn rate(&self, a: usize, knot: usize, i: usize, j: usize) -> f64 {
        self.generator(a, knot)[i * self.n_states + j]
    }

    /// Observation drift `h(i, a, t)` as a `d`-vector.
    #[inline]
    pub fn obs_drift(&self, i: usize, a: usize, knot: usize) -> &[f64] {
        let base = ((i * self.controls.len() + a) * self.time_knots.len() + knot) * self.d_obs;
        &self.obs_drift[base..base + self.d_obs]
    }

    /// Running reward `f(i, a, t)`.
    #[inline]
    pub fn running_reward(&self, i: usize, a: usize, knot: usize) -> f64 {
        self.reward[(i * self.controls.len() + a) * self.time_knots.len() + knot]
    }

    /// Terminal reward `g(i)`.
    #[inline]
    pub fn terminal_reward(&self, i: usize) -> f64 {
        self.terminal[i]
    }

    pub fn terminal_rewards(&self) -> &[f64] {
        &self.terminal
    }

    /// Largest off-diagonal rate over every control and knot.
    pub fn max_rate(&self) -> f64 {
        let n = self.n_states;
        self.rates
            .chunks(n * n)
            .flat_map(|m| {
                (0..n).flat_map(move |i| (0..n).filter(move |&j| j != i).map(move |j| m[i * n + j]))
            })
            .fold(0.0, f64::max)
    }

    /// `sup |f|` over states, controls and knots.
    pub fn sup_running_reward(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `sup |h|` (Euclidean norm per state/control/knot).
    pub fn sup_obs_drift(&self) -> f64 {
        self.obs_drift
            .chunks(self.d_obs)
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Returns the document that validates back to this model.
    pub fn to_document(&self) -> ModelDocument {
        let n = self.n_states;
        let n_controls = self.controls.len();
        let n_knots = self.time_knots.len();
        let q = (0..n_controls)
            .map(|a| {
                (0..n_knots)
                    .map(|kn| {
                        (0..n)
                            .map(|i| {
                                (0..n)
                                    .map(|j| if i == j { 0.0 } else { self.rate(a, kn, i, j) })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let h = (0..n)
            .map(|i| {
                (0..n_controls)
                    .map(|a| {
                        (0..n_knots)
                            .map(|kn| self.obs_drift(i, a, kn).to_vec())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let f = (0..n)
            .map(|i| {
                (0..n_controls)
                    .map(|a| {
                        (0..n_knots)
                            .map(|kn| self.running_reward(i, a, kn))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let (horizon, discount) = match self.horizon {
            Horizon::Finite(t) => (Some(t), None),
            Horizon::Discounted(beta) => (None, Some(beta)),
        };
        ModelDocument {
            n_states: n,
            d_obs: self.d_obs,
            controls: self.controls.clone(),
            time_knots: self.time_knots.clone(),
            q,
            h,
            f,
            g: self.terminal.clone(),
            horizon,
            discount,
            k0: Some(self.k0),
            k_intensity: Some(self.k_intensity),
        }
    }
}

/// Running rewards induced by per-jump costs, `f(i,a,t) = sum_{j != i} ell(i,j,a,t) q(a,t,i,j)`.
///
/// `ell` is indexed `[i][j][control][knot]`. Returns the table indexed
/// `[i][control][knot]` together with a `K0` that also bounds the new rewards.
pub fn reward_from_jump_costs(
    ell: &[Vec<Vec<Vec<f64>>>],
    model: &ControlModel,
) -> Result<(Vec<Vec<Vec<f64>>>, f64), ModelError> {
    let n = model.n_states();
    let n_controls = model.n_controls();
    let n_knots = model.time_knots().len();
    check_len(ell, n, "ell", "states")?;
    for (i, row) in ell.iter().enumerate() {
        check_len(row, n, "ell", &format!("state {}", i + 1))?;
        for (j, per_control) in row.iter().enumerate() {
            check_len(
                per_control,
                n_controls,
                "ell",
                &format!("({}, {})", i + 1, j + 1),
            )?;
            for per_knot in per_control {
                check_len(per_knot, n_knots, "ell", &format!("({}, {})", i + 1, j + 1))?;
                if let Some(v) = per_knot.iter().find(|v| !v.is_finite()) {
                    return Err(ModelError::InvalidScalar {
                        name: "ell",
                        value: *v,
                        reason: "jump costs must be finite",
                    });
                }
            }
        }
    }
    let mut bound = model.k0();
    let table = (0..n)
        .map(|i| {
            (0..n_controls)
                .map(|a| {
                    (0..n_knots)
                        .map(|kn| {
                            let v: f64 = (0..n)
                                .filter(|&j| j != i)
                                .map(|j| ell[i][j][a][kn] * model.rate(a, kn, i, j))
                                .sum();
                            bound = bound.max(v.abs());
                            v
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok((table, bound))
}
