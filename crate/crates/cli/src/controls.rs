//! Turning control specs into control sources, and the policy file format.

use std::path::Path;

use wonham_control::hjb::{
    extract_policy, min_steps, solve_elliptic, solve_parabolic, FeedbackPolicy, SpatialGrid,
    ValueGrid,
};
use wonham_control::{ControlModel, ControlPath, ControlSource, TimeGrid};

use crate::config::{ControlSpec, HjbMode, Loaded};
use crate::error::CliError;
use crate::output::io;

/// An owned control, borrowed as a [`ControlSource`] while simulating.
#[derive(Debug, Clone)]
pub enum Resolved {
    Constant(usize),
    OpenLoop(ControlPath),
    Policy(Box<FeedbackPolicy>),
}

impl Resolved {
    pub fn source(&self) -> ControlSource<'_> {
        match self {
            Resolved::Constant(a) => ControlSource::Constant(*a),
            Resolved::OpenLoop(p) => ControlSource::OpenLoop(p),
            Resolved::Policy(p) => ControlSource::Feedback(p.as_ref()),
        }
    }
}

/// Resolves specs against one config, solving the HJB policy at most once.
pub struct Resolver<'a> {
    loaded: &'a Loaded,
    solved: Option<ValueGrid>,
}

impl<'a> Resolver<'a> {
    pub fn new(loaded: &'a Loaded) -> Self {
        Self {
            loaded,
            solved: None,
        }
    }

    /// The value grid of the `hjb` block, solved on first use.
    pub fn values(&mut self) -> Result<&ValueGrid, CliError> {
        if self.solved.is_none() {
            self.solved = Some(solve_hjb(self.loaded)?);
        }
        Ok(self.solved.as_ref().unwrap())
    }

    pub fn resolve(
        &mut self,
        field: &str,
        spec: &ControlSpec,
        grid: TimeGrid,
    ) -> Result<Resolved, CliError> {
        let model = &self.loaded.model;
        let index = |label: &str| {
            model.control_index(label).ok_or_else(|| {
                self.loaded
                    .error(field, format!("unknown control label `{label}`"))
            })
        };
        Ok(match spec {
            ControlSpec::Constant(l) => Resolved::Constant(index(l)?),
            ControlSpec::OpenLoop(table) => {
                let pieces = table
                    .iter()
                    .map(|(t, l)| Ok((*t, index(l)?)))
                    .collect::<Result<Vec<_>, CliError>>()?;
                let slack = 1e-12 * grid.horizon().max(1.0);
                let cells = (0..grid.n_steps())
                    .map(|k| {
                        let t = grid.time(k);
                        pieces
                            .iter()
                            .rev()
                            .find(|(from, _)| *from <= t + slack)
                            .map_or(pieces[0].1, |p| p.1)
                    })
                    .collect();
                Resolved::OpenLoop(ControlPath::new(grid, cells)?)
            }
            ControlSpec::PolicyFile(p) => {
                Resolved::Policy(Box::new(read_policy(&self.loaded.resolve(p), model)?))
            }
            ControlSpec::HjbPolicy => Resolved::Policy(Box::new(extract_policy(self.values()?))),
        })
    }
}

/// Solves the HJB equation configured in the `hjb` block.
pub fn solve_hjb(loaded: &Loaded) -> Result<ValueGrid, CliError> {
    let h = loaded
        .config
        .hjb
        .as_ref()
        .ok_or_else(|| loaded.error("hjb", "this command needs an `hjb` block"))?;
    let model = &loaded.model;
    let grid =
        SpatialGrid::new(model.n_states(), h.side, h.dx).map_err(|e| loaded.error("hjb.dx", e))?;
    Ok(match h.mode {
        HjbMode::Parabolic => {
            let horizon = model.final_time().expect("checked at load");
            let n_steps = match (h.dt, h.n_time_steps) {
                (Some(dt), _) => TimeGrid::new(horizon, dt)
                    .map_err(|e| loaded.error("hjb.dt", e))?
                    .n_steps(),
                (None, Some(n)) => n,
                (None, None) => min_steps(model, &grid, horizon),
            };
            solve_parabolic(model, &grid, n_steps)?
        }
        HjbMode::Elliptic => solve_elliptic(
            model,
            &grid,
            h.tolerance.unwrap_or(1e-6),
            h.max_iter.unwrap_or(1_000_000),
        )?,
    })
}

/// Reads a policy dump with columns `[t,] x_1..x_N, control`.
///
/// The spatial grid is recovered from the node coordinates and the time grid
/// from the model horizon and the number of distinct `t` values.
pub fn read_policy(path: &Path, model: &ControlModel) -> Result<FeedbackPolicy, CliError> {
    let bad = |msg: String| CliError::config(format!("{}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| io(path, e))?;
    let headers = reader.headers().map_err(|e| io(path, e))?.clone();
    let n = model.n_states();
    let timed = headers.get(0) == Some("t");
    let offset = usize::from(timed);
    if headers.len() != offset + n + 1 || headers.get(offset + n) != Some("control") {
        return Err(bad(format!("expected columns [t,] x_1..x_{n}, control")));
    }

    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| io(path, e))?;
        let parse = |i: usize| {
            record[i]
                .parse::<f64>()
                .map_err(|e| bad(format!("row {}: column {}: {e}", line + 1, i + 1)))
        };
        let t = if timed { parse(0)? } else { 0.0 };
        let x = (offset..offset + n)
            .map(parse)
            .collect::<Result<Vec<_>, _>>()?;
        let label = &record[offset + n];
        let a = model
            .control_index(label)
            .ok_or_else(|| bad(format!("row {}: unknown control `{label}`", line + 1)))?;
        rows.push((t, x, a as u32));
    }
    if rows.is_empty() {
        return Err(bad("no rows".into()));
    }

    let side = rows
        .iter()
        .flat_map(|r| r.1.iter().copied())
        .fold(0.0, f64::max);
    let dx = rows
        .iter()
        .map(|r| r.1[0])
        .filter(|&v| v > 0.0)
        .fold(f64::INFINITY, f64::min);
    let n_cells = (side / dx).round();
    let grid = SpatialGrid::new(n, n_cells * dx, dx).map_err(|e| bad(e.to_string()))?;

    let mut layers: Vec<Vec<u32>> = Vec::new();
    let mut stamps: Vec<f64> = Vec::new();
    for (t, x, a) in &rows {
        if stamps.last() != Some(t) {
            stamps.push(*t);
            layers.push(vec![u32::MAX; grid.n_nodes()]);
        }
        let node = grid.nearest_node(x);
        layers.last_mut().unwrap()[node] = *a;
    }
    if layers.iter().any(|l| l.contains(&u32::MAX)) {
        return Err(bad("some grid nodes have no control".into()));
    }
    let times = if timed {
        let horizon = model
            .final_time()
            .ok_or_else(|| bad("a timed policy needs a finite-horizon model".into()))?;
        let times = TimeGrid::with_steps(horizon, layers.len())?;
        for (k, t) in stamps.iter().enumerate() {
            if (t - times.time(k)).abs() > 1e-9 * horizon {
                return Err(bad(format!(
                    "layer {k} is at t = {t}, expected {}",
                    times.time(k)
                )));
            }
        }
        Some(times)
    } else {
        None
    };
    Ok(FeedbackPolicy::from_layers(grid, times, layers)?)
}
