use super::grid::SpatialGrid;
use super::solver::ValueGrid;
use super::HjbError;
use crate::control::FeedbackLaw;
use crate::grid::TimeGrid;

/// Nodewise maximizers of a solve, looked up at the node nearest to the
/// normalized filter `pi = rho / |rho|_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackPolicy {
    grid: SpatialGrid,
    times: Option<TimeGrid>,
    layers: Vec<Vec<u32>>,
}

pub fn extract_policy(values: &ValueGrid) -> FeedbackPolicy {
    FeedbackPolicy {
        grid: values.grid().clone(),
        times: values.times().copied(),
        layers: values.argmax_layers().to_vec(),
    }
}

impl FeedbackPolicy {
    /// Policy from stored control layers, one per time cell of `times`
    /// (a single layer when `times` is `None`).
    pub fn from_layers(
        grid: SpatialGrid,
        times: Option<TimeGrid>,
        layers: Vec<Vec<u32>>,
    ) -> Result<Self, HjbError> {
        let expected = times.map_or(1, |g| g.n_steps());
        if layers.len() != expected {
            return Err(HjbError::InvalidGrid(format!(
                "{} control layers for {expected} time cells",
                layers.len()
            )));
        }
        if let Some(bad) = layers.iter().find(|l| l.len() != grid.n_nodes()) {
            return Err(HjbError::InvalidGrid(format!(
                "control layer has {} nodes, grid has {}",
                bad.len(),
                grid.n_nodes()
            )));
        }
        Ok(Self {
            grid,
            times,
            layers,
        })
    }

    pub fn times(&self) -> Option<&TimeGrid> {
        self.times.as_ref()
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_of(&self, t: f64) -> usize {
        match &self.times {
            Some(g) => g.cell_of(t).min(self.layers.len() - 1),
            None => 0,
        }
    }

    /// Control at grid node `node` of layer `n`.
    pub fn at_node(&self, n: usize, node: usize) -> usize {
        self.layers[n][node] as usize
    }

    /// Control for the normalized state `pi` at time `t`.
    pub fn at_simplex(&self, t: f64, pi: &[f64]) -> usize {
        self.at_node(self.layer_of(t), self.grid.nearest_node(pi))
    }
}

impl FeedbackLaw for FeedbackPolicy {
    fn control(&self, t: f64, rho: &[f64]) -> usize {
        let mass: f64 = rho.iter().sum();
        if !(mass > 0.0) || !mass.is_finite() {
            return self.at_node(self.layer_of(t), 0);
        }
        let pi: Vec<f64> = rho.iter().map(|r| r / mass).collect();
        self.at_simplex(t, &pi)
    }
}
