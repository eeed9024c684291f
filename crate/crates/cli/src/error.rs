use serde_json::{json, Value};
use thiserror::Error;
use wonham_control::filter::FilterError;
use wonham_control::hjb::HjbError;
use wonham_control::measure::MeasureError;
use wonham_control::smp::SmpError;

/// Process exit statuses.
pub mod exit {
    pub const OK: u8 = 0;
    pub const IO: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const NUMERICAL: u8 = 3;
    pub const ACCEPTANCE: u8 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid or inconsistent input; the message carries `file:line:` when known.
    #[error("{0}")]
    Config(String),

    /// A numerical guard tripped; `report` is written next to the artifacts.
    #[error("{message}")]
    Numerical { message: String, report: Value },

    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Numerical { .. } => exit::NUMERICAL,
            CliError::Io(_) => exit::IO,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    fn numerical(kind: &str, message: String, mut fields: Value) -> Self {
        fields["error"] = json!(kind);
        fields["message"] = json!(message);
        CliError::Numerical {
            message,
            report: fields,
        }
    }
}

impl From<HjbError> for CliError {
    fn from(e: HjbError) -> Self {
        let message = e.to_string();
        match e {
            HjbError::CflViolation { dt, max_dt } => CliError::numerical(
                "cfl_violation",
                message,
                json!({"dt": dt, "max_dt": max_dt}),
            ),
            HjbError::NoConvergence {
                iterations,
                residuals,
            } => CliError::numerical(
                "no_convergence",
                message,
                json!({"iterations": iterations, "residuals": residuals}),
            ),
            HjbError::Filter(f) => f.into(),
            HjbError::Measure(m) => m.into(),
            _ => CliError::Config(message),
        }
    }
}

impl From<FilterError> for CliError {
    fn from(e: FilterError) -> Self {
        let message = e.to_string();
        match e {
            FilterError::StepTooLarge {
                dt,
                product,
                max_dt,
            } => CliError::numerical(
                "step_too_large",
                message,
                json!({"dt": dt, "product": product, "max_dt": max_dt}),
            ),
            FilterError::NonFiniteState { step } => {
                CliError::numerical("non_finite_state", message, json!({"step": step}))
            }
            _ => CliError::Config(message),
        }
    }
}

impl From<MeasureError> for CliError {
    fn from(e: MeasureError) -> Self {
        match e {
            MeasureError::Filter(f) => f.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<SmpError> for CliError {
    fn from(e: SmpError) -> Self {
        let message = e.to_string();
        match e {
            SmpError::RegressionRankDeficient { step, rank, basis } => CliError::numerical(
                "rank_deficient",
                message,
                json!({"step": step, "rank": rank, "basis": basis}),
            ),
            SmpError::BatchTooSmall { n_samples, basis } => CliError::numerical(
                "batch_too_small",
                message,
                json!({"n_samples": n_samples, "basis": basis}),
            ),
            SmpError::Filter(f) => f.into(),
            SmpError::InconsistentBatch(_) => CliError::Config(message),
        }
    }
}

impl From<wonham_control::chain::ChainError> for CliError {
    fn from(e: wonham_control::chain::ChainError) -> Self {
        FilterError::from(e).into()
    }
}

impl From<wonham_control::grid::GridError> for CliError {
    fn from(e: wonham_control::grid::GridError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<wonham_control::control::ControlError> for CliError {
    fn from(e: wonham_control::control::ControlError) -> Self {
        CliError::Config(e.to_string())
    }
}
