//! The experiment config file and its validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wonham_control::{validate_model, ControlModel, ModelDocument, ModelError, Scheme};

use crate::error::CliError;

/// Model given by file path (relative to the config file) or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSource {
    Path(String),
    Inline(Box<ModelDocument>),
}

/// How controls are chosen along a path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlSpec {
    /// One control label for the whole horizon.
    Constant(String),
    /// `[[t_from, label], ..]`; each label holds from its time until the next entry.
    OpenLoop(Vec<(f64, String)>),
    /// Feedback policy read from a `policy.csv` written by `solve-hjb`.
    PolicyFile(String),
    /// Feedback policy solved in-process from the `hjb` block.
    HjbPolicy,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Observation {
    /// Chain and observation co-simulated under the physical measure.
    #[default]
    Physical,
    /// Brownian observation, as under the reference measure.
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HjbMode {
    Parabolic,
    Elliptic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_paths: usize,
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    pub control: ControlSpec,
    /// Initial law weights; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<f64>>,
    #[serde(default)]
    pub scheme: Scheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub n_chains: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    #[serde(default)]
    pub scheme: Scheme,
    pub x0: Vec<f64>,
    #[serde(default = "one")]
    pub n_paths: usize,
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    pub control: ControlSpec,
    #[serde(default)]
    pub observation: Observation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HjbConfig {
    #[serde(rename = "L")]
    pub side: f64,
    pub dx: f64,
    pub mode: HjbMode,
    /// Parabolic time steps; the smallest admissible count when neither this nor `dt` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_time_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    /// Elliptic stopping tolerance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    /// Write every `layer_stride`-th value layer (the policy dump keeps all).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_stride: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChallengerConfig {
    pub label: String,
    pub control: ControlSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub x0: Vec<f64>,
    pub n_paths: usize,
    pub dt: f64,
    /// Simulation horizon; for discounted models the truncation time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default)]
    pub scheme_budget: f64,
    #[serde(default = "three")]
    pub z: f64,
    #[serde(default)]
    pub challengers: Vec<ChallengerConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmpConfig {
    pub x0: Vec<f64>,
    pub n_samples: usize,
    pub dt: f64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default = "two")]
    pub basis_degree: u32,
    #[serde(default = "default_rcond")]
    pub rcond: f64,
    pub tolerance: f64,
    #[serde(default = "default_level")]
    pub level: f64,
    pub control: ControlSpec,
}

/// One experiment: a model and the blocks of the commands to run on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hjb: Option<HjbConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smp: Option<SmpConfig>,
}

fn one() -> usize {
    1
}
fn two() -> u32 {
    2
}
fn three() -> f64 {
    3.0
}
fn default_rcond() -> f64 {
    1e-10
}
fn default_level() -> f64 {
    0.05
}

/// A loaded config with its source text for error locations.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub path: PathBuf,
    text: String,
    pub model: ControlModel,
    pub document: ModelDocument,
}

impl Loaded {
    /// Reads and validates the config at `path` and the model it names.
    pub fn read(path: &Path, seed: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| json_error(path, &e))?;
        if let Some(s) = seed {
            config.seed = s;
        }
        let (document, model_text, model_path) = match &config.model {
            ModelSource::Inline(doc) => ((**doc).clone(), text.clone(), path.to_path_buf()),
            ModelSource::Path(p) => {
                let full = resolve(path, p);
                let t = std::fs::read_to_string(&full)
                    .map_err(|e| CliError::config(format!("{}: {e}", full.display())))?;
                let doc = serde_json::from_str(&t).map_err(|e| json_error(&full, &e))?;
                (doc, t, full)
            }
        };
        let model =
            validate_model(&document).map_err(|e| model_error(&model_path, &model_text, &e))?;
        let loaded = Self {
            config,
            path: path.to_path_buf(),
            text,
            model,
            document,
        };
        loaded.check()?;
        Ok(loaded)
    }

    /// `path:line: field: message`, with the line of `field` in the config text.
    pub fn error(&self, field: &str, message: impl std::fmt::Display) -> CliError {
        let line = locate(&self.text, field);
        CliError::config(format!(
            "{}:{line}: {field}: {message}",
            self.path.display()
        ))
    }

    /// Path relative to the config file's directory.
    pub fn resolve(&self, p: &str) -> PathBuf {
        resolve(&self.path, p)
    }

    /// The config as embedded in artifacts: model inline, effective seed, no output path.
    pub fn replay(&self) -> ExperimentConfig {
        let mut c = self.config.clone();
        c.model = ModelSource::Inline(Box::new(self.document.clone()));
        c.output = None;
        c
    }

    /// Horizon for a simulation block: the declared one, else the model's.
    pub fn horizon(&self, block: &str, declared: Option<f64>) -> Result<f64, CliError> {
        match (declared, self.model.final_time()) {
            (Some(h), _) => Ok(h),
            (None, Some(t)) => Ok(t),
            (None, None) => Err(self.error(
                &format!("{block}.horizon"),
                "required for a discounted model",
            )),
        }
    }

    fn check(&self) -> Result<(), CliError> {
        let n = self.model.n_states();
        let c = &self.config;
        if let Some(s) = &c.simulate {
            self.positive("simulate.n_paths", s.n_paths as f64)?;
            self.positive("simulate.dt", s.dt)?;
            self.positive_opt("simulate.horizon", s.horizon)?;
            if let Some(w) = &s.initial {
                self.weights("simulate.initial", w, n, false)?;
            }
            self.control("simulate.control", &s.control)?;
        }
        if let Some(f) = &c.filter {
            self.weights("filter.x0", &f.x0, n, true)?;
            self.positive("filter.n_paths", f.n_paths as f64)?;
            self.positive("filter.dt", f.dt)?;
            self.positive_opt("filter.horizon", f.horizon)?;
            self.control("filter.control", &f.control)?;
            if let Some(o) = &f.oracle {
                self.positive("filter.oracle.n_chains", o.n_chains as f64)?;
                if matches!(
                    f.control,
                    ControlSpec::PolicyFile(_) | ControlSpec::HjbPolicy
                ) {
                    return Err(
                        self.error("filter.oracle", "the oracle needs an open-loop control")
                    );
                }
            }
        }
        if let Some(h) = &c.hjb {
            self.positive("hjb.L", h.side)?;
            self.positive("hjb.dx", h.dx)?;
            self.positive_opt("hjb.dt", h.dt)?;
            self.positive_opt("hjb.tolerance", h.tolerance)?;
            if let Some(s) = h.n_time_steps {
                self.positive("hjb.n_time_steps", s as f64)?;
            }
            if let Some(s) = h.layer_stride {
                self.positive("hjb.layer_stride", s as f64)?;
            }
            match (h.mode, self.model.final_time()) {
                (HjbMode::Parabolic, None) => {
                    return Err(self.error("hjb.mode", "parabolic mode needs a finite horizon"))
                }
                (HjbMode::Elliptic, Some(_)) => {
                    return Err(self.error("hjb.mode", "elliptic mode needs a discount rate"))
                }
                _ => {}
            }
            if h.dt.is_some() && h.n_time_steps.is_some() {
                return Err(self.error("hjb.dt", "give at most one of `dt` and `n_time_steps`"));
            }
        }
        if let Some(v) = &c.verify {
            self.weights("verify.x0", &v.x0, n, true)?;
            self.positive("verify.n_paths", v.n_paths as f64)?;
            self.positive("verify.dt", v.dt)?;
            self.positive_opt("verify.horizon", v.horizon)?;
            self.positive("verify.z", v.z)?;
            if !(v.scheme_budget >= 0.0) {
                return Err(self.error("verify.scheme_budget", "must be non-negative"));
            }
            for ch in &v.challengers {
                self.control("verify.challengers", &ch.control)?;
            }
        }
        if let Some(s) = &c.smp {
            self.weights("smp.x0", &s.x0, n, true)?;
            self.positive("smp.n_samples", s.n_samples as f64)?;
            self.positive("smp.dt", s.dt)?;
            self.positive("smp.rcond", s.rcond)?;
            if !(s.tolerance >= 0.0) {
                return Err(self.error("smp.tolerance", "must be non-negative"));
            }
            if !(0.0..=1.0).contains(&s.level) {
                return Err(self.error("smp.level", "must lie in [0, 1]"));
            }
            if self.model.final_time().is_none() {
                return Err(self.error("smp", "the adjoint solver needs a finite horizon"));
            }
            self.control("smp.control", &s.control)?;
        }
        Ok(())
    }

    fn positive(&self, field: &str, v: f64) -> Result<(), CliError> {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(self.error(field, format!("must be positive and finite, got {v}")))
        }
    }

    fn positive_opt(&self, field: &str, v: Option<f64>) -> Result<(), CliError> {
        v.map_or(Ok(()), |v| self.positive(field, v))
    }

    fn weights(&self, field: &str, w: &[f64], n: usize, allow_zero: bool) -> Result<(), CliError> {
        if w.len() != n {
            return Err(self.error(
                field,
                format!("has {} entries, the model has {n} states", w.len()),
            ));
        }
        if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(self.error(field, "entries must be finite and non-negative"));
        }
        if !allow_zero && w.iter().sum::<f64>() <= 0.0 {
            return Err(self.error(field, "weights must not all vanish"));
        }
        Ok(())
    }

    fn control(&self, field: &str, spec: &ControlSpec) -> Result<(), CliError> {
        let known = |label: &str| {
            self.model
                .control_index(label)
                .map(|_| ())
                .ok_or_else(|| self.error(field, format!("unknown control label `{label}`")))
        };
        match spec {
            ControlSpec::Constant(l) => known(l),
            ControlSpec::OpenLoop(table) => {
                if table.first().map(|(t, _)| *t) != Some(0.0) {
                    return Err(self.error(field, "the open-loop table must start at time 0"));
                }
                if table.windows(2).any(|w| !(w[1].0 > w[0].0)) {
                    return Err(self.error(field, "open-loop times must increase"));
                }
                table.iter().try_for_each(|(_, l)| known(l))
            }
            ControlSpec::PolicyFile(p) => {
                if self.resolve(p).is_file() {
                    Ok(())
                } else {
                    Err(self.error(field, format!("policy file `{p}` does not exist")))
                }
            }
            ControlSpec::HjbPolicy => {
                if self.config.hjb.is_some() {
                    Ok(())
                } else {
                    Err(self.error(field, "`hjb_policy` needs an `hjb` block"))
                }
            }
        }
    }
}

fn resolve(config: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn json_error(path: &Path, e: &serde_json::Error) -> CliError {
    let full = e.to_string();
    let msg = full.split(" at line ").next().unwrap_or(&full);
    CliError::config(format!(
        "{}:{}:{}: {msg}",
        path.display(),
        e.line(),
        e.column()
    ))
}

fn model_error(path: &Path, text: &str, e: &ModelError) -> CliError {
    let key = match e {
        ModelError::ShapeMismatch { table, .. } => table.to_string(),
        ModelError::BoundViolation { entry, .. } | ModelError::NegativeRate { entry, .. } => {
            entry.split('[').next().unwrap_or("q").to_string()
        }
        ModelError::IntensityTooSmall { .. } => "k_intensity".into(),
        ModelError::InconsistentHorizon { .. } => "horizon".into(),
        ModelError::InvalidKnots(_) => "time_knots".into(),
        ModelError::InvalidScalar { name, .. } => name.to_string(),
    };
    let line = locate(text, &key);
    CliError::config(format!("{}:{line}: {e}", path.display()))
}

/// 1-based line of the dotted key `a.b.c` in JSON text: each component is
/// searched after the previous one. Falls back to the deepest match found, or 1.
pub fn locate(text: &str, dotted: &str) -> usize {
    let mut pos = 0;
    for part in dotted.split('.') {
        match text[pos..].find(&format!("\"{part}\"")) {
            Some(i) => pos += i,
            None => break,
        }
    }
    text[..pos].matches('\n').count() + 1
}
