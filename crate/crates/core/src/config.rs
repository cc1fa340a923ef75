//! JSON run configuration shared by every CLI command.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::EvalConfig;
use crate::features::{BasisKind, FeatureBasis};
use crate::learner::{InitialState, LearningSchedule, TrainConfig};
use crate::lyapunov::LyapunovConfig;
use crate::model::{GameParams, ParamError};
use crate::policy::{validate_c0, BehaviorError, PolicyPair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorSection {
    #[serde(rename = "C0")]
    pub c0: f64,
}

impl Default for BehaviorSection {
    fn default() -> Self {
        BehaviorSection { c0: 0.6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSection {
    pub kind: String,
    #[serde(default = "one")]
    pub epsilon_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for BasisSection {
    fn default() -> Self {
        BasisSection { kind: "amq2".into(), epsilon_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: u64,
    pub eta0: f64,
    pub tau: f64,
    pub seed: u64,
    pub log_every: u64,
    pub initial_state: InitialState,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 20_000,
            eta0: 2e-3,
            tau: 1e4,
            seed: 0,
            log_every: 100,
            initial_state: InitialState::Random,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub cap: u32,
    pub tol: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection { cap: 15, tol: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LyapunovSection {
    pub nu_grid: Vec<f64>,
    #[serde(rename = "box")]
    pub box_cap: u32,
    pub shell: u64,
}

impl Default for LyapunovSection {
    fn default() -> Self {
        LyapunovSection { nu_grid: vec![0.05, 0.1, 0.2, 0.5], box_cap: 30, shell: 12 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub game: GameParams,
    #[serde(default)]
    pub behavior: BehaviorSection,
    #[serde(default)]
    pub basis: BasisSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub lyapunov: LyapunovSection,
}

/// Malformed input: unreadable, unparsable or structurally unusable.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{0}")]
    Structure(String),
}

/// A well-formed config whose values break a model constraint.
#[derive(Debug, Error)]
pub enum ValidationError {
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Behavior(#[from] BehaviorError),
    #[error("{field}: {message}")]
    Value { field: &'static str, message: String },
}

impl ValidationError {
    pub fn field(&self) -> &'static str {
        match self {
            ValidationError::Params(e) => e.field(),
            ValidationError::Behavior(_) => "behavior.C0",
            ValidationError::Value { field, .. } => field,
        }
    }
}

fn value(field: &'static str, message: impl Into<String>) -> ValidationError {
    ValidationError::Value { field, message: message.into() }
}

impl RunConfig {
    pub fn three_server_default() -> Self {
        RunConfig {
            game: GameParams::three_server(),
            behavior: BehaviorSection::default(),
            basis: BasisSection::default(),
            train: TrainSection::default(),
            oracle: OracleSection::default(),
            eval: EvalConfig::default(),
            lyapunov: LyapunovSection::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.check_structure()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, Vec<u8>), ConfigError> {
        let bytes =
            std::fs::read(path).map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        let text = String::from_utf8_lossy(&bytes);
        Ok((Self::from_json(&text)?, bytes))
    }

    fn check_structure(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Structure(m.to_string()));
        if BasisKind::parse(&self.basis.kind).is_none() || self.basis.kind == "custom" {
            return bad("basis.kind must be \"amq1\" or \"amq2\"");
        }
        if self.lyapunov.nu_grid.is_empty() {
            return bad("lyapunov.nu_grid is empty");
        }
        if self.eval.seeds.is_empty() {
            return bad("eval.seeds is empty");
        }
        Ok(())
    }

    /// Every model constraint; the first failure is returned.
    pub fn validate(&self) -> Result<(), ValidationError> {
        self.game.validate()?;
        validate_c0(&self.game, self.behavior.c0)?;
        if !(self.basis.epsilon_scale > 0.0 && self.basis.epsilon_scale.is_finite()) {
            return Err(value("basis.epsilon_scale", "must be positive"));
        }
        let t = &self.train;
        if t.epochs == 0 {
            return Err(value("train.epochs", "must be at least 1"));
        }
        if !(t.eta0 > 0.0 && t.eta0.is_finite()) {
            return Err(value("train.eta0", "must be positive"));
        }
        if !(t.tau > 0.0 && t.tau.is_finite()) {
            return Err(value("train.tau", "must be positive"));
        }
        if t.log_every == 0 {
            return Err(value("train.log_every", "must be at least 1"));
        }
        if let InitialState::Fixed(x) = &t.initial_state {
            if x.servers() != self.game.servers() {
                return Err(value("train.initial_state", "server count differs from game.mu"));
            }
        }
        if self.oracle.tol.is_nan() || self.oracle.tol <= 0.0 {
            return Err(value("oracle.tol", "must be positive"));
        }
        let e = &self.eval;
        if e.n_states == 0 || e.horizon == 0 || e.reps == 0 {
            return Err(value("eval", "n_states, horizon and reps must be at least 1"));
        }
        if !(0.0..=1.0).contains(&e.consistency_tol) {
            return Err(value("eval.consistency_tol", "must lie in [0, 1]"));
        }
        let l = &self.lyapunov;
        if l.nu_grid.iter().any(|&nu| !(nu > 0.0 && nu.is_finite())) {
            return Err(value("lyapunov.nu_grid", "every nu must be positive"));
        }
        if l.shell > u64::from(l.box_cap) * self.game.servers() as u64 {
            return Err(value("lyapunov.shell", "lies outside the box"));
        }
        Ok(())
    }

    pub fn basis(&self) -> FeatureBasis {
        let kind = BasisKind::parse(&self.basis.kind).expect("checked when parsed");
        FeatureBasis::of_kind(kind, self.game.servers()).expect("amq basis").with_epsilon(self.basis.epsilon_scale)
    }

    pub fn behavior_pair(&self) -> PolicyPair {
        PolicyPair::behavior(self.behavior.c0)
    }

    pub fn schedule(&self) -> LearningSchedule {
        LearningSchedule::new(self.train.eta0, self.train.tau)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            seed: self.train.seed,
            log_every: self.train.log_every,
            initial_weights: None,
            initial_state: self.train.initial_state.clone(),
        }
    }

    pub fn lyapunov_config(&self, nu: f64) -> LyapunovConfig {
        LyapunovConfig { nu, box_cap: self.lyapunov.box_cap, shell: self.lyapunov.shell }
    }
}
