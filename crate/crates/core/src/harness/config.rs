//! Experiment configuration: the cost grid, repetitions, policy selection and
//! learner settings, read from `key = value` files and CLI overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::costmodel::DEFAULT_PENALTY;
use crate::policies::DEFAULT_STATIC_THETA;
use crate::rl::HyperParameters;
use crate::synthgen::parse_kv;
use crate::{Error, Result};

pub const DEFAULT_GRID: [f64; 4] = [0.0, 0.25, 0.75, 1.0];
pub const XI_SWEEP: [f64; 4] = [0.025, 0.1, 0.175, 0.25];
pub const DEFAULT_XI: f64 = 0.1;
pub const DEFAULT_REPETITIONS: usize = 10;
pub const DEFAULT_FIT_FRACTION: f64 = 0.33;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Never,
    FirstPositive,
    Static,
    Threshold,
    OnlineRl,
}

impl PolicyKind {
    /// Canonical order, also the row order within a cost cell.
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Never,
        PolicyKind::FirstPositive,
        PolicyKind::Static,
        PolicyKind::Threshold,
        PolicyKind::OnlineRl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Never => "never",
            PolicyKind::FirstPositive => "first_positive",
            PolicyKind::Static => "static",
            PolicyKind::Threshold => "threshold",
            PolicyKind::OnlineRl => "online_rl",
        }
    }

    /// Whether the policy is re-run per repetition.
    pub fn is_randomized(self) -> bool {
        matches!(self, PolicyKind::Threshold | PolicyKind::OnlineRl)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == s.trim())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown policy `{s}` (expected one of never, first_positive, static, threshold, online_rl)"
                ))
            })
    }
}

/// One `(lambda, kappa, alpha_min)` combination of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCell {
    pub lambda: f64,
    pub kappa: f64,
    pub alpha_min: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub lambda_values: Vec<f64>,
    pub kappa_values: Vec<f64>,
    pub alpha_min_values: Vec<f64>,
    /// Envelope half-widths for empirical thresholding.
    pub xi_values: Vec<f64>,
    pub repetitions: usize,
    pub fit_fraction: f64,
    pub policies: Vec<PolicyKind>,
    pub penalty: f64,
    pub static_theta: f64,
    pub hyper: HyperParameters,
    /// Worker threads; `None` uses every available core.
    pub workers: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            lambda_values: DEFAULT_GRID.to_vec(),
            kappa_values: DEFAULT_GRID.to_vec(),
            alpha_min_values: DEFAULT_GRID.to_vec(),
            xi_values: vec![DEFAULT_XI],
            repetitions: DEFAULT_REPETITIONS,
            fit_fraction: DEFAULT_FIT_FRACTION,
            policies: PolicyKind::ALL.to_vec(),
            penalty: DEFAULT_PENALTY,
            static_theta: DEFAULT_STATIC_THETA,
            hyper: HyperParameters::default(),
            workers: None,
        }
    }
}

/// Every key accepted by [`ExperimentConfig::set`].
pub const CONFIG_KEYS: [&str; 16] = [
    "lambda",
    "kappa",
    "alpha_min",
    "xi",
    "xi_sweep",
    "repetitions",
    "fit_fraction",
    "policies",
    "penalty",
    "static_theta",
    "rl.clip_epsilon",
    "rl.learning_rate",
    "rl.update_epochs",
    "rl.hidden_width",
    "rl.max_grad_norm",
    "workers",
];

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items: Vec<&str> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() {
        return Err(Error::Config(format!("`{key}` needs at least one value")));
    }
    items
        .into_iter()
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{s}`")))
        })
        .collect()
}

fn parse_one<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        config.apply_file(path)?;
        Ok(config)
    }

    /// Applies a `key = value` file on top of the current values.
    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (key, value) in parse_kv(&text)? {
            self.set(&key, &value)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lambda" => self.lambda_values = parse_list(key, value)?,
            "kappa" => self.kappa_values = parse_list(key, value)?,
            "alpha_min" => self.alpha_min_values = parse_list(key, value)?,
            "xi" => self.xi_values = parse_list(key, value)?,
            "xi_sweep" => {
                if parse_one::<bool>(key, value)? {
                    self.xi_values = XI_SWEEP.to_vec();
                }
            }
            "repetitions" => self.repetitions = parse_one(key, value)?,
            "fit_fraction" => self.fit_fraction = parse_one(key, value)?,
            "policies" => {
                let mut policies: Vec<PolicyKind> = parse_list(key, value)?;
                policies.sort();
                policies.dedup();
                self.policies = policies;
            }
            "penalty" => self.penalty = parse_one(key, value)?,
            "static_theta" => self.static_theta = parse_one(key, value)?,
            "rl.clip_epsilon" => self.hyper.clip_epsilon = parse_one(key, value)?,
            "rl.learning_rate" => self.hyper.learning_rate = parse_one(key, value)?,
            "rl.update_epochs" => self.hyper.update_epochs = parse_one(key, value)?,
            "rl.hidden_width" => self.hyper.hidden_width = parse_one(key, value)?,
            "rl.max_grad_norm" => self.hyper.max_grad_norm = parse_one(key, value)?,
            "workers" => {
                let n: usize = parse_one(key, value)?;
                self.workers = (n > 0).then_some(n);
            }
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |name: &str, values: &[f64]| -> Result<()> {
            if values.is_empty() {
                return Err(Error::Config(format!("`{name}` is empty")));
            }
            match values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                Some(v) => Err(Error::Config(format!("`{name}` value {v} outside [0, 1]"))),
                None => Ok(()),
            }
        };
        in_unit("lambda", &self.lambda_values)?;
        in_unit("kappa", &self.kappa_values)?;
        in_unit("alpha_min", &self.alpha_min_values)?;
        in_unit("xi", &self.xi_values)?;
        if self.repetitions == 0 {
            return Err(Error::Config("`repetitions` must be at least 1".into()));
        }
        if !(self.fit_fraction > 0.0 && self.fit_fraction < 1.0) {
            return Err(Error::Config(format!(
                "`fit_fraction` {} outside (0, 1)",
                self.fit_fraction
            )));
        }
        if self.policies.is_empty() {
            return Err(Error::Config("no policies selected".into()));
        }
        if !(self.penalty > 0.0 && self.penalty.is_finite()) {
            return Err(Error::Config(format!("invalid penalty {}", self.penalty)));
        }
        if !(self.static_theta > 0.0 && self.static_theta <= 1.0) {
            return Err(Error::Config(format!(
                "`static_theta` {} outside (0, 1]",
                self.static_theta
            )));
        }
        self.hyper.validate()
    }

    /// Cost cells in canonical order: lambda outermost, alpha_min innermost.
    pub fn cells(&self) -> Vec<CostCell> {
        let mut cells = Vec::new();
        for &lambda in &self.lambda_values {
            for &kappa in &self.kappa_values {
                for &alpha_min in &self.alpha_min_values {
                    cells.push(CostCell {
                        lambda,
                        kappa,
                        alpha_min,
                    });
                }
            }
        }
        cells
    }

    pub fn includes(&self, policy: PolicyKind) -> bool {
        self.policies.contains(&policy)
    }
}
