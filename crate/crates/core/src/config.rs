//! Run configuration: a flat `key = value` file whose entries can be
//! overridden one by one.

use std::path::Path;

use thiserror::Error;

use crate::domains::DEMO_E_MAX;
use crate::optimizer::OptimConfig;
use crate::search::{SearchConfig, DEFAULT_WEIGHTS};
use crate::trace::{ErrorSpec, ExecPolicy, ObservationTrace};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {msg}")]
    Value { key: String, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub spec: String,
    /// `None` derives the value from the trace.
    pub d_max: Option<f64>,
    pub e_max: Option<f64>,
    pub e_acc: Option<f64>,
    pub weights: [f64; 3],
    pub lr: f64,
    pub inner_budget: usize,
    pub outer_budget: usize,
    pub best_k: usize,
    pub seed: u64,
    pub workers: usize,
    pub policy: Option<ExecPolicy>,
    pub init_variance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SearchConfig::default();
        Self {
            spec: "continuous".into(),
            d_max: None,
            e_max: None,
            e_acc: None,
            weights: DEFAULT_WEIGHTS,
            lr: s.optim.lr,
            inner_budget: s.optim.budget,
            outer_budget: s.outer_budget,
            best_k: s.best_k,
            seed: s.seed,
            workers: s.workers,
            policy: None,
            init_variance: s.init_variance,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value { key: key.into(), msg: e.to_string() })
}

fn positive(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v: f64 = num(key, value)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(ConfigError::Value { key: key.into(), msg: "must be positive".into() })
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 13] = [
        "spec",
        "d_max",
        "e_max",
        "e_acc",
        "weights",
        "lr",
        "inner_budget",
        "outer_budget",
        "best_k",
        "seed",
        "workers",
        "policy",
        "init_variance",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "spec" => {
                if ErrorSpec::by_name(value, 1.0).is_none() {
                    return Err(ConfigError::Value { key: key.into(), msg: format!("unknown spec `{value}`") });
                }
                self.spec = value.into();
            }
            "d_max" => self.d_max = Some(positive(key, value)?),
            "e_max" => self.e_max = Some(positive(key, value)?),
            "e_acc" => {
                let v: f64 = num(key, value)?;
                if v.is_nan() || v < 0.0 {
                    return Err(ConfigError::Value { key: key.into(), msg: "must be non-negative".into() });
                }
                self.e_acc = Some(v);
            }
            "weights" => {
                let parts: Vec<&str> = value.split([',', ' ']).filter(|s| !s.is_empty()).collect();
                if parts.len() != 3 {
                    return Err(ConfigError::Value { key: key.into(), msg: "expected three numbers".into() });
                }
                for (w, p) in self.weights.iter_mut().zip(parts) {
                    *w = num(key, p)?;
                    if !(*w >= 0.0 && w.is_finite()) {
                        return Err(ConfigError::Value { key: key.into(), msg: "weights must be non-negative".into() });
                    }
                }
            }
            "lr" => self.lr = positive(key, value)?,
            "inner_budget" => self.inner_budget = num(key, value)?,
            "outer_budget" => self.outer_budget = num(key, value)?,
            "best_k" => self.best_k = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "workers" => self.workers = num(key, value)?,
            "policy" => {
                self.policy = match value {
                    "auto" => None,
                    other => Some(other.parse().map_err(|msg| ConfigError::Value { key: key.into(), msg })?),
                }
            }
            "init_variance" => self.init_variance = positive(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    /// Apply every `key = value` line of `text` on top of `self`. Blank
    /// lines and lines starting with `#` are skipped.
    pub fn merge_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.merge_text(&std::fs::read_to_string(path)?)?;
        Ok(c)
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            weights: self.weights,
            outer_budget: self.outer_budget,
            best_k: self.best_k,
            seed: self.seed,
            workers: self.workers,
            optim: OptimConfig { lr: self.lr, budget: self.inner_budget, ..OptimConfig::default() },
            init_variance: self.init_variance,
            policy: self.policy,
        }
    }

    /// The named error spec with overrides applied. Without an explicit
    /// `d_max`, the diagonal of the bounding box of every observed vector
    /// is used. The `demo` spec defaults `e_max` to [`DEMO_E_MAX`].
    pub fn error_spec(&self, trace: &ObservationTrace) -> ErrorSpec {
        let d_max = self.d_max.unwrap_or_else(|| bounding_diagonal(trace));
        let mut spec = ErrorSpec::by_name(&self.spec, d_max).expect("validated on set");
        let e_max = self.e_max.or((self.spec == "demo").then_some(DEMO_E_MAX));
        if let Some(e) = e_max {
            spec = spec.with_e_max(e);
        }
        if let Some(e) = self.e_acc {
            spec = spec.with_e_acc(e);
        }
        spec
    }
}

/// Largest bounding-box diagonal over the vectors of each dimension in
/// `trace` (states and θ), at least 1.
pub fn bounding_diagonal(trace: &ObservationTrace) -> f64 {
    let mut boxes: std::collections::BTreeMap<usize, (Vec<f64>, Vec<f64>)> = Default::default();
    for step in trace.steps() {
        for v in step.state.iter().chain(std::iter::once(&step.theta)) {
            let (lo, hi) = boxes
                .entry(v.len())
                .or_insert_with(|| (vec![f64::INFINITY; v.len()], vec![f64::NEG_INFINITY; v.len()]));
            for (i, &c) in v.iter().enumerate() {
                lo[i] = lo[i].min(c);
                hi[i] = hi[i].max(c);
            }
        }
    }
    boxes
        .values()
        .map(|(lo, hi)| lo.iter().zip(hi).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt())
        .fold(1.0, f64::max)
}
