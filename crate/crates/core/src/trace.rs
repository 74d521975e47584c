//! Observation traces, their schema, and the error specification that
//! decides when an executed action sequence matches an observed one.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
    #[error("missing schema header")]
    MissingHeader,
}

/// Declared variables and actions together with their dimensions.
///
/// Variables are kept in lexicographic order; that order is also the
/// storage order of per-step state vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub vars: BTreeMap<String, usize>,
    pub actions: BTreeMap<String, usize>,
}

impl Schema {
    pub fn new<V, A>(vars: V, actions: A) -> Self
    where
        V: IntoIterator<Item = (String, usize)>,
        A: IntoIterator<Item = (String, usize)>,
    {
        Self {
            vars: vars.into_iter().collect(),
            actions: actions.into_iter().collect(),
        }
    }

    pub fn var_dim(&self, name: &str) -> Option<usize> {
        self.vars.get(name).copied()
    }

    pub fn action_dim(&self, name: &str) -> Option<usize> {
        self.actions.get(name).copied()
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.vars.keys().position(|k| k == name)
    }

    pub fn var_names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    /// Variables with the given dimension, in lexicographic order.
    pub fn vars_of_dim(&self, dim: usize) -> Vec<&str> {
        self.vars
            .iter()
            .filter(|(_, &d)| d == dim)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    /// One action id means one expression explains every step; several
    /// action ids mean an explicit finite sequence.
    pub fn default_policy(&self) -> ExecPolicy {
        if self.actions.len() == 1 {
            ExecPolicy::RepeatBody
        } else {
            ExecPolicy::SinglePass
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.actions.is_empty() {
            return Err("schema declares no actions".into());
        }
        if let Some((k, _)) = self.vars.iter().chain(&self.actions).find(|(_, &d)| d == 0) {
            return Err(format!("`{k}` has dimension 0"));
        }
        Ok(())
    }
}

/// How a program body is replayed against a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecPolicy {
    /// Re-run the body from the top until every observed step is covered.
    RepeatBody,
    /// Run the body exactly once.
    SinglePass,
}

impl std::str::FromStr for ExecPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "repeat" | "repeat-body" => Ok(Self::RepeatBody),
            "single" | "single-pass" => Ok(Self::SinglePass),
            other => Err(format!("unknown exec policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// State vectors in schema variable order.
    pub state: Vec<Vec<f64>>,
    pub action: String,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTrace {
    schema: Schema,
    steps: Vec<Step>,
}

impl ObservationTrace {
    pub fn new(schema: Schema, steps: Vec<Step>) -> Result<Self, TraceError> {
        schema
            .validate()
            .map_err(|msg| TraceError::Invalid { line: 0, msg })?;
        for (t, step) in steps.iter().enumerate() {
            check_step(&schema, step).map_err(|msg| TraceError::Invalid { line: t + 1, msg })?;
        }
        Ok(Self { schema, steps })
    }

    /// Build from per-step named bindings.
    pub fn from_named(
        schema: Schema,
        steps: impl IntoIterator<Item = (BTreeMap<String, Vec<f64>>, String, Vec<f64>)>,
    ) -> Result<Self, TraceError> {
        let mut out = Vec::new();
        for (t, (state, action, theta)) in steps.into_iter().enumerate() {
            if state.len() != schema.vars.len() || !state.keys().eq(schema.vars.keys()) {
                return Err(TraceError::Invalid {
                    line: t + 1,
                    msg: "state does not bind exactly the schema variables".into(),
                });
            }
            out.push(Step {
                state: state.into_values().collect(),
                action,
                theta,
            });
        }
        Self::new(schema, out)
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Value of `var` at 0-based step `t`.
    pub fn value(&self, t: usize, var: &str) -> Option<&[f64]> {
        let i = self.schema.var_index(var)?;
        self.steps.get(t).map(|s| s.state[i].as_slice())
    }

    pub fn value_at(&self, t: usize, var_index: usize) -> &[f64] {
        &self.steps[t].state[var_index]
    }

    /// Observed `(action, theta)` sequence.
    pub fn actions(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.steps.iter().map(|s| (s.action.as_str(), s.theta.as_slice()))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), TraceError> {
        let header = Header {
            schema: self.schema.clone(),
        };
        writeln!(w, "{}", to_json(&header)?)?;
        for (t, step) in self.steps.iter().enumerate() {
            let record = StepRecord {
                t: t + 1,
                state: self
                    .schema
                    .vars
                    .keys()
                    .cloned()
                    .zip(step.state.iter().cloned())
                    .collect(),
                action: step.action.clone(),
                theta: step.theta.clone(),
            };
            writeln!(w, "{}", to_json(&record)?)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, TraceError> {
        let mut schema = None;
        let mut steps = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let Some(schema) = schema.as_ref() else {
                let header: Header = serde_json::from_str(&line)
                    .map_err(|source| TraceError::Json { line: lineno, source })?;
                schema = Some(header.schema);
                continue;
            };
            let rec: StepRecord = serde_json::from_str(&line)
                .map_err(|source| TraceError::Json { line: lineno, source })?;
            if rec.t != steps.len() + 1 {
                return Err(TraceError::Invalid {
                    line: lineno,
                    msg: format!("expected t = {}, found {}", steps.len() + 1, rec.t),
                });
            }
            if !rec.state.keys().eq(schema.vars.keys()) {
                return Err(TraceError::Invalid {
                    line: lineno,
                    msg: "state does not bind exactly the schema variables".into(),
                });
            }
            steps.push(Step {
                state: rec.state.into_values().collect(),
                action: rec.action,
                theta: rec.theta,
            });
        }
        let schema = schema.ok_or(TraceError::MissingHeader)?;
        Self::new(schema, steps)
    }

    pub fn parse(text: &str) -> Result<Self, TraceError> {
        Self::read_from(text.as_bytes())
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String, TraceError> {
    serde_json::to_string(v).map_err(|source| TraceError::Json { line: 0, source })
}

fn check_step(schema: &Schema, step: &Step) -> Result<(), String> {
    if step.state.len() != schema.vars.len() {
        return Err("state does not bind every schema variable".into());
    }
    for ((name, &dim), value) in schema.vars.iter().zip(&step.state) {
        if value.len() != dim {
            return Err(format!("`{name}` has {} components, expected {dim}", value.len()));
        }
    }
    match schema.action_dim(&step.action) {
        None => Err(format!("undeclared action `{}`", step.action)),
        Some(d) if d != step.theta.len() => Err(format!(
            "action `{}` takes {d} parameters, observed {}",
            step.action,
            step.theta.len()
        )),
        Some(_) => Ok(()),
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: Schema,
}

#[derive(Serialize, Deserialize)]
struct StepRecord {
    t: usize,
    state: BTreeMap<String, Vec<f64>>,
    action: String,
    theta: Vec<f64>,
}

/// Per-action error `σ_act(â, θ̂, a, θ)`.
pub trait ActionError: Send + Sync + fmt::Debug {
    fn eval(&self, a_hat: &str, theta_hat: &[f64], a: &str, theta: &[f64]) -> f64;

    /// Gradient with respect to `theta_hat`.
    fn grad(&self, a_hat: &str, theta_hat: &[f64], a: &str, theta: &[f64]) -> Vec<f64>;
}

/// Length error `σ_len(T, T')`.
pub trait LengthError: Send + Sync + fmt::Debug {
    fn eval(&self, observed: usize, executed: usize) -> f64;
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `‖θ̂ − θ‖₂`. Subgradient 0 at the origin.
#[derive(Debug, Clone, Copy, Default)]
pub struct Euclidean;

impl ActionError for Euclidean {
    fn eval(&self, _: &str, theta_hat: &[f64], _: &str, theta: &[f64]) -> f64 {
        distance(theta_hat, theta)
    }
    fn grad(&self, _: &str, theta_hat: &[f64], _: &str, theta: &[f64]) -> Vec<f64> {
        let d = distance(theta_hat, theta);
        if d == 0.0 {
            return vec![0.0; theta_hat.len()];
        }
        theta_hat.iter().zip(theta).map(|(h, o)| (h - o) / d).collect()
    }
}

/// `‖θ̂ − θ‖₂²`, the smooth variant.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredEuclidean;

impl ActionError for SquaredEuclidean {
    fn eval(&self, _: &str, theta_hat: &[f64], _: &str, theta: &[f64]) -> f64 {
        theta_hat.iter().zip(theta).map(|(h, o)| (h - o) * (h - o)).sum()
    }
    fn grad(&self, _: &str, theta_hat: &[f64], _: &str, theta: &[f64]) -> Vec<f64> {
        theta_hat.iter().zip(theta).map(|(h, o)| 2.0 * (h - o)).collect()
    }
}

/// Euclidean distance when the action names agree, `d_max` otherwise.
#[derive(Debug, Clone, Copy)]
pub struct NameMatched {
    pub d_max: f64,
}

impl ActionError for NameMatched {
    fn eval(&self, a_hat: &str, theta_hat: &[f64], a: &str, theta: &[f64]) -> f64 {
        if a_hat == a {
            distance(theta_hat, theta)
        } else {
            self.d_max
        }
    }
    fn grad(&self, a_hat: &str, theta_hat: &[f64], a: &str, theta: &[f64]) -> Vec<f64> {
        if a_hat == a {
            Euclidean.grad(a_hat, theta_hat, a, theta)
        } else {
            vec![0.0; theta_hat.len()]
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoLengthPenalty;

impl LengthError for NoLengthPenalty {
    fn eval(&self, _: usize, _: usize) -> f64 {
        0.0
    }
}

/// `(T' − T)²`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredLength;

impl LengthError for SquaredLength {
    fn eval(&self, observed: usize, executed: usize) -> f64 {
        let d = executed as f64 - observed as f64;
        d * d
    }
}

/// The pair `(σ_act, σ_len)` plus the thresholds that go with it.
#[derive(Debug, Clone)]
pub struct ErrorSpec {
    pub name: String,
    pub act: Arc<dyn ActionError>,
    pub len: Arc<dyn LengthError>,
    /// Per-action abort threshold.
    pub e_max: f64,
    /// Total-loss acceptance threshold.
    pub e_acc: f64,
    pub d_max: f64,
}

impl ErrorSpec {
    /// Euclidean action error, no length penalty. Thresholds are left
    /// unbounded until [`ErrorSpec::calibrated`] fills them in.
    pub fn continuous() -> Self {
        Self {
            name: "continuous".into(),
            act: Arc::new(Euclidean),
            len: Arc::new(NoLengthPenalty),
            e_max: f64::INFINITY,
            e_acc: f64::NAN,
            d_max: f64::NAN,
        }
    }

    /// Squared Euclidean action error, no length penalty.
    pub fn continuous_squared() -> Self {
        Self {
            name: "continuous-sq".into(),
            act: Arc::new(SquaredEuclidean),
            ..Self::continuous()
        }
    }

    /// Name-matched Euclidean error with a squared length penalty.
    pub fn demo(d_max: f64) -> Self {
        Self {
            name: "demo".into(),
            act: Arc::new(NameMatched { d_max }),
            len: Arc::new(SquaredLength),
            e_max: f64::INFINITY,
            e_acc: f64::NAN,
            d_max,
        }
    }

    pub fn by_name(name: &str, d_max: f64) -> Option<Self> {
        match name {
            "continuous" => Some(Self::continuous()),
            "continuous-sq" => Some(Self::continuous_squared()),
            "demo" => Some(Self::demo(d_max)),
            _ => None,
        }
    }

    pub fn with_e_max(mut self, e_max: f64) -> Self {
        self.e_max = e_max;
        self
    }

    pub fn with_e_acc(mut self, e_acc: f64) -> Self {
        self.e_acc = e_acc;
        self
    }

    /// Fill in thresholds that were left unset (`NaN`, or an infinite
    /// `e_max`) with trace-derived defaults:
    ///
    /// * `e_acc = 1e-3 · T`
    /// * `e_max = 10 ×` the mean per-step error of the best constant
    ///   program (one coordinate-wise median θ per parameter dimension,
    ///   replayed with the observed action names).
    pub fn calibrated(mut self, trace: &ObservationTrace) -> Self {
        if self.e_acc.is_nan() {
            self.e_acc = 1e-3 * trace.len() as f64;
        }
        if !self.e_max.is_finite() {
            let per_step = constant_program_error(self.act.as_ref(), trace);
            let floor = if self.e_acc > 0.0 { self.e_acc } else { 1.0 };
            self.e_max = (10.0 * per_step).max(floor);
        }
        self
    }
}

/// Named presets shipped with the crate.
pub fn builtin_specs(d_max: f64) -> Vec<ErrorSpec> {
    vec![
        ErrorSpec::continuous(),
        ErrorSpec::demo(d_max),
        ErrorSpec::continuous_squared(),
    ]
}

/// Mean per-step error of replaying one constant θ, the coordinate-wise
/// median of all observed θ of that dimension, with the observed action
/// names.
pub fn constant_program_error(act: &dyn ActionError, trace: &ObservationTrace) -> f64 {
    if trace.is_empty() {
        return 0.0;
    }
    let mut by_dim: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (_, th) in trace.actions() {
        by_dim.entry(th.len()).or_default().push(th);
    }
    let medians: BTreeMap<usize, Vec<f64>> = by_dim
        .iter()
        .map(|(&dim, thetas)| {
            let m = (0..dim)
                .map(|i| {
                    let mut col: Vec<f64> = thetas.iter().map(|t| t[i]).collect();
                    col.sort_by(f64::total_cmp);
                    col[col.len() / 2]
                })
                .collect();
            (dim, m)
        })
        .collect();
    let total: f64 = trace
        .actions()
        .map(|(a, th)| act.eval(a, &medians[&th.len()], a, th))
        .sum();
    total / trace.len() as f64
}

/// `L = Σ_{t ≤ min(T, T')} σ_act + σ_len(T, T')`.
pub fn loss<S: AsRef<str>>(
    executed: &[(S, Vec<f64>)],
    observed: &ObservationTrace,
    spec: &ErrorSpec,
) -> f64 {
    let per_step: f64 = executed
        .iter()
        .zip(observed.actions())
        .map(|((a_hat, th_hat), (a, th))| spec.act.eval(a_hat.as_ref(), th_hat, a, th))
        .sum();
    per_step + spec.len.eval(observed.len(), executed.len())
}
