//! The abstract machine: replays a program against an observation trace,
//! scoring every emitted action and recording the call trace needed for
//! differentiation.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use thiserror::Error;

use crate::kdtree::KdTree;
use crate::library::{Function, FunctionLibrary};
use crate::sexpr::{Expr, NodePath, Program};
use crate::trace::{ErrorSpec, ExecPolicy, ObservationTrace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MachineError {
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("parameter `{0}` has no value")]
    UnboundParameter(String),
    #[error("dimension mismatch at {path}: {msg}")]
    Dimension { path: NodePath, msg: String },
    #[error("no variable of dimension {dim} at step {t}")]
    NoVariableOfDim { dim: usize, t: usize },
}

/// Nearest-variable lookup per (time step, dimension). Trees are built on
/// first use and cached; the index can be shared between threads.
#[derive(Debug)]
pub struct KdIndex<'a> {
    trace: &'a ObservationTrace,
    dims: Vec<usize>,
    /// `cache[t][k]` holds the tree over variables of dimension `dims[k]`.
    cache: Vec<Vec<OnceLock<(KdTree, Vec<usize>)>>>,
}

impl<'a> KdIndex<'a> {
    pub fn new(trace: &'a ObservationTrace) -> Self {
        let mut dims: Vec<usize> = trace.schema().vars.values().copied().collect();
        dims.sort_unstable();
        dims.dedup();
        let cache = (0..trace.len())
            .map(|_| (0..dims.len()).map(|_| OnceLock::new()).collect())
            .collect();
        Self { trace, dims, cache }
    }

    pub fn trace(&self) -> &'a ObservationTrace {
        self.trace
    }

    fn tree(&self, t: usize, dim: usize) -> Option<&(KdTree, Vec<usize>)> {
        let k = self.dims.iter().position(|&d| d == dim)?;
        let cell = self.cache.get(t)?.get(k)?;
        Some(cell.get_or_init(|| {
            // Schema variables are stored in lexicographic order, so the
            // tree's lowest-index tie-break is the lexicographic one.
            let ids: Vec<usize> = self
                .trace
                .schema()
                .vars
                .values()
                .enumerate()
                .filter(|(_, &d)| d == dim)
                .map(|(i, _)| i)
                .collect();
            let points = ids.iter().map(|&i| self.trace.value_at(t, i).to_vec()).collect();
            (KdTree::build(dim, points), ids)
        }))
    }

    /// Variable whose value at 0-based step `t` is nearest to `value`.
    pub fn nearest_variable(&self, t: usize, value: &[f64]) -> Result<(&'a str, &'a [f64]), MachineError> {
        let missing = MachineError::NoVariableOfDim { dim: value.len(), t: t + 1 };
        let (tree, ids) = self.tree(t, value.len()).ok_or(missing.clone())?;
        let (k, _) = tree.nearest(value).ok_or(missing)?;
        let var = ids[k];
        let name = self.trace.schema().vars.keys().nth(var).expect("index from schema");
        Ok((name.as_str(), self.trace.value_at(t, var)))
    }
}

/// Where a function or action argument came from.
#[derive(Debug, Clone, PartialEq)]
pub enum ArgSource {
    Param { name: String, value: Vec<f64>, path: NodePath },
    /// Variable (schema index) as read at 0-based step `t_read`.
    VarRead { var: usize, t_read: usize, value: Vec<f64>, path: NodePath },
    /// Output of `CallTrace::nodes[i]`.
    Node(usize),
    Const { value: Vec<f64>, path: NodePath },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceNode {
    pub func: &'static str,
    pub value: Vec<f64>,
    pub args: Vec<ArgSource>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    pub action: String,
    pub theta_hat: Vec<f64>,
    pub sigma: f64,
    /// 0-based step this action was compared against.
    pub t: usize,
    pub source: ArgSource,
}

/// Record of one execution: every function application in evaluation
/// order and every action emitted before termination.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CallTrace {
    pub nodes: Vec<TraceNode>,
    pub emitted: Vec<Emission>,
}

impl CallTrace {
    pub fn value_of<'c>(&'c self, src: &'c ArgSource) -> &'c [f64] {
        match src {
            ArgSource::Param { value, .. }
            | ArgSource::VarRead { value, .. }
            | ArgSource::Const { value, .. } => value,
            ArgSource::Node(i) => &self.nodes[*i].value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Completed,
    /// Terminated at this 1-based step because σ_act exceeded `e_max`.
    AbortedAt(usize),
}

#[derive(Debug, Clone)]
pub struct Execution {
    pub loss: f64,
    pub chi: CallTrace,
    pub status: Status,
    /// Number of actions the program emitted (T′).
    pub executed_len: usize,
}

impl Execution {
    pub fn completed(&self) -> bool {
        self.status == Status::Completed
    }
}

/// Memory of the machine: observed variables at the current step plus the
/// program's parameters.
#[derive(Debug, Clone)]
pub struct MemoryState<'a> {
    trace: &'a ObservationTrace,
    pub params: &'a BTreeMap<String, Vec<f64>>,
    /// 0-based step whose state is currently bound.
    pub t: usize,
}

impl<'a> MemoryState<'a> {
    pub fn new(trace: &'a ObservationTrace, params: &'a BTreeMap<String, Vec<f64>>) -> Self {
        Self { trace, params, t: 0 }
    }

    pub fn var(&self, index: usize) -> &'a [f64] {
        self.trace.value_at(self.t, index)
    }

    pub fn exhausted(&self) -> bool {
        self.t >= self.trace.len()
    }
}

pub enum Instr<'a> {
    Function(&'a dyn Function),
    Action(&'a str),
}

pub enum StepResult {
    Value(ArgSource),
    Emitted { sigma: f64 },
}

/// Apply one instruction. Functions append a node and leave memory alone;
/// actions are scored against the current step and advance time.
pub fn exec_step(
    m: &mut MemoryState<'_>,
    instr: Instr<'_>,
    args: Vec<ArgSource>,
    chi: &mut CallTrace,
    spec: &ErrorSpec,
) -> StepResult {
    match instr {
        Instr::Function(f) => {
            let value = {
                let vals: Vec<&[f64]> = args.iter().map(|a| chi.value_of(a)).collect();
                f.eval(&vals)
            };
            chi.nodes.push(TraceNode { func: f.symbol(), value, args });
            StepResult::Value(ArgSource::Node(chi.nodes.len() - 1))
        }
        Instr::Action(name) => {
            let source = args.into_iter().next().expect("actions take one argument");
            let theta_hat = chi.value_of(&source).to_vec();
            let step = &m.trace.steps()[m.t];
            let sigma = spec.act.eval(name, &theta_hat, &step.action, &step.theta);
            chi.emitted.push(Emission { action: name.to_string(), theta_hat, sigma, t: m.t, source });
            m.t += 1;
            StepResult::Emitted { sigma }
        }
    }
}

/// Executes programs against one trace under one error specification.
#[derive(Debug, Clone, Copy)]
pub struct Machine<'a> {
    pub trace: &'a ObservationTrace,
    pub spec: &'a ErrorSpec,
    pub lib: &'a FunctionLibrary,
}

impl<'a> Machine<'a> {
    pub fn new(trace: &'a ObservationTrace, spec: &'a ErrorSpec, lib: &'a FunctionLibrary) -> Self {
        Self { trace, spec, lib }
    }

    fn eval(
        &self,
        e: &Expr,
        path: NodePath,
        m: &mut MemoryState<'_>,
        chi: &mut CallTrace,
    ) -> Result<ArgSource, MachineError> {
        match e {
            Expr::VarRef { name, .. } => {
                let var = self
                    .trace
                    .schema()
                    .var_index(name)
                    .ok_or_else(|| MachineError::UnknownVariable(name.clone()))?;
                Ok(ArgSource::VarRead { var, t_read: m.t, value: m.var(var).to_vec(), path })
            }
            Expr::ParamRef { name, .. } => {
                let value = m
                    .params
                    .get(name)
                    .ok_or_else(|| MachineError::UnboundParameter(name.clone()))?
                    .clone();
                Ok(ArgSource::Param { name: name.clone(), value, path })
            }
            Expr::ConstVec(v) => Ok(ArgSource::Const { value: v.clone(), path }),
            Expr::FuncCall { func, args } => {
                let f = self
                    .lib
                    .get(func)
                    .ok_or_else(|| MachineError::UnknownFunction(func.clone()))?;
                let mut srcs = Vec::with_capacity(args.len());
                for (i, a) in args.iter().enumerate() {
                    srcs.push(self.eval(a, path.child(i), m, chi)?);
                }
                let dims: Vec<usize> = srcs.iter().map(|s| chi.value_of(s).len()).collect();
                if srcs.len() != f.arity() || f.result_dim(&dims).is_none() {
                    return Err(MachineError::Dimension {
                        path,
                        msg: format!("`{func}` applied to dimensions {dims:?}"),
                    });
                }
                match exec_step(m, Instr::Function(f), srcs, chi, self.spec) {
                    StepResult::Value(v) => Ok(v),
                    StepResult::Emitted { .. } => unreachable!(),
                }
            }
            Expr::ActionCall { name, .. } => Err(MachineError::Dimension {
                path,
                msg: format!("action `{name}` nested inside an expression"),
            }),
        }
    }

    /// Run `p` to completion or abort and return the loss
    /// `Σ σ_act + σ_len(T, T′)`.
    ///
    /// An aborted run is charged the error accumulated so far (including
    /// the aborting step), `σ_len(T, t)`, and `e_max` for every step it
    /// never reached.
    pub fn execute(&self, p: &Program) -> Result<Execution, MachineError> {
        let big_t = self.trace.len();
        let mut m = MemoryState::new(self.trace, &p.params);
        let mut chi = CallTrace::default();
        let mut sum = 0.0;
        let mut overflow = 0;
        let mut status = Status::Completed;

        'run: loop {
            for (b, e) in p.body.iter().enumerate() {
                if m.exhausted() {
                    if p.policy == ExecPolicy::RepeatBody {
                        break 'run;
                    }
                    overflow += 1;
                    continue;
                }
                let Expr::ActionCall { name, arg } = e else {
                    return Err(MachineError::Dimension {
                        path: NodePath::root(b),
                        msg: "body expression is not an action call".into(),
                    });
                };
                let src = self.eval(arg, NodePath::root(b).child(0), &mut m, &mut chi)?;
                let got = chi.value_of(&src).len();
                let want = self.trace.steps()[m.t].theta.len();
                let declared = self.trace.schema().action_dim(name);
                if declared.is_some_and(|d| d != got) || (declared.is_none() && got != want) {
                    return Err(MachineError::Dimension {
                        path: NodePath::root(b),
                        msg: format!("`{name}` given a {got}-vector"),
                    });
                }
                let StepResult::Emitted { sigma } =
                    exec_step(&mut m, Instr::Action(name), vec![src], &mut chi, self.spec)
                else {
                    unreachable!()
                };
                sum += sigma;
                if sigma > self.spec.e_max {
                    status = Status::AbortedAt(m.t);
                    break 'run;
                }
            }
            if p.policy == ExecPolicy::SinglePass || p.body.is_empty() || m.exhausted() {
                break;
            }
        }

        let executed_len = chi.emitted.len() + overflow;
        let mut loss = sum + self.spec.len.eval(big_t, executed_len);
        if let Status::AbortedAt(t) = status {
            loss += (big_t - t) as f64 * self.spec.e_max;
        }
        Ok(Execution { loss, chi, status, executed_len })
    }
}

/// Convenience wrapper around [`Machine::execute`].
pub fn execute(
    p: &Program,
    trace: &ObservationTrace,
    spec: &ErrorSpec,
    lib: &FunctionLibrary,
) -> Result<Execution, MachineError> {
    Machine::new(trace, spec, lib).execute(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{loss, Schema, Step};

    fn physics_trace(rule: impl Fn(f64, f64) -> f64, n: usize) -> ObservationTrace {
        let schema = Schema::new(
            [("x".to_string(), 1), ("v".to_string(), 1)],
            [("accel".to_string(), 1)],
        );
        let steps = (0..n)
            .map(|i| {
                let x = 1.0 - 0.1 * i as f64;
                let v = 0.05 * i as f64;
                Step { state: vec![vec![v], vec![x]], action: "accel".into(), theta: vec![rule(x, v)] }
            })
            .collect();
        ObservationTrace::new(schema, steps).unwrap()
    }

    fn demo_trace() -> ObservationTrace {
        let schema = Schema::new(
            [("a".to_string(), 2), ("b".to_string(), 2)],
            [("pick".to_string(), 2), ("place".to_string(), 2)],
        );
        let at = |a: [f64; 2], b: [f64; 2]| vec![a.to_vec(), b.to_vec()];
        let steps = vec![
            Step { state: at([0.0, 0.5], [3.0, 0.5]), action: "pick".into(), theta: vec![3.0, 0.5] },
            Step { state: at([0.0, 0.5], [3.0, 0.5]), action: "place".into(), theta: vec![0.0, 1.5] },
            Step { state: at([0.0, 0.5], [0.0, 1.5]), action: "pick".into(), theta: vec![0.0, 1.5] },
            Step { state: at([0.0, 0.5], [0.0, 1.5]), action: "place".into(), theta: vec![5.0, 0.5] },
        ];
        ObservationTrace::new(schema, steps).unwrap()
    }

    fn parse(text: &str, trace: &ObservationTrace) -> Program {
        Program::parse(text, trace.schema(), &FunctionLibrary::standard(), None).unwrap()
    }

    #[test]
    fn exact_program_has_zero_loss() {
        let tr = physics_trace(|x, _| 2.0 * x, 10);
        let spec = ErrorSpec::continuous().calibrated(&tr);
        let ex = execute(&parse("(accel (* 2.0 x))", &tr), &tr, &spec, &FunctionLibrary::standard()).unwrap();
        assert_eq!(ex.status, Status::Completed);
        assert_eq!(ex.executed_len, 10);
        assert!(ex.loss.abs() < 1e-12);
    }

    #[test]
    fn empty_program_pays_length() {
        let tr = demo_trace();
        let spec = ErrorSpec::demo(10.0);
        let ex = execute(&Program::empty(ExecPolicy::SinglePass), &tr, &spec, &FunctionLibrary::standard()).unwrap();
        assert_eq!(ex.loss, 16.0);
        assert_eq!(ex.status, Status::Completed);
        let ex = execute(&Program::empty(ExecPolicy::RepeatBody), &tr, &spec, &FunctionLibrary::standard()).unwrap();
        assert_eq!(ex.loss, 16.0);
    }

    #[test]
    fn abort_on_first_action() {
        let tr = physics_trace(|_, _| 0.0, 5);
        let spec = ErrorSpec::continuous().with_e_max(0.1);
        let ex = execute(&parse("(accel 1.0)", &tr), &tr, &spec, &FunctionLibrary::standard()).unwrap();
        assert_eq!(ex.status, Status::AbortedAt(1));
        assert_eq!(ex.chi.emitted.len(), 1);
        assert!((ex.loss - (1.0 + 4.0 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn matches_independent_loss() {
        let tr = demo_trace();
        let spec = ErrorSpec::demo(10.0);
        let lib = FunctionLibrary::standard();
        for text in [
            "(do (pick b) (place (+ a [0.0 1.0])) (pick b) (place [5.0 0.5]))",
            "(do (pick b) (place a))",
            "(do (pick a) (pick b) (place a) (place b) (pick a) (pick b))",
        ] {
            let p = parse(text, &tr);
            let ex = execute(&p, &tr, &spec, &lib).unwrap();
            // Independent oracle: evaluate each action by hand-rolled
            // substitution of the recorded state.
            let executed: Vec<(String, Vec<f64>)> = p
                .body
                .iter()
                .enumerate()
                .map(|(t, e)| {
                    let Expr::ActionCall { name, arg } = e else { panic!() };
                    (name.clone(), eval_oracle(arg, &tr, t.min(tr.len() - 1)))
                })
                .collect();
            let expected = loss(&executed, &tr, &spec);
            assert!((ex.loss - expected).abs() < 1e-12, "{text}: {} vs {expected}", ex.loss);
        }
    }

    fn eval_oracle(e: &Expr, tr: &ObservationTrace, t: usize) -> Vec<f64> {
        match e {
            Expr::VarRef { name, .. } => tr.value(t, name).unwrap().to_vec(),
            Expr::ConstVec(v) => v.clone(),
            Expr::FuncCall { func, args } if func == "+" => {
                let a = eval_oracle(&args[0], tr, t);
                let b = eval_oracle(&args[1], tr, t);
                a.iter().zip(&b).map(|(x, y)| x + y).collect()
            }
            _ => unimplemented!(),
        }
    }

    #[test]
    fn variable_reads_are_frozen_at_read_time() {
        let tr = physics_trace(|x, v| x + v, 6);
        let spec = ErrorSpec::continuous();
        let ex = execute(&parse("(accel (+ x v))", &tr), &tr, &spec, &FunctionLibrary::standard()).unwrap();
        let mut reads = 0;
        for node in &ex.chi.nodes {
            for a in &node.args {
                if let ArgSource::VarRead { var, t_read, value, .. } = a {
                    assert_eq!(value.as_slice(), tr.value_at(*t_read, *var));
                    reads += 1;
                }
            }
        }
        assert_eq!(reads, 12);
        assert!(ex.loss < 1e-12);
    }

    #[test]
    fn single_pass_overflow_is_counted_by_length_only() {
        let tr = demo_trace();
        let spec = ErrorSpec::demo(10.0);
        let p = parse("(do (pick b) (place [0.0 1.5]) (pick [0.0 1.5]) (place [5.0 0.5]) (pick a))", &tr);
        let ex = execute(&p, &tr, &spec, &FunctionLibrary::standard()).unwrap();
        assert_eq!(ex.executed_len, 5);
        assert_eq!(ex.chi.emitted.len(), 4);
        assert!((ex.loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exec_step_function_and_action() {
        let tr = demo_trace();
        let spec = ErrorSpec::demo(10.0);
        let params = BTreeMap::new();
        let mut m = MemoryState::new(&tr, &params);
        let mut chi = CallTrace::default();
        let lib = FunctionLibrary::standard();
        let c = |v: Vec<f64>| ArgSource::Const { value: v, path: NodePath::root(0) };
        let StepResult::Value(src) = exec_step(
            &mut m,
            Instr::Function(lib.get("+").unwrap()),
            vec![c(vec![1.0, 2.0]), c(vec![3.0, 4.0])],
            &mut chi,
            &spec,
        ) else {
            panic!()
        };
        assert_eq!(chi.value_of(&src), &[4.0, 6.0]);
        assert_eq!(m.t, 0);
        let StepResult::Value(src) = exec_step(
            &mut m,
            Instr::Function(lib.get("*").unwrap()),
            vec![c(vec![2.0]), c(vec![1.0, -1.0])],
            &mut chi,
            &spec,
        ) else {
            panic!()
        };
        assert_eq!(chi.value_of(&src), &[2.0, -2.0]);
        exec_step(&mut m, Instr::Action("pick"), vec![c(vec![3.0, 0.5])], &mut chi, &spec);
        assert_eq!(m.t, 1);
        assert_eq!(chi.emitted[0].sigma, 0.0);
    }

    #[test]
    fn nearest_variable_queries() {
        let schema = Schema::new(
            [("x".to_string(), 1), ("v".to_string(), 1), ("loc".to_string(), 2)],
            [("accel".to_string(), 1)],
        );
        let tr = ObservationTrace::new(
            schema,
            vec![Step {
                state: vec![vec![0.0, 0.0], vec![0.1], vec![0.9]],
                action: "accel".into(),
                theta: vec![0.0],
            }],
        )
        .unwrap();
        let idx = KdIndex::new(&tr);
        assert_eq!(idx.nearest_variable(0, &[0.85]).unwrap().0, "x");
        assert_eq!(idx.nearest_variable(0, &[0.5]).unwrap().0, "v");
        assert!(matches!(
            idx.nearest_variable(0, &[0.0, 0.0, 0.0]),
            Err(MachineError::NoVariableOfDim { dim: 3, .. })
        ));
    }
}
