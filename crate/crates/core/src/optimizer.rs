//! Parameter optimisation for a fixed program structure: AdaGrad on the
//! parameters, with selected variable leaves relaxed into temporary
//! parameters that snap to the nearest observed variable.

use std::collections::BTreeMap;

use crate::autodiff::{backprop, GradientSet};
use crate::machine::{ArgSource, Execution, KdIndex, Machine, Status};
use crate::sexpr::{Expr, NodePath, Program};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    /// Added to the accumulator root to avoid division by zero.
    pub delta: f64,
    /// Maximum descent iterations per phase.
    pub budget: usize,
    /// Stop once the loss is at or below this value.
    pub tol: f64,
    /// Feed AdaGrad `L·∇L` (the gradient of `L²/2`) instead of `∇L`. The
    /// minimiser is the same, but steps shrink as the loss vanishes, which
    /// lets non-smooth norm losses converge to high precision.
    pub loss_scaled: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 2.0, delta: 1e-8, budget: 200, tol: 0.0, loss_scaled: true }
    }
}

/// A variable leaf temporarily optimised as a parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct TempParam {
    pub name: String,
    pub path: NodePath,
    /// Variable the current value was taken from.
    pub origin: String,
    /// 0-based step at which the leaf is read.
    pub t_read: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub accum: BTreeMap<String, Vec<f64>>,
    pub lr: f64,
    pub delta: f64,
    pub temp_params: Vec<TempParam>,
    pub iter: usize,
    pub best_loss: f64,
    pub snaps: usize,
}

impl OptimState {
    pub fn new(lr: f64, delta: f64) -> Self {
        Self {
            accum: BTreeMap::new(),
            lr,
            delta,
            temp_params: Vec::new(),
            iter: 0,
            best_loss: f64::INFINITY,
            snaps: 0,
        }
    }

    pub fn reset_history(&mut self) {
        for a in self.accum.values_mut() {
            a.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SnapResult {
    Kept,
    Snapped(String),
}

/// `accum += g²; p −= lr · g / (√accum + δ)` per coordinate.
pub fn adagrad_step(
    state: &mut OptimState,
    params: &mut BTreeMap<String, Vec<f64>>,
    grads: &BTreeMap<String, Vec<f64>>,
) {
    for (name, g) in grads {
        let Some(p) = params.get_mut(name) else { continue };
        let acc = state.accum.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for ((pi, ai), gi) in p.iter_mut().zip(acc.iter_mut()).zip(g) {
            *ai += gi * gi;
            *pi -= state.lr * gi / (ai.sqrt() + state.delta);
        }
    }
}

/// Snap temporary parameter `which` to its nearest variable. A change of
/// variable overwrites the value with that variable's reading and clears
/// the gradient history of every parameter.
pub fn snap_variable(
    state: &mut OptimState,
    which: usize,
    params: &mut BTreeMap<String, Vec<f64>>,
    idx: &KdIndex<'_>,
) -> SnapResult {
    let tp = &state.temp_params[which];
    let Some(value) = params.get(&tp.name) else { return SnapResult::Kept };
    let Ok((var, var_value)) = idx.nearest_variable(tp.t_read, value) else {
        return SnapResult::Kept;
    };
    if var == tp.origin {
        return SnapResult::Kept;
    }
    let name = tp.name.clone();
    params.insert(name, var_value.to_vec());
    state.temp_params[which].origin = var.to_string();
    state.reset_history();
    state.snaps += 1;
    SnapResult::Snapped(var.to_string())
}

#[derive(Debug, Clone)]
pub struct Optimized {
    pub program: Program,
    pub loss: f64,
    pub status: Status,
    pub grads: GradientSet,
    pub iterations: usize,
    pub snaps: usize,
    /// Non-finite loss or gradient, or an execution error.
    pub failed: bool,
}

impl Optimized {
    fn failure(program: Program, iterations: usize) -> Self {
        Self {
            program,
            loss: f64::INFINITY,
            status: Status::Completed,
            grads: GradientSet::default(),
            iterations,
            snaps: 0,
            failed: true,
        }
    }
}

fn scaled(grads: &GradientSet, factor: f64) -> BTreeMap<String, Vec<f64>> {
    grads
        .by_param
        .iter()
        .map(|(k, g)| (k.clone(), g.iter().map(|x| x * factor).collect()))
        .collect()
}

/// Descent loop over `program`'s parameters. Returns the best iterate seen
/// (program, its temporaries) and the iteration count.
fn descend(
    machine: &Machine<'_>,
    idx: &KdIndex<'_>,
    cfg: &OptimConfig,
    mut program: Program,
    temps: Vec<TempParam>,
) -> Option<(Program, Vec<TempParam>, usize, usize)> {
    let mut state = OptimState::new(cfg.lr, cfg.delta);
    state.temp_params = temps;
    let mut best = (program.clone(), state.temp_params.clone());
    for it in 0..=cfg.budget {
        state.iter = it;
        let ex = machine.execute(&program).ok()?;
        if !ex.loss.is_finite() {
            return None;
        }
        if ex.loss < state.best_loss {
            state.best_loss = ex.loss;
            best = (program.clone(), state.temp_params.clone());
        }
        if ex.loss <= cfg.tol || it == cfg.budget {
            break;
        }
        let grads = backprop(&ex.chi, machine.trace, machine.spec, machine.lib).ok()?;
        if !grads.is_finite() {
            return None;
        }
        let factor = if cfg.loss_scaled { ex.loss } else { 1.0 };
        let g = scaled(&grads, factor);
        if g.values().flatten().all(|&x| x == 0.0) {
            break;
        }
        adagrad_step(&mut state, &mut program.params, &g);
        for k in 0..state.temp_params.len() {
            snap_variable(&mut state, k, &mut program.params, idx);
        }
    }
    Some((best.0, best.1, state.iter, state.snaps))
}

/// How often each leaf path is read in one execution.
fn read_counts(ex: &Execution) -> BTreeMap<NodePath, (usize, usize)> {
    let mut counts: BTreeMap<NodePath, (usize, usize)> = BTreeMap::new();
    let mut note = |a: &ArgSource| {
        if let ArgSource::VarRead { path, t_read, .. } = a {
            let e = counts.entry(path.clone()).or_insert((0, *t_read));
            e.0 += 1;
            e.1 = *t_read;
        }
    };
    for n in &ex.chi.nodes {
        n.args.iter().for_each(&mut note);
    }
    ex.chi.emitted.iter().for_each(|e| note(&e.source));
    counts
}

/// Optimise the parameters of `candidate`.
///
/// Variable leaves listed in `free_vars` that are read exactly once per
/// execution become temporary parameters: they are optimised alongside
/// the real parameters, snapped to the nearest variable after every step,
/// and finally replaced by their nearest variable. If any temporaries were
/// used, a second pass with fresh AdaGrad state refines the remaining
/// parameters for the settled structure.
pub fn optimize(
    candidate: &Program,
    free_vars: &[NodePath],
    machine: &Machine<'_>,
    idx: &KdIndex<'_>,
    cfg: &OptimConfig,
) -> Optimized {
    let Ok(first) = machine.execute(candidate) else {
        return Optimized::failure(candidate.clone(), 0);
    };
    let reads = read_counts(&first);
    let mut working = candidate.clone();
    let mut temps = Vec::new();
    for path in free_vars {
        let Some(Expr::VarRef { name, dim }) = candidate.at(path) else { continue };
        let Some(&(1, t_read)) = reads.get(path) else { continue };
        let tname = format!("_t{}", temps.len());
        let value = idx.trace().value(t_read, name).expect("schema variable").to_vec();
        working.set_node(path, Expr::param(&tname, *dim));
        working.params.insert(tname.clone(), value);
        temps.push(TempParam { name: tname, path: path.clone(), origin: name.clone(), t_read });
    }

    let had_temps = !temps.is_empty();
    let Some((mut best, temps, mut iterations, snaps)) = descend(machine, idx, cfg, working, temps) else {
        return Optimized::failure(candidate.clone(), 0);
    };
    for tp in &temps {
        let value = best.params.remove(&tp.name).expect("temp value");
        match idx.nearest_variable(tp.t_read, &value) {
            Ok((var, _)) => {
                best.set_node(&tp.path, Expr::var(var, value.len()));
            }
            Err(_) => {
                best.params.insert(tp.name.clone(), value);
            }
        }
    }
    best.renumber_params();
    if had_temps && !best.params.is_empty() {
        match descend(machine, idx, cfg, best.clone(), Vec::new()) {
            Some((polished, _, more, _)) => {
                best = polished;
                iterations += more;
            }
            None => return Optimized::failure(best, iterations),
        }
    }

    let Ok(ex) = machine.execute(&best) else {
        return Optimized::failure(best, iterations);
    };
    let Ok(grads) = backprop(&ex.chi, machine.trace, machine.spec, machine.lib) else {
        return Optimized::failure(best, iterations);
    };
    if !ex.loss.is_finite() || !grads.is_finite() {
        return Optimized::failure(best, iterations);
    }
    Optimized { program: best, loss: ex.loss, status: ex.status, grads, iterations, snaps, failed: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library::FunctionLibrary;
    use crate::trace::{ErrorSpec, ExecPolicy, ObservationTrace, Schema, Step};

    fn linear_trace(k1: f64, k2: f64) -> ObservationTrace {
        let schema = Schema::new(
            [("x".to_string(), 1), ("v".to_string(), 1)],
            [("accel".to_string(), 1)],
        );
        let (mut x, mut v, dt) = (1.0, 0.0, 0.01);
        let steps = (0..100)
            .map(|_| {
                let a = k1 * x + k2 * v;
                let s = Step { state: vec![vec![v], vec![x]], action: "accel".into(), theta: vec![a] };
                v += dt * a;
                x += dt * v;
                s
            })
            .collect();
        ObservationTrace::new(schema, steps).unwrap()
    }

    #[test]
    fn adagrad_formula() {
        let mut st = OptimState::new(0.1, 1e-8);
        let mut params = BTreeMap::from([("p".to_string(), vec![0.0])]);
        adagrad_step(&mut st, &mut params, &BTreeMap::from([("p".to_string(), vec![4.0])]));
        assert!((params["p"][0] + 0.1).abs() < 1e-9);
        assert_eq!(st.accum["p"], vec![16.0]);

        let before = params.clone();
        adagrad_step(&mut st, &mut params, &BTreeMap::from([("p".to_string(), vec![0.0])]));
        assert_eq!(params, before);
        assert_eq!(st.accum["p"], vec![16.0]);
    }

    #[test]
    fn repeated_gradient_gives_shrinking_steps() {
        let mut st = OptimState::new(0.5, 1e-8);
        let mut params = BTreeMap::from([("p".to_string(), vec![0.0])]);
        let g = BTreeMap::from([("p".to_string(), vec![1.0])]);
        adagrad_step(&mut st, &mut params, &g);
        let first = params["p"][0];
        adagrad_step(&mut st, &mut params, &g);
        let second = params["p"][0] - first;
        assert!(second.abs() < first.abs());
    }

    fn snap_setup() -> ObservationTrace {
        let schema = Schema::new(
            [("x".to_string(), 1), ("v".to_string(), 1)],
            [("accel".to_string(), 1)],
        );
        ObservationTrace::new(
            schema,
            vec![Step { state: vec![vec![0.1], vec![0.9]], action: "accel".into(), theta: vec![0.0] }],
        )
        .unwrap()
    }

    #[test]
    fn snap_to_new_variable_resets_history() {
        let tr = snap_setup();
        let idx = KdIndex::new(&tr);
        let mut st = OptimState::new(0.1, 1e-8);
        st.temp_params.push(TempParam {
            name: "_t0".into(),
            path: NodePath::root(0).child(0),
            origin: "x".into(),
            t_read: 0,
        });
        st.accum.insert("_t0".into(), vec![3.0]);
        st.accum.insert("p0".into(), vec![5.0]);
        let mut params = BTreeMap::from([("_t0".to_string(), vec![0.2]), ("p0".to_string(), vec![1.0])]);
        assert_eq!(snap_variable(&mut st, 0, &mut params, &idx), SnapResult::Snapped("v".into()));
        assert_eq!(params["_t0"], vec![0.1]);
        assert!(st.accum.values().flatten().all(|&a| a == 0.0));

        st.accum.insert("p0".into(), vec![5.0]);
        params.insert("_t0".into(), vec![0.15]);
        assert_eq!(snap_variable(&mut st, 0, &mut params, &idx), SnapResult::Kept);
        assert_eq!(params["_t0"], vec![0.15]);
        assert_eq!(st.accum["p0"], vec![5.0]);
    }

    #[test]
    fn single_variable_never_resets() {
        let schema = Schema::new([("x".to_string(), 1)], [("accel".to_string(), 1)]);
        let tr = ObservationTrace::new(
            schema,
            vec![Step { state: vec![vec![0.5]], action: "accel".into(), theta: vec![0.0] }],
        )
        .unwrap();
        let idx = KdIndex::new(&tr);
        let mut st = OptimState::new(0.1, 1e-8);
        st.temp_params.push(TempParam {
            name: "_t0".into(),
            path: NodePath::root(0).child(0),
            origin: "x".into(),
            t_read: 0,
        });
        st.accum.insert("_t0".into(), vec![2.0]);
        for v in [-100.0, 0.0, 3.0] {
            let mut params = BTreeMap::from([("_t0".to_string(), vec![v])]);
            assert_eq!(snap_variable(&mut st, 0, &mut params, &idx), SnapResult::Kept);
        }
        assert_eq!(st.accum["_t0"], vec![2.0]);
    }

    fn run(text: &str, tr: &ObservationTrace, budget: usize) -> Optimized {
        let lib = FunctionLibrary::standard();
        let spec = ErrorSpec::continuous().calibrated(tr);
        let p = Program::parse(text, tr.schema(), &lib, None).unwrap();
        let machine = Machine::new(tr, &spec, &lib);
        let idx = KdIndex::new(tr);
        let cfg = OptimConfig { budget, tol: 1e-3 * spec.e_acc, ..OptimConfig::default() };
        optimize(&p, &[], &machine, &idx, &cfg)
    }

    #[test]
    fn recovers_single_coefficient() {
        // θ = 2x exactly: least squares gives p0 = 2.
        let tr = linear_trace(0.0, 0.0);
        let tr = ObservationTrace::new(
            tr.schema().clone(),
            tr.steps()
                .iter()
                .map(|s| Step { theta: vec![2.0 * s.state[1][0]], ..s.clone() })
                .collect(),
        )
        .unwrap();
        let out = run("(accel (* p0 x))", &tr, 200);
        assert!(!out.failed);
        assert!((out.program.params["p0"][0] - 2.0).abs() < 1e-3);
        assert!(out.loss < 1e-6 * tr.len() as f64);
    }

    #[test]
    fn recovers_oscillator_coefficients() {
        let tr = linear_trace(-1.0, -0.2);
        let out = run("(accel (+ (* p0 x) (* p1 v)))", &tr, 400);
        assert!((out.program.params["p0"][0] + 1.0).abs() < 1e-2, "{:?}", out.program.params);
        assert!((out.program.params["p1"][0] + 0.2).abs() < 1e-2, "{:?}", out.program.params);
    }

    #[test]
    fn converged_candidate_stops_immediately() {
        let tr = linear_trace(-1.0, 0.0);
        let lib = FunctionLibrary::standard();
        let p = Program::parse("(accel (* p0 x))", tr.schema(), &lib, None)
            .unwrap()
            .with_param("p0", vec![-1.0]);
        let spec = ErrorSpec::continuous().calibrated(&tr);
        let machine = Machine::new(&tr, &spec, &lib);
        let idx = KdIndex::new(&tr);
        let cfg = OptimConfig { tol: 1e-3 * spec.e_acc, ..OptimConfig::default() };
        let out = optimize(&p, &[], &machine, &idx, &cfg);
        assert!(out.iterations <= 1);
        assert_eq!(out.program, p);
    }

    #[test]
    fn temporary_variable_snaps_and_is_substituted() {
        // Two-step demo: pick the cube at `b`, place it on `a` shifted up.
        let schema = Schema::new(
            [("a".to_string(), 2), ("b".to_string(), 2)],
            [("pick".to_string(), 2), ("place".to_string(), 2)],
        );
        let state = vec![vec![0.0, 0.5], vec![4.0, 0.5]];
        let tr = ObservationTrace::new(
            schema,
            vec![
                Step { state: state.clone(), action: "pick".into(), theta: vec![4.0, 0.5] },
                Step { state, action: "place".into(), theta: vec![-0.05, 1.67] },
            ],
        )
        .unwrap();
        let lib = FunctionLibrary::standard();
        let spec = ErrorSpec::demo(10.0).calibrated(&tr);
        let p = Program::parse("(do (pick a) (place (+ b p0)))", tr.schema(), &lib, None)
            .unwrap()
            .with_param("p0", vec![0.1, 0.1]);
        let machine = Machine::new(&tr, &spec, &lib);
        let idx = KdIndex::new(&tr);
        let cfg = OptimConfig { tol: 1e-3 * spec.e_acc, ..OptimConfig::default() };
        let free = [NodePath { body: 0, route: vec![0] }, NodePath { body: 1, route: vec![0, 0] }];
        let out = optimize(&p, &free, &machine, &idx, &cfg);
        assert!(!out.failed);
        assert_eq!(out.program.policy, ExecPolicy::SinglePass);
        assert_eq!(out.program.to_string(), "(do (pick b) (place (+ a p0)))");
        let off = &out.program.params["p0"];
        assert!((off[0] + 0.05).abs() < 1e-3 && (off[1] - 1.17).abs() < 1e-3, "{off:?}");
        assert!(out.program.param_names().iter().all(|n| !n.starts_with("_t")));
    }
}
