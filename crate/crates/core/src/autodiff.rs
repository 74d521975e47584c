//! Reverse-mode differentiation of the loss through a recorded call trace.

use std::collections::BTreeMap;

use crate::library::FunctionLibrary;
use crate::machine::{ArgSource, CallTrace, Machine, MachineError};
use crate::sexpr::{NodePath, Program};
use crate::trace::{ErrorSpec, ObservationTrace};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet {
    /// `∇_p L` for every parameter the execution read.
    pub by_param: BTreeMap<String, Vec<f64>>,
    /// `∇_v L` accumulated over all reads of each variable.
    pub by_var: BTreeMap<String, Vec<f64>>,
    /// Gradient flowing into each leaf occurrence.
    pub by_leaf: BTreeMap<NodePath, Vec<f64>>,
    /// 0-based step of the most recent read of each variable leaf.
    pub last_read: BTreeMap<NodePath, usize>,
}

impl GradientSet {
    pub fn leaf_norm(&self, path: &NodePath) -> f64 {
        self.by_leaf.get(path).map_or(0.0, |g| norm(g))
    }

    pub fn is_finite(&self) -> bool {
        self.by_param.values().chain(self.by_leaf.values()).flatten().all(|x| x.is_finite())
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn accumulate(into: &mut Vec<f64>, g: &[f64]) {
    if into.is_empty() {
        into.resize(g.len(), 0.0);
    }
    for (a, b) in into.iter_mut().zip(g) {
        *a += b;
    }
}

/// Traverse `chi` backwards. Each emitted action seeds `∂σ_act/∂θ̂`; the
/// length term does not depend on any parameter and contributes nothing.
pub fn backprop(
    chi: &CallTrace,
    trace: &ObservationTrace,
    spec: &ErrorSpec,
    lib: &FunctionLibrary,
) -> Result<GradientSet, MachineError> {
    let mut adj: Vec<Option<Vec<f64>>> = vec![None; chi.nodes.len()];
    let mut out = GradientSet::default();
    let var_names: Vec<&String> = trace.schema().vars.keys().collect();

    let route = |src: &ArgSource, g: &[f64], adj: &mut Vec<Option<Vec<f64>>>, out: &mut GradientSet| match src {
        ArgSource::Node(i) => accumulate(adj[*i].get_or_insert_with(Vec::new), g),
        ArgSource::Param { name, path, .. } => {
            accumulate(out.by_param.entry(name.clone()).or_default(), g);
            accumulate(out.by_leaf.entry(path.clone()).or_default(), g);
        }
        ArgSource::VarRead { var, t_read, path, .. } => {
            accumulate(out.by_var.entry(var_names[*var].clone()).or_default(), g);
            accumulate(out.by_leaf.entry(path.clone()).or_default(), g);
            let last = out.last_read.entry(path.clone()).or_insert(*t_read);
            *last = (*last).max(*t_read);
        }
        ArgSource::Const { path, .. } => accumulate(out.by_leaf.entry(path.clone()).or_default(), g),
    };

    for e in &chi.emitted {
        let step = &trace.steps()[e.t];
        let g = spec.act.grad(&e.action, &e.theta_hat, &step.action, &step.theta);
        route(&e.source, &g, &mut adj, &mut out);
    }
    for i in (0..chi.nodes.len()).rev() {
        let Some(upstream) = adj[i].take() else { continue };
        let node = &chi.nodes[i];
        let f = lib
            .get(node.func)
            .ok_or_else(|| MachineError::UnknownFunction(node.func.to_string()))?;
        let vals: Vec<&[f64]> = node.args.iter().map(|a| chi.value_of(a)).collect();
        for (k, a) in node.args.iter().enumerate() {
            let g = f.vjp(&vals, &upstream, k);
            route(a, &g, &mut adj, &mut out);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Parameter coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed the abort
    /// boundary or the point sits on a kink.
    pub excluded: usize,
}

/// Compare `backprop` against central finite differences on every
/// parameter coordinate. Relative error is `|a − n| / max(1, |a|, |n|)`.
pub fn check_gradients(
    p: &Program,
    trace: &ObservationTrace,
    spec: &ErrorSpec,
    lib: &FunctionLibrary,
    eps: f64,
) -> Result<GradCheck, MachineError> {
    let machine = Machine::new(trace, spec, lib);
    let base = machine.execute(p)?;
    let grads = backprop(&base.chi, trace, spec, lib)?;

    // An execution whose status flips when e_max moves slightly sits on
    // the abort boundary, where the loss is discontinuous.
    let mut boundary = false;
    if spec.e_max.is_finite() {
        for factor in [1.0 - 1e-6, 1.0 + 1e-6] {
            let nudged = ErrorSpec { e_max: spec.e_max * factor, ..spec.clone() };
            if Machine::new(trace, &nudged, lib).execute(p)?.status != base.status {
                boundary = true;
            }
        }
    }
    let kink = base.chi.emitted.iter().any(|e| {
        let step = &trace.steps()[e.t];
        e.action == step.action && e.sigma < eps
    });

    let mut result = GradCheck { max_rel_err: 0.0, checked: 0, excluded: 0 };
    for (name, value) in &p.params {
        for i in 0..value.len() {
            let run = |delta: f64| {
                let mut q = p.clone();
                q.params.get_mut(name).expect("present")[i] += delta;
                machine.execute(&q)
            };
            let plus = run(eps)?;
            let minus = run(-eps)?;
            if boundary || kink || plus.status != base.status || minus.status != base.status {
                result.excluded += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * eps);
            let analytic = grads.by_param.get(name).map_or(0.0, |g| g[i]);
            let rel = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
            result.max_rel_err = result.max_rel_err.max(rel);
            result.checked += 1;
        }
    }
    Ok(result)
}
