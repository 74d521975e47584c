//! A* search over program structures.
//!
//! Nodes are programs; an edge replaces one leaf with a single function
//! application (or appends an action call at the body slot). Candidates are
//! scored by `f_total = C + L`, where `C` is a weighted structural
//! complexity and `L` the optimised loss.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::GradientSet;
use crate::library::FunctionLibrary;
use crate::machine::{KdIndex, Machine, Status};
use crate::optimizer::{optimize, OptimConfig, Optimized};
use crate::par::Pool;
use crate::sexpr::{Expr, LeafPath, NodePath, Program};
use crate::trace::{ErrorSpec, ExecPolicy, ObservationTrace, Schema};

pub const DEFAULT_WEIGHTS: [f64; 3] = [10.0, 5.0, 1.0];

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    /// Weights of depth, distinct parameters and variable occurrences.
    pub weights: [f64; 3],
    /// Maximum number of expansions.
    pub outer_budget: usize,
    pub best_k: usize,
    pub seed: u64,
    /// Worker threads for batch optimisation; 0 uses every core.
    pub workers: usize,
    /// `optim.tol` of 0 means `1e-3 · e_acc`.
    pub optim: OptimConfig,
    /// Variance of the normal distribution new parameters are drawn from.
    pub init_variance: f64,
    pub policy: Option<ExecPolicy>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            weights: DEFAULT_WEIGHTS,
            outer_budget: 1000,
            best_k: 3,
            seed: 0,
            workers: 0,
            optim: OptimConfig::default(),
            init_variance: 0.1,
            policy: None,
        }
    }
}

/// `w₀·depth + w₁·(distinct parameters) + w₂·(variable occurrences)`.
pub fn complexity(p: &Program, w: &[f64; 3]) -> f64 {
    w[0] * p.depth() as f64 + w[1] * p.param_count() as f64 + w[2] * p.var_count() as f64
}

#[derive(Debug, Clone)]
pub struct Candidate {
    pub id: usize,
    pub parent: Option<usize>,
    pub program: Program,
    pub loss: f64,
    pub complexity: f64,
    pub score: f64,
    pub status: Status,
    pub executed_len: usize,
    pub grads: GradientSet,
    pub failed: bool,
    /// Replaceable positions, most promising first.
    pub leaf_order: Vec<LeafPath>,
}

impl Candidate {
    pub fn accepted(&self, e_acc: f64) -> bool {
        !self.failed && !self.program.is_empty() && self.status == Status::Completed && self.loss <= e_acc
    }
}

/// Mix a seed with candidate coordinates so every expansion gets its own
/// random stream regardless of scheduling.
fn stream(seed: u64, id: usize, salt: usize) -> ChaCha8Rng {
    let mut z = seed ^ (id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (salt as u64).wrapping_mul(0xD1B5_4A32_D192_ED69);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Gradient norm of each replaceable position. The body slot has no
/// parameter; its score is the length error one more action would remove,
/// or 0 after an abort, when an appended action would never run.
pub fn leaf_scores(
    p: &Program,
    grads: &GradientSet,
    status: Status,
    executed_len: usize,
    trace: &ObservationTrace,
    spec: &ErrorSpec,
) -> Vec<(LeafPath, f64)> {
    let t = trace.len();
    p.leaf_slots()
        .into_iter()
        .map(|slot| {
            let s = match &slot {
                LeafPath::Node(path) => grads.leaf_norm(path),
                LeafPath::BodySlot if status != Status::Completed => 0.0,
                LeafPath::BodySlot => {
                    (spec.len.eval(t, executed_len) - spec.len.eval(t, executed_len + 1)).max(0.0)
                }
            };
            (slot, s)
        })
        .collect()
}

/// Leaves with non-zero gradient in decreasing norm order (ties keep
/// depth-first order). With no gradient signal at all, a single leaf drawn
/// uniformly from `rng`.
pub fn rank_leaves(scores: Vec<(LeafPath, f64)>, rng: &mut impl Rng) -> Vec<LeafPath> {
    let mut live: Vec<(LeafPath, f64)> = scores.iter().filter(|(_, s)| *s > 0.0).cloned().collect();
    if live.is_empty() {
        if scores.is_empty() {
            return Vec::new();
        }
        let i = rng.random_range(0..scores.len());
        return vec![scores[i].0.clone()];
    }
    live.sort_by(|a, b| b.1.total_cmp(&a.1));
    live.into_iter().map(|(l, _)| l).collect()
}

/// Eq. 2 leaf: the first entry of [`rank_leaves`].
pub fn select_leaf(c: &Candidate) -> Option<&LeafPath> {
    c.leaf_order.first()
}

/// Unoptimised child program plus the variable leaves chosen at random,
/// which the optimiser may move between variables.
#[derive(Debug, Clone)]
pub struct Child {
    pub program: Program,
    pub free_vars: Vec<NodePath>,
}

/// All type-compatible single-step extensions of `p` at `leaf`.
///
/// At a leaf: every function, every argument signature for the leaf's
/// dimension and every parameter/variable pattern of its arguments. A
/// replaced variable is kept as the first variable argument (free under
/// [`ExecPolicy::SinglePass`]). Further
/// variable arguments range over every schema variable of the right
/// dimension under [`ExecPolicy::RepeatBody`]; otherwise one is drawn
/// uniformly and reported as free. Parameters are drawn from
/// `N(0, variance)`. Patterns with no variable of the needed
/// dimension fall back to a parameter.
///
/// At the body slot: one action call per declared action, over a
/// variable of the action's dimension chosen by the same rule, or over a
/// fresh parameter when no such variable exists.
pub fn expand(
    p: &Program,
    leaf: &LeafPath,
    lib: &FunctionLibrary,
    schema: &Schema,
    variance: f64,
    rng: &mut impl Rng,
) -> Vec<Child> {
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite variance");
    let draw = |dim: usize, rng: &mut dyn rand::RngCore| -> Vec<f64> {
        (0..dim).map(|_| normal.sample(rng)).collect()
    };
    let mut out = Vec::new();
    match leaf {
        LeafPath::BodySlot => {
            let slot = NodePath::root(p.body.len()).child(0);
            for (action, &dim) in &schema.actions {
                let vars = schema.vars_of_dim(dim);
                let mut seeds: Vec<(Expr, BTreeMap<String, Vec<f64>>, bool)> = Vec::new();
                if vars.is_empty() {
                    seeds.push((Expr::param("a", dim), BTreeMap::from([("a".to_string(), draw(dim, rng))]), false));
                } else if p.policy == ExecPolicy::RepeatBody {
                    seeds.extend(vars.iter().map(|v| (Expr::var(v, dim), BTreeMap::new(), false)));
                } else {
                    let v = vars[rng.random_range(0..vars.len())];
                    seeds.push((Expr::var(v, dim), BTreeMap::new(), true));
                }
                for (arg, vals, free) in seeds {
                    if let Ok(q) = p.push_action(Expr::action(action, arg), &vals, schema, lib) {
                        let free_vars = if free { vec![slot.clone()] } else { Vec::new() };
                        out.push(Child { program: q, free_vars });
                    }
                }
            }
        }
        LeafPath::Node(path) => {
            let Some(old) = p.at(path) else { return out };
            let (dim, wrap) = match old {
                Expr::VarRef { name, dim } => (*dim, Some((name.as_str(), *dim))),
                Expr::ParamRef { dim, .. } => (*dim, None),
                Expr::ConstVec(v) => (v.len(), None),
                _ => return out,
            };
            // New variable leaves start as a random variable. Under a single
            // pass each is read once and is relaxed by the optimiser; a
            // repeated body reads it at every step, so it stays fixed.
            let free = p.policy == ExecPolicy::SinglePass;
            for f in lib.iter() {
                for sig in f.signatures(dim) {
                    for mask in 0..(1usize << sig.len()) {
                        // Per argument: the candidate leaves, with whether the
                        // leaf is a free variable.
                        let mut options: Vec<Vec<(Expr, bool)>> = Vec::with_capacity(sig.len());
                        let mut vals = BTreeMap::new();
                        let mut wrapped = false;
                        for (i, &d) in sig.iter().enumerate() {
                            let vars = schema.vars_of_dim(d);
                            if mask >> i & 1 == 1 && !vars.is_empty() {
                                match wrap {
                                    Some((w, wd)) if !wrapped && wd == d => {
                                        wrapped = true;
                                        options.push(vec![(Expr::var(w, d), free)]);
                                    }
                                    _ => {
                                        let v = vars[rng.random_range(0..vars.len())];
                                        options.push(vec![(Expr::var(v, d), free)]);
                                    }
                                }
                            } else {
                                let name = format!("a{i}");
                                vals.insert(name.clone(), draw(d, rng));
                                options.push(vec![(Expr::param(&name, d), false)]);
                            }
                        }
                        for choice in product(&options) {
                            let free = choice
                                .iter()
                                .enumerate()
                                .filter(|(_, (_, free))| *free)
                                .map(|(i, _)| path.child(i))
                                .collect();
                            let args = choice.into_iter().map(|(e, _)| e).collect();
                            let sub = Expr::call(f.symbol(), args);
                            if let Ok(q) = p.replace_leaf(path, sub, &vals, schema, lib) {
                                out.push(Child { program: q, free_vars: free });
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Cartesian product of the option lists, first list varying slowest.
fn product<T: Clone>(options: &[Vec<T>]) -> Vec<Vec<T>> {
    options.iter().fold(vec![Vec::new()], |acc, opts| {
        acc.iter()
            .flat_map(|prefix| {
                opts.iter().map(move |o| {
                    let mut v = prefix.clone();
                    v.push(o.clone());
                    v
                })
            })
            .collect()
    })
}

/// Squared Euclidean norm of all parameter values.
pub fn param_norm(p: &Program) -> f64 {
    p.params.values().flatten().map(|x| x * x).sum()
}

/// Programs equal to `p` except for one call whose arguments are all
/// leaves. The call is rebuilt with any function of the same arity and
/// the same numbers of variable and parameter arguments, so complexity is
/// unchanged. New parameters start at zero.
pub fn rewrites(p: &Program, lib: &FunctionLibrary, schema: &Schema, weights: &[f64; 3]) -> Vec<Program> {
    let mut calls: Vec<NodePath> = Vec::new();
    for (path, _) in p.leaves() {
        if let Some((_, parent)) = path.route.split_last() {
            let parent = NodePath { body: path.body, route: parent.to_vec() };
            if !calls.contains(&parent) {
                calls.push(parent);
            }
        }
    }
    let base = complexity(p, weights);
    let own_key = p.canonical_key(lib);
    let mut out = Vec::new();
    for path in calls {
        let Some(Expr::FuncCall { func, args }) = p.at(&path) else { continue };
        let dims: Option<Vec<usize>> = args
            .iter()
            .map(|a| match a {
                Expr::VarRef { dim, .. } | Expr::ParamRef { dim, .. } => Some(*dim),
                _ => None,
            })
            .collect();
        let Some(dims) = dims else { continue };
        let Some(out_dim) = lib.get(func).and_then(|f| f.result_dim(&dims)) else { continue };
        let n_vars = args.iter().filter(|a| matches!(a, Expr::VarRef { .. })).count();
        for f in lib.iter().filter(|f| f.arity() == args.len()) {
            for sig in f.signatures(out_dim) {
                for mask in (0..(1usize << sig.len())).filter(|m| m.count_ones() as usize == n_vars) {
                    let options: Vec<Vec<Expr>> = sig
                        .iter()
                        .enumerate()
                        .map(|(i, &d)| {
                            if mask >> i & 1 == 1 {
                                schema.vars_of_dim(d).iter().map(|v| Expr::var(v, d)).collect()
                            } else {
                                vec![Expr::param(&format!("__rw{i}"), d)]
                            }
                        })
                        .collect();
                    for choice in product(&options) {
                        let mut q = p.clone();
                        for (i, &d) in sig.iter().enumerate() {
                            if mask >> i & 1 == 0 {
                                q.params.insert(format!("__rw{i}"), vec![0.0; d]);
                            }
                        }
                        q.set_node(&path, Expr::call(f.symbol(), choice));
                        q.renumber_params();
                        if q.typecheck(schema, lib).is_ok()
                            && complexity(&q, weights) == base
                            && q.canonical_key(lib) != own_key
                        {
                            out.push(q);
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub iteration: usize,
    pub queue: usize,
    pub score: f64,
    pub expanded: String,
    pub leaf: String,
    pub children: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub rank: usize,
    pub id: usize,
    pub parent: Option<usize>,
    pub program: String,
    pub inlined: String,
    pub params: BTreeMap<String, Vec<f64>>,
    pub loss: f64,
    pub complexity: f64,
    pub score: f64,
    pub status: String,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub accepted: bool,
    pub iterations: usize,
    pub evaluated: usize,
    /// Number of queue pushes whose `f_total = C + L` check passed.
    pub push_checks: usize,
    pub e_acc: f64,
    pub e_max: f64,
    pub ranked: Vec<CandidateSummary>,
}

impl SearchReport {
    pub fn best(&self) -> Option<&CandidateSummary> {
        self.ranked.first()
    }
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    score: f64,
    complexity: f64,
    seq: usize,
    id: usize,
    rank: usize,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    // Reversed so the max-heap pops the lowest score, then the lowest
    // complexity, then the earliest push.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(other.complexity.total_cmp(&self.complexity))
            .then(other.seq.cmp(&self.seq))
    }
}

struct Search<'a> {
    machine: Machine<'a>,
    idx: KdIndex<'a>,
    cfg: &'a SearchConfig,
    optim: OptimConfig,
    pool: Pool,
    arena: Vec<Candidate>,
    heap: BinaryHeap<Entry>,
    seen: HashSet<String>,
    seq: usize,
    push_checks: usize,
}

impl<'a> Search<'a> {
    fn candidate(&self, id: usize, parent: Option<usize>, opt: Optimized, executed_len: usize) -> Candidate {
        let complexity = complexity(&opt.program, &self.cfg.weights);
        let scores = leaf_scores(&opt.program, &opt.grads, opt.status, executed_len, self.machine.trace, self.machine.spec);
        let leaf_order = rank_leaves(scores, &mut stream(self.cfg.seed, id, 0));
        Candidate {
            id,
            parent,
            loss: opt.loss,
            complexity,
            score: complexity + opt.loss,
            status: opt.status,
            executed_len,
            grads: opt.grads,
            failed: opt.failed,
            program: opt.program,
            leaf_order,
        }
    }

    fn push(&mut self, id: usize, rank: usize) {
        let c = &self.arena[id];
        assert!(c.score == c.complexity + c.loss, "f_total must equal C + L");
        self.push_checks += 1;
        self.heap.push(Entry { score: c.score, complexity: c.complexity, seq: self.seq, id, rank });
        self.seq += 1;
    }

    /// Replace accepted candidate `id` by the accepted program of smallest
    /// parameter norm among its single-call rewrites, until none is
    /// smaller. When every variable is read once, a trace cannot tell
    /// `(+ a p)` from `(- p b)`; this keeps the reading with the smallest
    /// constants.
    fn settle(&mut self, mut id: usize, lib: &FunctionLibrary, schema: &Schema, e_acc: f64) -> usize {
        for _ in 0..64 {
            let base = param_norm(&self.arena[id].program);
            let children = rewrites(&self.arena[id].program, lib, schema, &self.cfg.weights)
                .into_iter()
                .map(|program| Child { program, free_vars: Vec::new() })
                .collect();
            let mut best: Option<(f64, Optimized, usize)> = None;
            for (opt, len) in self.optimise_batch(children) {
                let ok = !opt.failed && opt.status == Status::Completed && opt.loss <= e_acc;
                let norm = param_norm(&opt.program);
                if ok && norm < base && best.as_ref().is_none_or(|(n, _, _)| norm < *n) {
                    best = Some((norm, opt, len));
                }
            }
            let Some((_, opt, len)) = best else { break };
            let next = self.arena.len();
            let c = self.candidate(next, Some(id), opt, len);
            self.arena.push(c);
            self.push(next, 0);
            id = next;
        }
        id
    }

    fn optimise_batch(&self, children: Vec<Child>) -> Vec<(Optimized, usize)> {
        let machine = self.machine;
        let idx = &self.idx;
        let optim = &self.optim;
        self.pool.map(children, |ch| {
            let opt = optimize(&ch.program, &ch.free_vars, &machine, idx, optim);
            let len = if opt.failed {
                0
            } else {
                machine.execute(&opt.program).map_or(0, |e| e.executed_len)
            };
            (opt, len)
        })
    }
}

/// Run A* from the empty program until a candidate with loss `≤ e_acc`
/// is popped, the queue empties, or `outer_budget` expansions are spent.
pub fn induce(
    trace: &ObservationTrace,
    spec: &ErrorSpec,
    lib: &FunctionLibrary,
    cfg: &SearchConfig,
    mut on_progress: impl FnMut(&Progress),
) -> SearchReport {
    let spec = spec.clone().calibrated(trace);
    let mut optim = cfg.optim.clone();
    if optim.tol <= 0.0 {
        optim.tol = 1e-3 * spec.e_acc;
    }
    let mut s = Search {
        machine: Machine::new(trace, &spec, lib),
        idx: KdIndex::new(trace),
        cfg,
        optim,
        pool: Pool::new(cfg.workers),
        arena: Vec::new(),
        heap: BinaryHeap::new(),
        seen: HashSet::new(),
        seq: 0,
        push_checks: 0,
    };

    let policy = cfg.policy.unwrap_or_else(|| trace.schema().default_policy());
    let root = Program::empty(policy);
    s.seen.insert(root.canonical_key(lib));
    let (opt, len) = s.optimise_batch(vec![Child { program: root, free_vars: Vec::new() }]).remove(0);
    let c = s.candidate(0, None, opt, len);
    s.arena.push(c);
    s.push(0, 0);

    let mut iterations = 0;
    let mut accepted = None;
    while let Some(entry) = s.heap.pop() {
        if s.arena[entry.id].accepted(spec.e_acc) {
            accepted = Some(entry.id);
            break;
        }
        if iterations >= cfg.outer_budget {
            s.heap.push(entry);
            break;
        }
        iterations += 1;

        let parent = entry.id;
        let leaf = s.arena[parent].leaf_order[entry.rank].clone();
        let mut rng = stream(cfg.seed, parent, entry.rank + 1);
        let children: Vec<Child> = expand(&s.arena[parent].program, &leaf, lib, trace.schema(), cfg.init_variance, &mut rng)
            .into_iter()
            .filter(|ch| s.seen.insert(ch.program.canonical_key(lib)))
            .collect();
        let n_children = children.len();
        for (opt, len) in s.optimise_batch(children) {
            if opt.failed {
                continue;
            }
            if opt.snaps > 0 && !s.seen.insert(opt.program.canonical_key(lib)) {
                continue;
            }
            let id = s.arena.len();
            let c = s.candidate(id, Some(parent), opt, len);
            s.arena.push(c);
            s.push(id, 0);
        }
        if entry.rank + 1 < s.arena[parent].leaf_order.len() {
            s.push(parent, entry.rank + 1);
        }
        on_progress(&Progress {
            iteration: iterations,
            queue: s.heap.len(),
            score: s.arena[parent].score,
            expanded: s.arena[parent].program.to_string(),
            leaf: match &leaf {
                LeafPath::Node(p) => p.to_string(),
                LeafPath::BodySlot => "body".into(),
            },
            children: n_children,
        });
    }

    if let Some(id) = accepted.filter(|_| policy == ExecPolicy::SinglePass) {
        accepted = Some(s.settle(id, lib, trace.schema(), spec.e_acc));
    }

    let mut ranked_ids = Vec::new();
    if let Some(id) = accepted {
        ranked_ids.push(id);
        let mut keys = HashSet::from([s.arena[id].program.canonical_key(lib)]);
        while ranked_ids.len() < cfg.best_k {
            let Some(e) = s.heap.pop() else { break };
            let c = &s.arena[e.id];
            if !c.program.is_empty() && keys.insert(c.program.canonical_key(lib)) {
                ranked_ids.push(e.id);
            }
        }
    } else {
        // The empty program explains nothing; it is reported only when nothing
        // else was evaluated.
        let mut order: Vec<&Candidate> = s.arena.iter().filter(|c| !c.failed).collect();
        order.sort_by(|a, b| {
            (a.program.is_empty().cmp(&b.program.is_empty()))
                .then(a.score.total_cmp(&b.score))
                .then(a.complexity.total_cmp(&b.complexity))
                .then(a.id.cmp(&b.id))
        });
        ranked_ids.extend(order.iter().take(cfg.best_k).map(|c| c.id));
    }

    let ranked = ranked_ids
        .iter()
        .enumerate()
        .map(|(rank, &id)| {
            let c = &s.arena[id];
            CandidateSummary {
                rank: rank + 1,
                id,
                parent: c.parent,
                program: c.program.to_string(),
                inlined: c.program.inlined().to_string(),
                params: c.program.params.clone(),
                loss: c.loss,
                complexity: c.complexity,
                score: c.score,
                status: match c.status {
                    Status::Completed => "completed".into(),
                    Status::AbortedAt(t) => format!("aborted at {t}"),
                },
                accepted: c.accepted(spec.e_acc),
            }
        })
        .collect();

    SearchReport {
        accepted: accepted.is_some(),
        iterations,
        evaluated: s.arena.len(),
        push_checks: s.push_checks,
        e_acc: spec.e_acc,
        e_max: spec.e_max,
        ranked,
    }
}

/// Grammar conventions for [`count_programs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthConvention {
    /// Depth measured from the action call (a bare action is depth 1).
    Program,
    /// Depth of the action's argument expression (a bare leaf is depth 0).
    Expression,
}

impl std::str::FromStr for DepthConvention {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "program" => Ok(Self::Program),
            "expression" => Ok(Self::Expression),
            other => Err(format!("unknown depth convention `{other}`")),
        }
    }
}

/// Number of distinct typechecked programs of depth at most `max_depth`
/// with a body of at most one action call.
///
/// A leaf is one parameter or one of the schema variables of the right
/// dimension; an inner node is a library function over one of its
/// argument signatures, with argument order significant. The empty program
/// is included. Saturates at `u128::MAX`.
pub fn count_programs(schema: &Schema, lib: &FunctionLibrary, max_depth: usize, convention: DepthConvention) -> u128 {
    let expr_depth = match convention {
        DepthConvention::Program if max_depth == 0 => return 1,
        DepthConvention::Program => max_depth - 1,
        DepthConvention::Expression => max_depth,
    };
    let mut memo = BTreeMap::new();
    let mut total: u128 = 1;
    for &dim in schema.actions.values() {
        total = total.saturating_add(count_exprs(schema, lib, dim, expr_depth, &mut memo));
    }
    total
}

fn count_exprs(
    schema: &Schema,
    lib: &FunctionLibrary,
    dim: usize,
    depth: usize,
    memo: &mut BTreeMap<(usize, usize), u128>,
) -> u128 {
    if let Some(&n) = memo.get(&(dim, depth)) {
        return n;
    }
    let mut n = 1 + schema.vars_of_dim(dim).len() as u128;
    if depth > 0 {
        for f in lib.iter() {
            for sig in f.signatures(dim) {
                let mut prod: u128 = 1;
                for &d in &sig {
                    prod = prod.saturating_mul(count_exprs(schema, lib, d, depth - 1, memo));
                }
                n = n.saturating_add(prod);
            }
        }
    }
    memo.insert((dim, depth), n);
    n
}
