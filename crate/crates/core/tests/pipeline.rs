use progind::domains::*;
use progind::report::to_jsonl;
use progind::search::*;
use progind::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn induce_with(trace: &ObservationTrace, spec: &ErrorSpec, workers: usize) -> (SearchReport, String) {
    let lib = FunctionLibrary::standard();
    let cfg = SearchConfig { workers, ..SearchConfig::default() };
    let mut progress = Vec::new();
    let report = induce(trace, spec, &lib, &cfg, |p| progress.push(p.clone()));
    let text = to_jsonl(&progress, &report);
    (report, text)
}

#[test]
fn accepted_candidate_re_executes_within_threshold() {
    let trace = simulate_second_order(&SecondOrderSystem::oscillator()).unwrap();
    let (report, _) = induce_with(&trace, &ErrorSpec::continuous(), 1);
    assert!(report.accepted);
    let best = report.best().unwrap();
    let lib = FunctionLibrary::standard();
    let mut p = Program::parse(&best.program, trace.schema(), &lib, None).unwrap();
    p.params = best.params.clone();
    let spec = ErrorSpec::continuous().with_e_acc(report.e_acc).with_e_max(report.e_max);
    let exec = execute(&p, &trace, &spec, &lib).unwrap();
    assert!(exec.completed());
    assert!(exec.loss <= report.e_acc);
    assert!((exec.loss - best.loss).abs() < 1e-12);
}

#[test]
fn parallel_and_serial_reports_match() {
    let trace = simulate_second_order(&SecondOrderSystem::oscillator()).unwrap();
    let (_, serial) = induce_with(&trace, &ErrorSpec::continuous(), 1);
    let (_, parallel) = induce_with(&trace, &ErrorSpec::continuous(), 0);
    assert_eq!(serial, parallel);
}

#[test]
fn single_move_demo_recovers_offset() {
    let scn = DemoScenario::tower(2, 3).unwrap();
    let trace = generate_demo(&scn).unwrap();
    let (report, _) = induce_with(&trace, &scn.error_spec(), 1);
    assert!(report.accepted);
    let best = report.best().unwrap();
    let Target::OnTop { reference, offset } = &scn.moves[0].target else { panic!("tower stacks") };
    assert_eq!(best.program, format!("(do (pick {}) (place (+ {reference} p0)))", scn.moves[0].cube));
    for (got, want) in best.params["p0"].iter().zip(offset) {
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }
}

#[test]
fn trace_text_round_trip() {
    let scn = DemoScenario::tower(3, 9).unwrap();
    let trace = generate_demo(&scn).unwrap();
    let back = ObservationTrace::parse(&trace.to_text()).unwrap();
    assert_eq!(back.schema(), trace.schema());
    assert_eq!(back.len(), trace.len());
    for (a, b) in back.steps().iter().zip(trace.steps()) {
        assert_eq!(a.action, b.action);
        for (x, y) in a.state.iter().flatten().chain(&a.theta).zip(b.state.iter().flatten().chain(&b.theta)) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }
}

/// Structural difference between a parent and one of its children,
/// ignoring parameter names and values: the number of parent leaves
/// replaced by a call whose arguments are all leaves, or `None` if the
/// trees differ in any other way.
fn grown_leaves(parent: &Expr, child: &Expr) -> Option<usize> {
    match (parent, child) {
        (Expr::ActionCall { name: a, arg: x }, Expr::ActionCall { name: b, arg: y }) if a == b => grown_leaves(x, y),
        (Expr::FuncCall { func: f, args: a }, Expr::FuncCall { func: g, args: b })
            if f == g && a.len() == b.len() =>
        {
            a.iter().zip(b).try_fold(0, |n, (x, y)| Some(n + grown_leaves(x, y)?))
        }
        (Expr::VarRef { name: a, .. }, Expr::VarRef { name: b, .. }) if a == b => Some(0),
        (Expr::ParamRef { .. }, Expr::ParamRef { .. }) => Some(0),
        (Expr::ConstVec(a), Expr::ConstVec(b)) if a == b => Some(0),
        (leaf, Expr::FuncCall { args, .. }) if leaf.is_leaf() && args.iter().all(Expr::is_leaf) => Some(1),
        _ => None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn children_grow_exactly_one_leaf(seed in any::<u64>(), which in 0usize..4) {
        let lib = FunctionLibrary::standard();
        let schema = SecondOrderSystem::schema();
        let text = ["(accel x)", "(accel p0)", "(accel (+ (* p0 x) v))", "(accel (- x (* p0 p1)))"][which];
        let parent = Program::parse(text, &schema, &lib, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for leaf in parent.leaf_slots() {
            for child in expand(&parent, &leaf, &lib, &schema, 0.1, &mut rng) {
                let c = &child.program;
                match leaf {
                    LeafPath::BodySlot => {
                        prop_assert_eq!(c.body.len(), parent.body.len() + 1);
                        prop_assert_eq!(c.body[..parent.body.len()].to_vec(), parent.body.clone());
                    }
                    LeafPath::Node(_) => {
                        prop_assert_eq!(c.body.len(), parent.body.len());
                        let grown: Option<usize> = parent.body.iter().zip(&c.body)
                            .try_fold(0, |n, (a, b)| Some(n + grown_leaves(a, b)?));
                        prop_assert_eq!(grown, Some(1), "{} -> {}", parent, c);
                    }
                }
                prop_assert!(c.typecheck(&schema, &lib).is_ok());
            }
        }
    }

    #[test]
    fn generator_law_explains_its_trace(k1 in -12.0..-0.5f64, k2 in -1.0..0.0f64, x0 in 0.2..2.0f64) {
        let sys = SecondOrderSystem { x0, ..SecondOrderSystem::new(k1, k2) };
        let trace = simulate_second_order(&sys).unwrap();
        let lib = FunctionLibrary::standard();
        let spec = ErrorSpec::continuous().calibrated(&trace);
        let law = |a: f64, b: f64| {
            let p = Program::parse("(accel (+ (* p0 x) (* p1 v)))", trace.schema(), &lib, None)
                .unwrap()
                .with_param("p0", vec![a])
                .with_param("p1", vec![b]);
            execute(&p, &trace, &spec, &lib).unwrap().loss
        };
        prop_assert!(law(k1, k2) < 1e-9);
        prop_assert!(law(1.1 * k1, k2) > 1e-6);
    }
}
