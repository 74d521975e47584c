//! `progind`: generate traces, induce programs, evaluate them and count
//! the search space.

use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use progind::config::RunConfig;
use progind::domains::{
    generate_demo, generate_paddle_trace, paddle_schema, simulate_second_order, DemoScenario, PaddlePolicy,
    SecondOrderSystem,
};
use progind::report;
use progind::search::{count_programs, induce, DepthConvention};
use progind::{FunctionLibrary, Machine, ObservationTrace, Program, Schema, Status};

#[derive(Parser)]
#[command(name = "progind", version, about = "Induce programs that explain state/action traces")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a trace file.
    Gen(GenArgs),
    /// Search for a program that explains a trace.
    Induce(InduceArgs),
    /// Run one program against a trace and print per-step errors.
    Eval(EvalArgs),
    /// Count the programs up to a given depth.
    Count(CountArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Domain {
    Pendulum,
    Oscillator,
    SecondOrder,
    Paddle,
    Demo,
}

#[derive(Args)]
struct GenArgs {
    domain: Domain,
    /// Output file; standard output when omitted.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    k1: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    k2: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    x0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    v0: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    dt: Option<f64>,
    /// Number of steps (second-order systems and paddle episodes).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of cubes in a demonstration tower (2 to 5).
    #[arg(long, default_value_t = 3)]
    cubes: usize,
    /// Standard deviation of noise on recorded demonstration positions.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    #[arg(long, allow_hyphen_values = true)]
    c_agent: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    c_ball: Option<f64>,
    /// Round paddle moves to -1, 0 or 1.
    #[arg(long)]
    clip: bool,
}

/// Error spec selection shared by `induce` and `eval`.
#[derive(Args)]
struct SpecArgs {
    /// continuous, continuous-sq or demo.
    #[arg(long)]
    spec: Option<String>,
    #[arg(long)]
    d_max: Option<f64>,
    #[arg(long)]
    e_max: Option<f64>,
    #[arg(long)]
    e_acc: Option<f64>,
    /// repeat, single or auto.
    #[arg(long)]
    policy: Option<String>,
}

#[derive(Args)]
struct InduceArgs {
    trace: PathBuf,
    /// `key = value` file; flags given here override it.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    spec: SpecArgs,
    /// Three complexity weights: depth, parameters, variable reads.
    #[arg(long)]
    weights: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    inner_budget: Option<usize>,
    #[arg(long)]
    outer_budget: Option<usize>,
    #[arg(long)]
    best_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Optimisation threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    init_variance: Option<f64>,
    /// Write line-delimited JSON records here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Print one JSON record per expansion to standard error.
    #[arg(long)]
    progress: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Program text, e.g. `(accel (+ (* -9.8 x) (* -0.1 v)))`.
    program: String,
    trace: PathBuf,
    #[command(flatten)]
    spec: SpecArgs,
}

#[derive(Args)]
struct CountArgs {
    /// Take the schema from this trace file.
    #[arg(long, conflicts_with = "domain")]
    trace: Option<PathBuf>,
    /// Take the schema of a built-in domain.
    #[arg(long)]
    domain: Option<Domain>,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value = "expression")]
    convention: String,
}

fn read_trace(path: &Path) -> Result<ObservationTrace> {
    let f = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    ObservationTrace::read_from(BufReader::new(f)).with_context(|| format!("cannot read trace {}", path.display()))
}

fn write_out(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn gen(a: &GenArgs) -> Result<()> {
    let trace = match a.domain {
        Domain::Pendulum | Domain::Oscillator | Domain::SecondOrder => {
            let mut sys = match a.domain {
                Domain::Pendulum => SecondOrderSystem::pendulum(),
                Domain::Oscillator => SecondOrderSystem::oscillator(),
                _ => match (a.k1, a.k2) {
                    (Some(k1), Some(k2)) => SecondOrderSystem::new(k1, k2),
                    _ => bail!("second-order needs --k1 and --k2"),
                },
            };
            sys.k1 = a.k1.unwrap_or(sys.k1);
            sys.k2 = a.k2.unwrap_or(sys.k2);
            sys.x0 = a.x0.unwrap_or(sys.x0);
            sys.v0 = a.v0.unwrap_or(sys.v0);
            sys.dt = a.dt.unwrap_or(sys.dt);
            sys.steps = a.steps.unwrap_or(sys.steps);
            simulate_second_order(&sys)?
        }
        Domain::Paddle => {
            let d = PaddlePolicy::default();
            let policy = PaddlePolicy {
                c_agent: a.c_agent.unwrap_or(d.c_agent),
                c_ball: a.c_ball.unwrap_or(d.c_ball),
                clip: a.clip,
            };
            generate_paddle_trace(&policy, a.steps.unwrap_or(200), a.seed)?
        }
        Domain::Demo => {
            let mut scn = DemoScenario::tower(a.cubes, a.seed)?;
            scn.jitter = a.jitter;
            generate_demo(&scn)?
        }
    };
    write_out(a.out.as_deref(), &trace.to_text())
}

fn apply_spec(cfg: &mut RunConfig, s: &SpecArgs) -> Result<()> {
    let pairs = [
        ("spec", s.spec.clone()),
        ("d_max", s.d_max.map(|v| v.to_string())),
        ("e_max", s.e_max.map(|v| v.to_string())),
        ("e_acc", s.e_acc.map(|v| v.to_string())),
        ("policy", s.policy.clone()),
    ];
    for (k, v) in pairs {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    Ok(())
}

fn run_induce(a: &InduceArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p).with_context(|| format!("config {}", p.display()))?,
        None => RunConfig::default(),
    };
    apply_spec(&mut cfg, &a.spec)?;
    let pairs = [
        ("weights", a.weights.clone()),
        ("lr", a.lr.map(|v| v.to_string())),
        ("inner_budget", a.inner_budget.map(|v| v.to_string())),
        ("outer_budget", a.outer_budget.map(|v| v.to_string())),
        ("best_k", a.best_k.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("workers", a.workers.map(|v| v.to_string())),
        ("init_variance", a.init_variance.map(|v| v.to_string())),
    ];
    for (k, v) in pairs {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }

    let trace = read_trace(&a.trace)?;
    let spec = cfg.error_spec(&trace);
    let lib = FunctionLibrary::standard();
    let started = Instant::now();
    let mut progress = Vec::new();
    let result = induce(&trace, &spec, &lib, &cfg.search_config(), |p| {
        if a.progress {
            eprintln!("{}", report::progress_line(p));
        }
        progress.push(p.clone());
    });
    let wall = started.elapsed();
    if let Some(path) = &a.report {
        fs::write(path, report::to_jsonl(&progress, &result))
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    print!("{}", report::summary(&result, wall));
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let mut cfg = RunConfig::default();
    apply_spec(&mut cfg, &a.spec)?;
    let trace = read_trace(&a.trace)?;
    let spec = cfg.error_spec(&trace).calibrated(&trace);
    let lib = FunctionLibrary::standard();
    let policy = cfg.policy.or(Some(trace.schema().default_policy()));
    let program = Program::parse(&a.program, trace.schema(), &lib, policy)?;
    let ex = Machine::new(&trace, &spec, &lib).execute(&program)?;

    let mut out = String::new();
    let mut matched = 0;
    for e in &ex.chi.emitted {
        let Some(step) = trace.steps().get(e.t) else { continue };
        if step.action == e.action {
            matched += 1;
        }
        out.push_str(&format!(
            "t={} {}{:?} observed {}{:?} sigma {:.6e}\n",
            e.t + 1,
            e.action,
            e.theta_hat,
            step.action,
            step.theta,
            e.sigma
        ));
    }
    let status = match ex.status {
        Status::Completed => "completed".to_string(),
        Status::AbortedAt(t) => format!("aborted at {t}"),
    };
    out.push_str(&format!(
        "loss {:.9e}  status {status}  actions {} of {} observed, {matched} names matched  e_max {:.4e}\n",
        ex.loss,
        ex.executed_len,
        trace.len(),
        spec.e_max
    ));
    write_out(None, &out)
}

fn domain_schema(d: Domain) -> Schema {
    match d {
        Domain::Pendulum | Domain::Oscillator | Domain::SecondOrder => SecondOrderSystem::schema(),
        Domain::Paddle => paddle_schema(),
        Domain::Demo => DemoScenario::tower(3, 0).expect("valid tower").schema(),
    }
}

fn run_count(a: &CountArgs) -> Result<()> {
    let convention: DepthConvention = a.convention.parse().map_err(anyhow::Error::msg)?;
    let schema = match (&a.trace, a.domain) {
        (Some(p), _) => read_trace(p)?.schema().clone(),
        (None, Some(d)) => domain_schema(d),
        (None, None) => SecondOrderSystem::schema(),
    };
    let lib = FunctionLibrary::standard();
    let n = count_programs(&schema, &lib, a.depth, convention);
    let funcs: Vec<&str> = lib.iter().map(|f| f.symbol()).collect();
    let vars: Vec<String> = schema.var_names().map(|v| format!("{v}:{}", schema.var_dim(v).unwrap_or(0))).collect();
    let actions: Vec<String> = schema.actions.iter().map(|(a, d)| format!("{a}:{d}")).collect();
    println!("{n}");
    println!(
        "grammar: one action call over an expression tree; leaves are a parameter or a variable of matching \
         dimension; inner nodes are {{{}}} over every typed signature, argument order significant; empty program \
         included; depth convention {}",
        funcs.join(" "),
        a.convention
    );
    println!("variables: {}  actions: {}", vars.join(" "), actions.join(" "));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.cmd {
        Command::Gen(a) => gen(a),
        Command::Induce(a) => run_induce(a),
        Command::Eval(a) => run_eval(a),
        Command::Count(a) => run_count(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
