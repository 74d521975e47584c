//! Trace generators: a damped second-order system, a scripted paddle
//! controller and pick/place tower demonstrations.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::trace::{ErrorSpec, ObservationTrace, Schema, Step, TraceError};

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("move references unknown cube `{0}`")]
    UnknownCube(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// `ẍ = k1·x + k2·ẋ`, recorded as `accel(θ)` over state `{x, v}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderSystem {
    pub k1: f64,
    pub k2: f64,
    pub x0: f64,
    pub v0: f64,
    pub dt: f64,
    pub steps: usize,
}

impl SecondOrderSystem {
    /// One second at 100 Hz from rest at `x = 1`.
    pub fn new(k1: f64, k2: f64) -> Self {
        Self { k1, k2, x0: 1.0, v0: 0.0, dt: 0.01, steps: 100 }
    }

    pub fn pendulum() -> Self {
        Self::new(-9.8, -0.1)
    }

    pub fn oscillator() -> Self {
        Self::new(-1.0, -0.2)
    }

    pub fn schema() -> Schema {
        Schema::new([("v".to_string(), 1), ("x".to_string(), 1)], [("accel".to_string(), 1)])
    }

    /// Semi-implicit Euler: velocity first, then position with the new
    /// velocity. Returns the acceleration used and the next state.
    pub fn step(&self, x: f64, v: f64) -> (f64, f64, f64) {
        let a = self.k1 * x + self.k2 * v;
        let v1 = v + a * self.dt;
        (a, x + v1 * self.dt, v1)
    }

    fn validate(&self) -> Result<(), DomainError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(DomainError::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if self.steps == 0 {
            return Err(DomainError::InvalidParameter("steps must be at least 1".into()));
        }
        let finite = [self.k1, self.k2, self.x0, self.v0].iter().all(|c| c.is_finite());
        if !finite {
            return Err(DomainError::InvalidParameter("coefficients and initial state must be finite".into()));
        }
        Ok(())
    }
}

/// Each step records the pre-step state and the acceleration applied.
pub fn simulate_second_order(sys: &SecondOrderSystem) -> Result<ObservationTrace, DomainError> {
    sys.validate()?;
    let (mut x, mut v) = (sys.x0, sys.v0);
    let mut steps = Vec::with_capacity(sys.steps);
    for _ in 0..sys.steps {
        let (a, x1, v1) = sys.step(x, v);
        steps.push(Step { state: vec![vec![v], vec![x]], action: "accel".into(), theta: vec![a] });
        x = x1;
        v = v1;
    }
    Ok(ObservationTrace::new(SecondOrderSystem::schema(), steps)?)
}

/// Stand-in for a learnt paddle policy: `θ = c_agent·agent + c_ball·ball`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PaddlePolicy {
    pub c_agent: f64,
    pub c_ball: f64,
    /// Round θ to the discrete moves `{-1, 0, 1}`.
    pub clip: bool,
}

impl Default for PaddlePolicy {
    fn default() -> Self {
        Self { c_agent: -0.31, c_ball: 0.34, clip: false }
    }
}

impl PaddlePolicy {
    pub fn act(&self, agent: f64, ball: f64) -> f64 {
        let raw = self.c_agent * agent + self.c_ball * ball;
        if self.clip {
            if raw > 0.5 {
                1.0
            } else if raw < -0.5 {
                -1.0
            } else {
                0.0
            }
        } else {
            raw
        }
    }
}

/// Height of the paddle court; all positions stay in `[0, COURT]`.
pub const COURT: f64 = 10.0;

pub fn paddle_schema() -> Schema {
    Schema::new(
        [("agent".to_string(), 1), ("ball".to_string(), 1), ("opponent".to_string(), 1)],
        [("move".to_string(), 1)],
    )
}

/// Vertical positions of agent, ball and opponent over one episode. The
/// ball bounces between the court walls at a seeded speed; the agent
/// moves by `θ` per step and the opponent trails the ball.
pub fn generate_paddle_trace(policy: &PaddlePolicy, steps: usize, seed: u64) -> Result<ObservationTrace, DomainError> {
    if !(policy.c_agent.is_finite() && policy.c_ball.is_finite()) {
        return Err(DomainError::InvalidParameter("gains must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agent = rng.random_range(2.0..8.0);
    let mut ball = rng.random_range(1.0..9.0);
    let mut opponent = rng.random_range(2.0..8.0);
    let mut vy = rng.random_range(0.15..0.35) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };

    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let theta = policy.act(agent, ball);
        out.push(Step {
            state: vec![vec![agent], vec![ball], vec![opponent]],
            action: "move".into(),
            theta: vec![theta],
        });
        agent = (agent + theta).clamp(0.0, COURT);
        opponent = (opponent + 0.5 * (ball - opponent)).clamp(0.0, COURT);
        ball += vy;
        if !(0.0..=COURT).contains(&ball) {
            vy = -vy;
            ball = ball.clamp(0.0, COURT);
        }
    }
    Ok(ObservationTrace::new(paddle_schema(), out)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// `pos(reference) + offset`, with the reference read when the place
    /// happens.
    OnTop { reference: String, offset: [f64; 2] },
    Absolute([f64; 2]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Move {
    pub cube: String,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoScenario {
    pub cubes: Vec<(String, [f64; 2])>,
    pub moves: Vec<Move>,
    /// Arena diagonal; the largest error a wrong action can have.
    pub d_max: f64,
    /// Standard deviation of Gaussian noise on recorded positions.
    pub jitter: f64,
    pub seed: u64,
}

/// Side length of the square demonstration arena.
pub const ARENA: f64 = 10.0;

/// Abort threshold for demonstrations: a quarter of the spacing between
/// table slots. A pick or place further off than this addresses the
/// wrong cube.
pub const DEMO_E_MAX: f64 = 0.5;

impl DemoScenario {
    /// `n` cubes resting on the table at least two units apart, stacked
    /// one by one onto the first cube. Each placement is offset from the
    /// current top cube by roughly `[-0.05, 1.17]`.
    pub fn tower(n: usize, seed: u64) -> Result<Self, DomainError> {
        if !(2..=5).contains(&n) {
            return Err(DomainError::InvalidParameter(format!("tower needs 2 to 5 cubes, got {n}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Five slots of width 2 across the arena, shuffled and shaken.
        let mut slots: Vec<usize> = (0..5).collect();
        for i in (1..slots.len()).rev() {
            slots.swap(i, rng.random_range(0..=i));
        }
        let cubes: Vec<(String, [f64; 2])> = (0..n)
            .map(|i| {
                let x = 1.0 + 2.0 * slots[i] as f64 + rng.random_range(0.0..0.1);
                (format!("c{}", i + 1), [x, 0.5])
            })
            .collect();
        let moves = (1..n)
            .map(|i| Move {
                cube: cubes[i].0.clone(),
                target: Target::OnTop {
                    reference: cubes[i - 1].0.clone(),
                    offset: [-0.05 + rng.random_range(-0.05..0.05), 1.17 + rng.random_range(-0.03..0.03)],
                },
            })
            .collect();
        Ok(Self { cubes, moves, d_max: ARENA * 2f64.sqrt(), jitter: 0.0, seed })
    }

    /// The `demo` error spec for this arena with [`DEMO_E_MAX`].
    pub fn error_spec(&self) -> ErrorSpec {
        ErrorSpec::demo(self.d_max).with_e_max(DEMO_E_MAX)
    }

    pub fn schema(&self) -> Schema {
        Schema::new(
            self.cubes.iter().map(|(name, _)| (name.clone(), 2)),
            [("pick".to_string(), 2), ("place".to_string(), 2)],
        )
    }
}

/// Alternating `pick(pos(cube))`, `place(target)` pairs. Every step
/// records all cube positions before its action.
pub fn generate_demo(scn: &DemoScenario) -> Result<ObservationTrace, DomainError> {
    let mut pos: BTreeMap<String, [f64; 2]> = scn.cubes.iter().cloned().collect();
    if pos.len() != scn.cubes.len() {
        return Err(DomainError::InvalidParameter("duplicate cube name".into()));
    }
    if !(scn.jitter >= 0.0 && scn.jitter.is_finite()) {
        return Err(DomainError::InvalidParameter(format!("jitter must be non-negative, got {}", scn.jitter)));
    }
    let noise = Normal::new(0.0, scn.jitter).expect("checked above");
    let mut rng = ChaCha8Rng::seed_from_u64(scn.seed ^ 0x5eed);
    let mut record = |pos: &BTreeMap<String, [f64; 2]>| -> Vec<Vec<f64>> {
        pos.values()
            .map(|p| {
                if scn.jitter > 0.0 {
                    p.iter().map(|c| c + noise.sample(&mut rng)).collect()
                } else {
                    p.to_vec()
                }
            })
            .collect()
    };

    let mut steps = Vec::with_capacity(2 * scn.moves.len());
    for m in &scn.moves {
        let from = *pos.get(&m.cube).ok_or_else(|| DomainError::UnknownCube(m.cube.clone()))?;
        steps.push(Step { state: record(&pos), action: "pick".into(), theta: from.to_vec() });
        let to = match &m.target {
            Target::OnTop { reference, offset } => {
                let r = pos.get(reference).ok_or_else(|| DomainError::UnknownCube(reference.clone()))?;
                [r[0] + offset[0], r[1] + offset[1]]
            }
            Target::Absolute(p) => *p,
        };
        steps.push(Step { state: record(&pos), action: "place".into(), theta: to.to_vec() });
        pos.insert(m.cube.clone(), to);
    }
    Ok(ObservationTrace::new(scn.schema(), steps)?)
}
