//! Program induction over observed state/action traces.
//!
//! A program is a small arithmetic S-expression whose action calls are
//! replayed against a recorded trace. Parameters are fitted by reverse-mode
//! differentiation and AdaGrad; program structure is grown by A* search
//! that expands the leaf with the largest loss gradient.

pub mod autodiff;
pub mod config;
pub mod domains;
pub mod kdtree;
pub mod library;
pub mod machine;
pub mod optimizer;
pub mod par;
pub mod report;
pub mod search;
pub mod sexpr;
pub mod trace;

pub use library::FunctionLibrary;
pub use machine::{execute, Execution, KdIndex, Machine, Status};
pub use sexpr::{Expr, LeafPath, NodePath, Program};
pub use trace::{ErrorSpec, ExecPolicy, ObservationTrace, Schema, Step};
