//! Finite-difference and invariant suites runnable outside the test harness,
//! plus the brute-force oracles they compare against.

mod gradients;
mod invariants;
pub mod oracles;

pub use gradients::{composite_check, gradient_suite, GradOutcome, COMPOSITE_TOL, OP_TOL};
pub use invariants::{
    invariant_suite, metric_disagreements, momentum_trace_error, topk_disagreements, InvariantOutcome,
};
