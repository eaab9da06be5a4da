//! Scheduling of an EV fleet used as a battery energy storage system.
//!
//! The fleet covers committed energy volumes against intraday market prices.
//! Three solver families are provided: an exact backward dynamic program over
//! the per-EV action lattice (small instances), a restricted-action dynamic
//! program that only considers fleet-level charge/idle/discharge decisions,
//! and a learned kernel classifier that imitates the restricted-action
//! solver at a fraction of its run time.

pub mod fleet;
pub mod learner;
pub mod market;
pub mod oracle;
pub mod rollout;
pub mod sched;
pub mod testkit;

pub use fleet::{
    ConstraintLevel, Direction, EvSpec, EvState, FleetCtx, FleetError, FleetState, Level,
    PerEvAction, Violation, ViolationKind,
};
pub use learner::{extract_features, predict, select_features, train_svc, LearnError, SvcModel};
pub use market::{
    generate_scenario, ingest_prices, stage_cost, total_cost, CostBreakdown, GenParams,
    Granularity, MarketError, Scenario,
};
pub use oracle::{emit_milp_lp, enumerate, EnumerationOutcome};
pub use rollout::{benchmark, run_policy, EvalReport, PolicyKind, RolloutError, RunOptions};
pub use sched::{
    expand_aggregate, solve_approx, solve_exact, AggregateAction, Schedule, SolveError,
};
