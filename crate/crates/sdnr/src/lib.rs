//! Stochastic distribution network reconfiguration.
//!
//! Given a switched distribution feeder and a set of probability-weighted
//! operating scenarios (renewable output and load levels), this crate finds
//! a radial switch configuration that minimizes the expected active power
//! drawn from the substation.
//!
//! The crate is organized in five modules:
//!
//! * [`netgraph`] — the feeder graph: buses, switchable branches, switch
//!   configurations, radiality, loop bases and their maintenance, and the
//!   division of a loop into sub-paths at power-injecting buses;
//! * [`distflow`] — branch-flow power flow solvers (a backward/forward
//!   sweep for radial configurations, a damped Newton method for meshed
//!   ones) and the scenario-weighted stochastic wrapper;
//! * [`scenarios`] — time-series ingest, k-medoids scenario reduction, and
//!   the translation of capacity/load factors into per-bus injections;
//! * [`sbr`] — successive branch reduction: the one-stage and two-stage
//!   reconfiguration methods, simpler baselines, an exhaustive oracle, and
//!   exact radial-configuration counting;
//! * [`testgen`] — deterministic random instances for tests.
//!
//! The commonly used items are re-exported at the crate root.

pub mod distflow;
pub mod netgraph;
pub mod sbr;
pub mod scenarios;
pub mod testgen;

pub use distflow::{
    expected_loss, loop_injections, soc_exactness_residual, solve_opf_r, solve_sopf_r, LimitMode,
    LimitViolation, PowerFlowSolution, SolveError, SolverConfig, StochasticSolution, ViolationKind,
};
pub use netgraph::{
    divide_into_subpaths, find_loops, is_radial, update_loops_after_opening, Branch, BranchId, Bus,
    BusId, BusKind, GraphError, Loop, LoopStep, LoopUpdate, Network, SubPath, SubstationLimits,
    SwitchConfiguration, SwitchState,
};
pub use sbr::{
    baseline_one_stage, baseline_two_stage, candidate_set, candidate_set_cyclic, exhaustive_oracle,
    one_stage_sbr, spanning_tree_count, two_stage_sbr, CandidateEvaluation, CandidateReason,
    IterationTrace, OneStageResult, OracleInfo, ReconfigurationResult, SbrError, SolveStats,
};
pub use scenarios::{
    build_scenarios, ingest_csv, reduce_kmedoids, synthetic_table, BusAssignment, BusProfile,
    Clustering, ColumnMapping, FactorRow, IngestOutcome, PowerFactors, RejectedRow, Scenario,
    ScenarioError, ScenarioFactors, ScenarioInjection, ScenarioSet, TimeSeriesTable,
};
