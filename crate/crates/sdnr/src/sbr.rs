//! Successive branch reduction: choosing which switches to open.
//!
//! The reconfiguration problem is to pick a radial switch configuration
//! minimizing the expected substation active power over a scenario set.
//! This module provides:
//!
//! * [`one_stage_sbr`] — given a configuration whose closed subgraph
//!   contains exactly one loop, estimate flows once, divide the loop into
//!   sub-paths at its power-injecting buses, and evaluate a small
//!   flow-guided candidate set of branch openings;
//! * [`two_stage_sbr`] — open one branch per independent loop guided by a
//!   single all-closed flow estimate (stage one), then revisit each opened
//!   branch with [`one_stage_sbr`] (stage two);
//! * [`baseline_one_stage`] / [`baseline_two_stage`] — the same skeleton
//!   without sub-path division, using a cyclic candidate neighborhood;
//! * [`exhaustive_oracle`] — enumerate every radial configuration (guarded
//!   by the matrix-tree count) and return the true optimum;
//! * [`spanning_tree_count`] — exact radial-configuration count.
//!
//! All tie-breaks are by ascending branch id and all evaluation orders are
//! fixed, so every routine is deterministic.

use std::collections::BTreeMap;

use num_bigint::{BigInt, BigUint};
use num_traits::{One, Signed, Zero};
use rayon::prelude::*;
use thiserror::Error;

use crate::distflow::{
    loop_injections, solve_sopf_r, SolveError, SolverConfig, StochasticSolution,
};
use crate::netgraph::{
    divide_into_subpaths, find_loops, is_radial, loops_for_mask, update_loops_after_opening,
    BranchId, BusId, GraphError, Loop, LoopStep, Network, SubPath, SwitchConfiguration,
};
use crate::scenarios::ScenarioSet;

/// Errors from the reconfiguration routines.
#[derive(Debug, Error)]
pub enum SbrError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("base configuration must contain exactly one loop, found {found}")]
    BaseNotSingleLoop { found: usize },
    #[error("branch {0} is not on the path it should index")]
    CandidateNotOnPath(BranchId),
    #[error("loop generated by branch {0} has no switchable branch to open")]
    NoSwitchableCandidate(BranchId),
    #[error("no candidate configuration is feasible")]
    NoFeasibleCandidate,
    #[error("{count} radial configurations exceed the enumeration budget {budget}")]
    TreeBudgetExceeded { count: BigUint, budget: u64 },
    #[error(
        "enumerated {enumerated} radial configurations but the matrix-tree count is {counted}"
    )]
    EnumerationMismatch { counted: BigUint, enumerated: u64 },
    #[error("internal invariant violated: {0}")]
    Internal(&'static str),
}

/// Solver work counters. `opf_solves` counts individual per-scenario power
/// flows; the other two count whole scenario-set solves by purpose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SolveStats {
    /// Deterministic power flow solves attempted (one per scenario of
    /// every scenario-set solve).
    pub opf_solves: usize,
    /// Scenario-set solves used to estimate flows on a base configuration.
    pub sopf_flow_solves: usize,
    /// Scenario-set solves used to evaluate candidate configurations.
    pub sopf_candidate_solves: usize,
}

impl SolveStats {
    fn flow_solve(&mut self, scenario_count: usize) {
        self.sopf_flow_solves += 1;
        self.opf_solves += scenario_count;
    }

    fn candidate_solve(&mut self, scenario_count: usize) {
        self.sopf_candidate_solves += 1;
        self.opf_solves += scenario_count;
    }
}

/// How a branch entered a candidate set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateReason {
    /// The branch with the smallest expected absolute flow.
    MinFlow,
    /// Next branch along the traversal, after a forward-flowing minimum.
    Downstream,
    /// Previous branch along the traversal, after a backward-flowing
    /// minimum.
    Upstream,
}

/// Outcome of evaluating one candidate opening.
#[derive(Clone, Debug)]
pub struct CandidateEvaluation {
    pub branch: BranchId,
    /// Expected substation active power; `INFINITY` when infeasible.
    pub objective: f64,
    pub feasible: bool,
    /// Index of the sub-path that proposed the branch (zero for cyclic
    /// candidate sets).
    pub subpath: usize,
    pub reason: CandidateReason,
}

/// Record of one loop-refinement iteration inside a two-stage run.
#[derive(Clone, Debug)]
pub struct IterationTrace {
    /// Stage-one opening that was reconsidered in this iteration.
    pub reopened: BranchId,
    /// Power-injecting buses found on the reopened loop.
    pub injecting: Vec<BusId>,
    pub subpath_count: usize,
    pub evaluations: Vec<CandidateEvaluation>,
    /// Best feasible opening of this iteration, if any.
    pub chosen: Option<BranchId>,
    /// Objective of `chosen`; `INFINITY` when none was feasible.
    pub objective: f64,
}

/// Result of a single-loop refinement.
#[derive(Clone, Debug)]
pub struct OneStageResult {
    pub config: SwitchConfiguration,
    pub objective: f64,
    /// The branch the method decided to open.
    pub opened: BranchId,
    pub injecting: Vec<BusId>,
    pub subpath_count: usize,
    pub evaluations: Vec<CandidateEvaluation>,
    pub stats: SolveStats,
}

/// Exhaustive-search bookkeeping attached to oracle results.
#[derive(Clone, Debug)]
pub struct OracleInfo {
    /// Exact number of radial configurations (matrix-tree count).
    pub tree_count: BigUint,
    /// Configurations actually enumerated; must equal `tree_count`.
    pub enumerated: u64,
    /// Enumerated configurations whose evaluation failed.
    pub infeasible_skipped: u64,
}

/// Result of a full reconfiguration run.
#[derive(Clone, Debug)]
pub struct ReconfigurationResult {
    pub config: SwitchConfiguration,
    /// Expected substation active power of `config`.
    pub objective: f64,
    /// Stage-one opening per loop, in processing order.
    pub stage1_openings: Vec<BranchId>,
    /// Stage-two refinement traces, one per stage-one opening.
    pub iterations: Vec<IterationTrace>,
    pub stats: SolveStats,
    /// Set when the run had nothing to optimize or used a fallback.
    pub note: Option<String>,
    /// Present on results produced by [`exhaustive_oracle`].
    pub oracle: Option<OracleInfo>,
}

/// Flow-guided candidate set on a sub-path.
///
/// The set contains the pivot branch and, when the pivot's expected flow
/// (signed along the traversal direction, `expected_flow` indexed by branch
/// position in the network) is decisively nonzero, the switchable neighbor
/// branch the flow points toward. Neighbors beyond the sub-path boundary do
/// not exist; flows within `zero_tol` of zero yield the pivot alone.
pub fn candidate_set(
    net: &Network,
    sp: &SubPath,
    pivot: BranchId,
    expected_flow: &[f64],
    zero_tol: f64,
) -> Result<Vec<(BranchId, CandidateReason)>, SbrError> {
    let t = sp
        .branch_position(pivot)
        .ok_or(SbrError::CandidateNotOnPath(pivot))?;
    let next = |i: usize| -> Option<&LoopStep> { sp.steps().get(i + 1) };
    let prev = |i: usize| -> Option<&LoopStep> { i.checked_sub(1).map(|j| &sp.steps()[j]) };
    directional_candidates(
        net,
        sp.steps()[t],
        pivot,
        expected_flow,
        zero_tol,
        next(t),
        prev(t),
    )
}

/// Flow-guided candidate set on a whole loop, wrapping around its ends.
pub fn candidate_set_cyclic(
    net: &Network,
    lp: &Loop,
    pivot: BranchId,
    expected_flow: &[f64],
    zero_tol: f64,
) -> Result<Vec<(BranchId, CandidateReason)>, SbrError> {
    let t = lp
        .branch_position(pivot)
        .ok_or(SbrError::CandidateNotOnPath(pivot))?;
    let n = lp.len();
    let next = &lp.steps()[(t + 1) % n];
    let prev = &lp.steps()[(t + n - 1) % n];
    directional_candidates(
        net,
        lp.steps()[t],
        pivot,
        expected_flow,
        zero_tol,
        Some(next),
        Some(prev),
    )
}

fn directional_candidates(
    net: &Network,
    pivot_step: LoopStep,
    pivot: BranchId,
    expected_flow: &[f64],
    zero_tol: f64,
    next: Option<&LoopStep>,
    prev: Option<&LoopStep>,
) -> Result<Vec<(BranchId, CandidateReason)>, SbrError> {
    let e = net
        .branch_index(pivot)
        .ok_or(GraphError::ForeignLoop(pivot))?;
    let orientation = if pivot_step.forward { 1.0 } else { -1.0 };
    let signed = orientation * expected_flow[e];

    let mut out = vec![(pivot, CandidateReason::MinFlow)];
    let neighbor = if signed > zero_tol {
        next.map(|s| (s.branch, CandidateReason::Downstream))
    } else if signed < -zero_tol {
        prev.map(|s| (s.branch, CandidateReason::Upstream))
    } else {
        None
    };
    if let Some((id, reason)) = neighbor {
        if id != pivot {
            let idx = net.branch_index(id).ok_or(GraphError::ForeignLoop(id))?;
            if net.branches()[idx].switchable {
                out.push((id, reason));
            }
        }
    }
    Ok(out)
}

/// Switchable branch with the smallest expected absolute flow among the
/// steps; ties go to the lowest branch id.
fn min_abs_flow_branch(
    net: &Network,
    steps: &[LoopStep],
    expected_abs_flow: &[f64],
) -> Option<BranchId> {
    let mut best: Option<(f64, BranchId)> = None;
    for step in steps {
        let e = net.branch_index(step.branch)?;
        if !net.branches()[e].switchable {
            continue;
        }
        let value = expected_abs_flow[e];
        let better = match best {
            None => true,
            Some((bv, bid)) => value < bv || (value == bv && step.branch < bid),
        };
        if better {
            best = Some((value, step.branch));
        }
    }
    best.map(|(_, id)| id)
}

/// Evaluate one open set; solver failures make the candidate infeasible
/// rather than aborting the search.
fn evaluate_opening(
    net: &Network,
    open: &[BranchId],
    scenarios: &ScenarioSet,
    config: &SolverConfig,
    stats: &mut SolveStats,
) -> Result<(f64, bool), SbrError> {
    let cfg = SwitchConfiguration::opening(net, open)?;
    stats.candidate_solve(scenarios.len());
    match solve_sopf_r(net, &cfg, scenarios, config) {
        Ok(sol) => Ok((sol.expected_objective, true)),
        Err(_) => Ok((f64::INFINITY, false)),
    }
}

struct LoopExploration {
    injecting: Vec<BusId>,
    subpath_count: usize,
    evaluations: Vec<CandidateEvaluation>,
    best: Option<(BranchId, f64)>,
}

/// Shared core of [`one_stage_sbr`] and the stage-two iterations: explore
/// the unique loop of `base_open` and evaluate the flow-guided candidates.
fn explore_single_loop(
    net: &Network,
    base_open: &SwitchConfiguration,
    scenarios: &ScenarioSet,
    config: &SolverConfig,
    stats: &mut SolveStats,
) -> Result<LoopExploration, SbrError> {
    let mask = net.closed_mask(base_open)?;
    let loops = loops_for_mask(net, &mask)?;
    if loops.len() != 1 {
        return Err(SbrError::BaseNotSingleLoop { found: loops.len() });
    }
    let lp = &loops[0];

    stats.flow_solve(scenarios.len());
    let flows = solve_sopf_r(net, base_open, scenarios, config)?;

    let injections = loop_injections(net, lp, &flows)?;
    let mut injecting: Vec<BusId> = lp
        .buses()
        .iter()
        .zip(&injections)
        .filter(|(_, p)| **p > config.tolerance)
        .map(|(b, _)| *b)
        .collect();
    if injecting.is_empty() {
        // Degenerate loop with no net inflow anywhere: anchor the division
        // at the lowest-id loop bus so exactly one sub-path results.
        injecting.push(*lp.buses().iter().min().expect("loop has buses"));
    }
    let subpaths = divide_into_subpaths(lp, &injecting)?;

    let mut proposals: Vec<(BranchId, usize, CandidateReason)> = Vec::new();
    for (m, sp) in subpaths.iter().enumerate() {
        let Some(pivot) = min_abs_flow_branch(net, sp.steps(), &flows.expected_abs_flow) else {
            continue;
        };
        for (branch, reason) in
            candidate_set(net, sp, pivot, &flows.expected_flow, config.tolerance)?
        {
            if !proposals.iter().any(|(b, _, _)| *b == branch) {
                proposals.push((branch, m, reason));
            }
        }
    }
    if proposals.is_empty() {
        return Err(SbrError::NoSwitchableCandidate(lp.generator()));
    }

    let base_ids = base_open.open_ids();
    let mut evaluations = Vec::with_capacity(proposals.len());
    let mut best: Option<(BranchId, f64)> = None;
    for (branch, subpath, reason) in proposals {
        let mut open = base_ids.clone();
        open.push(branch);
        let (objective, feasible) = evaluate_opening(net, &open, scenarios, config, stats)?;
        evaluations.push(CandidateEvaluation {
            branch,
            objective,
            feasible,
            subpath,
            reason,
        });
        if feasible {
            let better = match best {
                None => true,
                Some((bid, bobj)) => objective < bobj || (objective == bobj && branch < bid),
            };
            if better {
                best = Some((branch, objective));
            }
        }
    }
    Ok(LoopExploration {
        injecting,
        subpath_count: subpaths.len(),
        evaluations,
        best,
    })
}

/// Refine a configuration whose closed subgraph contains exactly one loop.
///
/// One scenario-set solve estimates the expected flows; the loop is divided
/// into sub-paths at its power-injecting buses; each sub-path proposes its
/// minimum-flow switchable branch plus the neighbor the flow points toward;
/// every proposed opening is evaluated exactly and the best feasible one is
/// returned. At most two candidates arise per sub-path.
pub fn one_stage_sbr(
    net: &Network,
    base_open: &SwitchConfiguration,
    scenarios: &ScenarioSet,
    config: &SolverConfig,
) -> Result<OneStageResult, SbrError> {
    let mut stats = SolveStats::default();
    let ex = explore_single_loop(net, base_open, scenarios, config, &mut stats)?;
    let (opened, objective) = ex.best.ok_or(SbrError::NoFeasibleCandidate)?;
    let mut open = base_open.open_ids();
    open.push(opened);
    let cfg = SwitchConfiguration::opening(net, &open)?;
    Ok(OneStageResult {
        config: cfg,
        objective,
        opened,
        injecting: ex.injecting,
        subpath_count: ex.subpath_count,
        evaluations: ex.evaluations,
        stats,
    })
}

struct StageOnePlan {
    openings: Vec<BranchId>,
    /// The loop each opening was chosen from, as it looked at that moment.
    snapshots: Vec<Loop>,
}

/// Stage one: walk the loops in ascending generator order, opening the
/// minimum-expected-|flow| switchable branch of each and merging the
/// affected loops, all guided by one set of all-closed flows.
fn stage_one(
    net: &Network,
    loops: Vec<Loop>,
    flows: &StochasticSolution,
) -> Result<StageOnePlan, SbrError> {
    let mut current = loops;
    let mut openings = Vec::new();
    let mut snapshots = Vec::new();
    while let Some(lp) = current.first().cloned() {
        let pick = min_abs_flow_branch(net, lp.steps(), &flows.expected_abs_flow)
            .ok_or(SbrError::NoSwitchableCandidate(lp.generator()))?;
        openings.push(pick);
        snapshots.push(lp);
        let upd = update_loops_after_opening(net, &current, pick)?;
        if upd.opened_outside_any_loop || upd.loops.len() + 1 != current.len() {
            return Err(SbrError::Internal(
                "loop bookkeeping lost track of an opened branch",
            ));
        }
        current = upd.loops;
    }
    Ok(StageOnePlan {
        openings,
        snapshots,
    })
}

/// Two-stage successive branch reduction.
///
/// Stage one opens one branch per independent loop using a single all-closed
/// flow estimate. Stage two revisits each opened branch: it is re-closed
/// (recreating exactly one loop) and the single-loop refinement chooses the
/// best opening for that loop. The best configuration over all stage-two
/// iterations is returned; ties prefer the earliest iteration. A network
/// with no loops returns the all-closed configuration with a note.
pub fn two_stage_sbr(
    net: &Network,
    scenarios: &ScenarioSet,
    config: &SolverConfig,
) -> Result<ReconfigurationResult, SbrError> {
    let mut stats = SolveStats::default();
    let all_closed = SwitchConfiguration::all_closed(net);
    let loops = find_loops(net)?;

    stats.flow_solve(scenarios.len());
    let flows = solve_sopf_r(net, &all_closed, scenarios, config)?;
    if loops.is_empty() {
        return Ok(ReconfigurationResult {
            config: all_closed,
            objective: flows.expected_objective,
            stage1_openings: Vec::new(),
            iterations: Vec::new(),
            stats,
            note: Some(
                "network has no loops; the all-closed configuration is already radial".into(),
            ),
            oracle: None,
        });
    }

    let plan = stage_one(net, loops, &flows)?;
    let stage1_cfg = SwitchConfiguration::opening(net, &plan.openings)?;
    if !is_radial(net, &stage1_cfg)? {
        return Err(SbrError::Internal("stage-one configuration is not radial"));
    }

    let mut iterations = Vec::with_capacity(plan.openings.len());
    let mut best: Option<(usize, BranchId, f64)> = None;
    for (l, &reopened) in plan.openings.iter().enumerate() {
        let base_ids: Vec<BranchId> = plan
            .openings
            .iter()
            .copied()
            .filter(|id| *id != reopened)
            .collect();
        let base_open = SwitchConfiguration::opening(net, &base_ids)?;
        let ex = explore_single_loop(net, &base_open, scenarios, config, &mut stats)?;
        let (chosen, objective) = match ex.best {
            Some((b, o)) => (Some(b), o),
            None => (None, f64::INFINITY),
        };
        if let Some(b) = chosen {
            if best.is_none_or(|(_, _, bo)| objective < bo) {
                best = Some((l, b, objective));
            }
        }
        iterations.push(IterationTrace {
            reopened,
            injecting: ex.injecting,
            subpath_count: ex.subpath_count,
            evaluations: ex.evaluations,
            chosen,
            objective,
        });
    }

    let (best_l, best_branch, best_obj) = best.ok_or(SbrError::NoFeasibleCandidate)?;
    let mut open: Vec<BranchId> = plan
        .openings
        .iter()
        .copied()
        .filter(|id| *id != plan.openings[best_l])
        .collect();
    open.push(best_branch);
    let config_out = SwitchConfiguration::opening(net, &open)?;
    Ok(ReconfigurationResult {
        config: config_out,
        objective: best_obj,
        stage1_openings: plan.openings,
        iterations,
        stats,
        note: None,
        oracle: None,
    })
}

/// Single-loop baseline: no sub-path division. The pivot is the
/// minimum-expected-|flow| switchable branch of the whole loop and the
/// candidate neighborhood wraps cyclically, so at most two configurations
/// are evaluated.
pub fn baseline_one_stage(
    net: &Network,
    base_open: &SwitchConfiguration,
    scenarios: &ScenarioSet,
    config: &SolverConfig,
) -> Result<OneStageResult, SbrError> {
    let mut stats = SolveStats::default();
    let mask = net.closed_mask(base_open)?;
    let loops = loops_for_mask(net, &mask)?;
    if loops.len() != 1 {
        return Err(SbrError::BaseNotSingleLoop { found: loops.len() });
    }
    let lp = &loops[0];

    stats.flow_solve(scenarios.len());
    let flows = solve_sopf_r(net, base_open, scenarios, config)?;
    let pivot = min_abs_flow_branch(net, lp.steps(), &flows.expected_abs_flow)
        .ok_or(SbrError::NoSwitchableCandidate(lp.generator()))?;
    let candidates = candidate_set_cyclic(net, lp, pivot, &flows.expected_flow, config.tolerance)?;

    let base_ids = base_open.open_ids();
    let mut evaluations = Vec::new();
    let mut best: Option<(BranchId, f64)> = None;
    for (branch, reason) in candidates {
        let mut open = base_ids.clone();
        open.push(branch);
        let (objective, feasible) = evaluate_opening(net, &open, scenarios, config, &mut stats)?;
        evaluations.push(CandidateEvaluation {
            branch,
            objective,
            feasible,
            subpath: 0,
            reason,
        });
        if feasible {
            let better = match best {
                None => true,
                Some((bid, bobj)) => objective < bobj || (objective == bobj && branch < bid),
            };
            if better {
                best = Some((branch, objective));
            }
        }
    }
    let (opened, objective) = best.ok_or(SbrError::NoFeasibleCandidate)?;
    let mut open = base_ids;
    open.push(opened);
    Ok(OneStageResult {
        config: SwitchConfiguration::opening(net, &open)?,
        objective,
        opened,
        injecting: Vec::new(),
        subpath_count: 0,
        evaluations,
        stats,
    })
}

/// Two-stage baseline: identical stage one, then for each opened branch the
/// cyclic candidate set is taken on the loop as it looked during stage one
/// (still guided by the all-closed flows) and each candidate replaces that
/// opening. Swaps that break radiality are recorded as infeasible without
/// being solved; repeated configurations are solved once.
pub fn baseline_two_stage(
    net: &Network,
    scenarios: &ScenarioSet,
    config: &SolverConfig,
) -> Result<ReconfigurationResult, SbrError> {
    let mut stats = SolveStats::default();
    let all_closed = SwitchConfiguration::all_closed(net);
    let loops = find_loops(net)?;

    stats.flow_solve(scenarios.len());
    let flows = solve_sopf_r(net, &all_closed, scenarios, config)?;
    if loops.is_empty() {
        return Ok(ReconfigurationResult {
            config: all_closed,
            objective: flows.expected_objective,
            stage1_openings: Vec::new(),
            iterations: Vec::new(),
            stats,
            note: Some(
                "network has no loops; the all-closed configuration is already radial".into(),
            ),
            oracle: None,
        });
    }

    let plan = stage_one(net, loops, &flows)?;
    let mut memo: BTreeMap<Vec<BranchId>, (f64, bool)> = BTreeMap::new();
    let mut iterations = Vec::with_capacity(plan.openings.len());
    let mut best: Option<(Vec<BranchId>, BranchId, f64)> = None;

    for (l, &reopened) in plan.openings.iter().enumerate() {
        let lp = &plan.snapshots[l];
        let pivot = min_abs_flow_branch(net, lp.steps(), &flows.expected_abs_flow)
            .ok_or(SbrError::NoSwitchableCandidate(lp.generator()))?;
        let candidates =
            candidate_set_cyclic(net, lp, pivot, &flows.expected_flow, config.tolerance)?;

        let mut evaluations = Vec::new();
        let mut chosen: Option<(BranchId, f64)> = None;
        for (branch, reason) in candidates {
            let mut open: Vec<BranchId> = plan
                .openings
                .iter()
                .copied()
                .filter(|id| *id != reopened)
                .collect();
            open.push(branch);
            open.sort();
            open.dedup();
            let (objective, feasible) = if let Some(&cached) = memo.get(&open) {
                cached
            } else {
                let cfg = SwitchConfiguration::opening(net, &open)?;
                let result = if open.len() == plan.openings.len() && is_radial(net, &cfg)? {
                    evaluate_opening(net, &open, scenarios, config, &mut stats)?
                } else {
                    (f64::INFINITY, false)
                };
                memo.insert(open.clone(), result);
                result
            };
            evaluations.push(CandidateEvaluation {
                branch,
                objective,
                feasible,
                subpath: 0,
                reason,
            });
            if feasible {
                let better = match chosen {
                    None => true,
                    Some((cid, cobj)) => objective < cobj || (objective == cobj && branch < cid),
                };
                if better {
                    chosen = Some((branch, objective));
                }
                let better_global = best.as_ref().is_none_or(|(_, _, bo)| objective < *bo);
                if better_global {
                    best = Some((open, branch, objective));
                }
            }
        }
        let (chosen, objective) = match chosen {
            Some((b, o)) => (Some(b), o),
            None => (None, f64::INFINITY),
        };
        iterations.push(IterationTrace {
            reopened,
            injecting: Vec::new(),
            subpath_count: 0,
            evaluations,
            chosen,
            objective,
        });
    }

    let (open, _, objective) = best.ok_or(SbrError::NoFeasibleCandidate)?;
    Ok(ReconfigurationResult {
        config: SwitchConfiguration::opening(net, &open)?,
        objective,
        stage1_openings: plan.openings,
        iterations,
        stats,
        note: None,
        oracle: None,
    })
}

/// Minimal disjoint-set forest for cycle detection during enumeration.
#[derive(Clone)]
struct Dsu {
    parent: Vec<usize>,
}

impl Dsu {
    fn new(n: usize) -> Self {
        Dsu {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut a: usize) -> usize {
        while self.parent[a] != a {
            self.parent[a] = self.parent[self.parent[a]];
            a = self.parent[a];
        }
        a
    }

    /// Returns false when both ends were already connected.
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[ra] = rb;
        true
    }
}

/// Exact number of radial configurations: spanning trees of the all-closed
/// graph that contain every non-switchable branch.
///
/// Non-switchable branches are contracted first (a cycle among them means
/// no radial configuration exists); the matrix-tree theorem on the
/// contracted multigraph then gives the count, evaluated exactly in big
/// integers.
pub fn spanning_tree_count(net: &Network) -> Result<BigUint, SbrError> {
    let n = net.buses().len();
    let mut dsu = Dsu::new(n);
    for (e, branch) in net.branches().iter().enumerate() {
        if !branch.switchable {
            let (fi, ti) = net.branch_ends(e);
            if !dsu.union(fi, ti) {
                return Ok(BigUint::zero());
            }
        }
    }
    // Compact the contracted components.
    let mut comp_of = vec![usize::MAX; n];
    let mut k = 0usize;
    for i in 0..n {
        let root = dsu.find(i);
        if comp_of[root] == usize::MAX {
            comp_of[root] = k;
            k += 1;
        }
        comp_of[i] = comp_of[root];
    }
    if k == 1 {
        return Ok(BigUint::one());
    }

    // Weighted Laplacian of the contracted multigraph.
    let mut lap = vec![vec![BigInt::zero(); k]; k];
    for (e, branch) in net.branches().iter().enumerate() {
        if !branch.switchable {
            continue;
        }
        let (fi, ti) = net.branch_ends(e);
        let (a, b) = (comp_of[fi], comp_of[ti]);
        if a == b {
            continue;
        }
        lap[a][a] += 1;
        lap[b][b] += 1;
        lap[a][b] -= 1;
        lap[b][a] -= 1;
    }
    // Any cofactor of the Laplacian equals the spanning-tree count.
    let dim = k - 1;
    let mut m: Vec<Vec<BigInt>> = (0..dim)
        .map(|i| (0..dim).map(|j| lap[i + 1][j + 1].clone()).collect())
        .collect();

    // Fraction-free Bareiss elimination: every division below is exact.
    let mut sign = 1i32;
    let mut prev = BigInt::one();
    for p in 0..dim {
        if m[p][p].is_zero() {
            let Some(swap) = (p + 1..dim).find(|&r| !m[r][p].is_zero()) else {
                return Ok(BigUint::zero());
            };
            m.swap(p, swap);
            sign = -sign;
        }
        for i in p + 1..dim {
            for j in p + 1..dim {
                let num = &m[i][j] * &m[p][p] - &m[i][p] * &m[p][j];
                m[i][j] = num / &prev;
            }
            m[i][p] = BigInt::zero();
        }
        prev = m[p][p].clone();
    }
    let det = if sign < 0 { -prev } else { prev };
    if det.is_negative() {
        return Err(SbrError::Internal("tree count evaluated negative"));
    }
    Ok(det.magnitude().clone())
}

/// Enumerate every spanning tree containing all non-switchable branches,
/// in ascending branch order. Each tree is reported as its open set.
fn enumerate_trees(net: &Network) -> Vec<Vec<BranchId>> {
    let n = net.buses().len();
    let m = net.branches().len();
    let mut out = Vec::new();
    let mut chosen: Vec<usize> = Vec::with_capacity(n.saturating_sub(1));

    fn emit(net: &Network, chosen: &[usize], out: &mut Vec<Vec<BranchId>>) {
        let open = net
            .branches()
            .iter()
            .enumerate()
            .filter(|(e, _)| !chosen.contains(e))
            .map(|(_, b)| b.id)
            .collect();
        out.push(open);
    }

    /// Can the edges `chosen ∪ {e : e >= from}` still connect everything?
    fn connectable(net: &Network, dsu: &Dsu, from: usize) -> bool {
        let mut scratch = dsu.clone();
        let mut components = {
            let mut roots = std::collections::BTreeSet::new();
            for i in 0..scratch.parent.len() {
                roots.insert(scratch.find(i));
            }
            roots.len()
        };
        for e in from..net.branches().len() {
            let (fi, ti) = net.branch_ends(e);
            if scratch.union(fi, ti) {
                components -= 1;
                if components == 1 {
                    return true;
                }
            }
        }
        components == 1
    }

    fn rec(
        net: &Network,
        e: usize,
        dsu: Dsu,
        chosen: &mut Vec<usize>,
        out: &mut Vec<Vec<BranchId>>,
    ) {
        let n = net.buses().len();
        if chosen.len() == n - 1 {
            // Already spanning; the remaining branches must all be open,
            // which is only allowed if none of them is non-switchable.
            if net.branches()[e..].iter().all(|b| b.switchable) {
                emit(net, chosen, out);
            }
            return;
        }
        if e == net.branches().len() {
            return;
        }
        let (fi, ti) = net.branch_ends(e);
        let branch = &net.branches()[e];

        // Include the branch when it does not close a cycle.
        {
            let mut with = dsu.clone();
            if with.union(fi, ti) {
                chosen.push(e);
                rec(net, e + 1, with, chosen, out);
                chosen.pop();
            } else if !branch.switchable {
                // A non-switchable branch closing a cycle kills the whole
                // subtree: it cannot be opened.
                return;
            }
        }
        // Exclude the branch if allowed and the rest can still span.
        if branch.switchable && connectable(net, &dsu, e + 1) {
            rec(net, e + 1, dsu, chosen, out);
        }
    }

    if n == 1 {
        if net.branches().iter().all(|b| b.switchable) {
            out.push(net.branches().iter().map(|b| b.id).collect());
        }
        return out;
    }
    if m + 1 >= n {
        rec(net, 0, Dsu::new(n), &mut chosen, &mut out);
    }
    out
}

/// Exhaustively find the optimal radial configuration.
///
/// The exact configuration count is computed first; if it exceeds `budget`
/// the search refuses to start. Otherwise every radial configuration is
/// enumerated (the enumeration is cross-checked against the count),
/// evaluated on the full scenario set, and the best feasible one returned
/// with the bookkeeping in [`ReconfigurationResult::oracle`].
pub fn exhaustive_oracle(
    net: &Network,
    scenarios: &ScenarioSet,
    config: &SolverConfig,
    budget: u64,
) -> Result<ReconfigurationResult, SbrError> {
    let count = spanning_tree_count(net)?;
    if count > BigUint::from(budget) {
        return Err(SbrError::TreeBudgetExceeded { count, budget });
    }
    let open_sets = enumerate_trees(net);
    let enumerated = open_sets.len() as u64;
    if BigUint::from(enumerated) != count {
        return Err(SbrError::EnumerationMismatch {
            counted: count,
            enumerated,
        });
    }

    let evaluated: Vec<Result<(f64, bool), SbrError>> = open_sets
        .par_iter()
        .map(|open| {
            let cfg = SwitchConfiguration::opening(net, open)?;
            Ok(match solve_sopf_r(net, &cfg, scenarios, config) {
                Ok(sol) => (sol.expected_objective, true),
                Err(_) => (f64::INFINITY, false),
            })
        })
        .collect();

    let mut stats = SolveStats::default();
    let mut infeasible_skipped = 0u64;
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in evaluated.iter().enumerate() {
        let (objective, feasible) = match r {
            Ok(v) => *v,
            Err(_) => (f64::INFINITY, false),
        };
        stats.candidate_solve(scenarios.len());
        if feasible {
            if best.is_none_or(|(_, bo)| objective < bo) {
                best = Some((i, objective));
            }
        } else {
            infeasible_skipped += 1;
        }
    }
    let (best_idx, objective) = best.ok_or(SbrError::NoFeasibleCandidate)?;
    Ok(ReconfigurationResult {
        config: SwitchConfiguration::opening(net, &open_sets[best_idx])?,
        objective,
        stage1_openings: Vec::new(),
        iterations: Vec::new(),
        stats,
        note: None,
        oracle: Some(OracleInfo {
            tree_count: BigUint::from(enumerated),
            enumerated,
            infeasible_skipped,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{Branch, Bus, BusKind, SubstationLimits};
    use crate::scenarios::{Scenario, ScenarioInjection};
    use approx::assert_relative_eq;
    use std::collections::BTreeMap;

    fn substation(id: u32) -> Bus {
        Bus {
            id: BusId(id),
            kind: BusKind::Substation(SubstationLimits {
                p_min: -10.0,
                p_max: 10.0,
                q_min: -10.0,
                q_max: 10.0,
            }),
            v_min: 0.5,
            v_max: 1.5,
        }
    }

    fn bus(id: u32) -> Bus {
        Bus {
            id: BusId(id),
            kind: BusKind::NonSubstation,
            v_min: 0.5,
            v_max: 1.5,
        }
    }

    fn branch(id: u32, from: u32, to: u32) -> Branch {
        Branch {
            id: BranchId(id),
            from: BusId(from),
            to: BusId(to),
            r: 0.01,
            x: 0.02,
            s_max: 100.0,
            p_max: 100.0,
            q_max: 100.0,
            i_max: 100.0,
            switchable: true,
        }
    }

    fn scenario_set(loads: &[(u32, f64, f64)]) -> ScenarioSet {
        let mut injections = BTreeMap::new();
        for &(id, p, q) in loads {
            injections.insert(BusId(id), ScenarioInjection { p, q });
        }
        ScenarioSet::new(vec![Scenario {
            injections,
            weight: 1.0,
        }])
        .unwrap()
    }

    fn triangle() -> Network {
        Network::new(
            vec![substation(0), bus(1), bus(2)],
            vec![branch(1, 0, 1), branch(2, 0, 2), branch(3, 1, 2)],
            1.0,
            11.0,
        )
        .unwrap()
    }

    fn two_loops() -> Network {
        Network::new(
            vec![substation(0), bus(1), bus(2), bus(3)],
            vec![
                branch(1, 0, 1),
                branch(2, 1, 2),
                branch(3, 2, 0),
                branch(4, 1, 3),
                branch(5, 3, 2),
            ],
            1.0,
            11.0,
        )
        .unwrap()
    }

    #[test]
    fn tree_count_matches_hand_counts() {
        assert_eq!(
            spanning_tree_count(&triangle()).unwrap(),
            BigUint::from(3u32)
        );

        // Square 0-1-2-3 with a diagonal (1,3): eight spanning trees.
        let square = Network::new(
            vec![substation(0), bus(1), bus(2), bus(3)],
            vec![
                branch(1, 0, 1),
                branch(2, 1, 2),
                branch(3, 2, 3),
                branch(4, 3, 0),
                branch(5, 1, 3),
            ],
            1.0,
            11.0,
        )
        .unwrap();
        assert_eq!(spanning_tree_count(&square).unwrap(), BigUint::from(8u32));
    }

    #[test]
    fn tree_count_honors_non_switchable_branches() {
        let mut branches = vec![branch(1, 0, 1), branch(2, 0, 2), branch(3, 1, 2)];
        branches[0].switchable = false;
        let net = Network::new(vec![substation(0), bus(1), bus(2)], branches, 1.0, 11.0).unwrap();
        // Trees must contain branch 1: only {1,2} and {1,3} qualify.
        assert_eq!(spanning_tree_count(&net).unwrap(), BigUint::from(2u32));

        // Two parallel non-switchable branches form a mandatory cycle.
        let mut parallel = vec![branch(1, 0, 1), branch(2, 0, 1)];
        parallel[0].switchable = false;
        parallel[1].switchable = false;
        let net = Network::new(vec![substation(0), bus(1)], parallel, 1.0, 11.0).unwrap();
        assert_eq!(spanning_tree_count(&net).unwrap(), BigUint::zero());
    }

    #[test]
    fn tree_count_is_zero_for_disconnected_networks() {
        let net = Network::new(
            vec![substation(0), bus(1), bus(2), bus(3)],
            vec![branch(1, 0, 1), branch(2, 2, 3)],
            1.0,
            11.0,
        )
        .unwrap();
        assert_eq!(spanning_tree_count(&net).unwrap(), BigUint::zero());
    }

    #[test]
    fn enumeration_agrees_with_the_count() {
        for net in [triangle(), two_loops()] {
            let count = spanning_tree_count(&net).unwrap();
            let trees = enumerate_trees(&net);
            assert_eq!(BigUint::from(trees.len() as u64), count);
            for open in &trees {
                let cfg = SwitchConfiguration::opening(&net, open).unwrap();
                assert!(is_radial(&net, &cfg).unwrap());
            }
        }
    }

    #[test]
    fn oracle_refuses_over_budget() {
        let net = triangle();
        let scenarios = scenario_set(&[(1, -0.3, 0.0), (2, -0.05, 0.0)]);
        match exhaustive_oracle(&net, &scenarios, &SolverConfig::default(), 2) {
            Err(SbrError::TreeBudgetExceeded { count, budget }) => {
                assert_eq!(count, BigUint::from(3u32));
                assert_eq!(budget, 2);
            }
            other => panic!("expected budget refusal, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn oracle_finds_the_true_optimum_on_the_triangle() {
        let net = triangle();
        let scenarios = scenario_set(&[(1, -0.3, 0.0), (2, -0.05, 0.0)]);
        let oracle = exhaustive_oracle(&net, &scenarios, &SolverConfig::default(), 100).unwrap();
        let info = oracle.oracle.as_ref().unwrap();
        assert_eq!(info.enumerated, 3);
        assert_eq!(info.tree_count, BigUint::from(3u32));
        assert_eq!(info.infeasible_skipped, 0);
        // Opening the lightly loaded tie between buses 1 and 2 is optimal.
        assert_eq!(oracle.config.open_ids(), vec![BranchId(3)]);
        assert!(is_radial(&net, &oracle.config).unwrap());
        assert_eq!(oracle.stats.sopf_candidate_solves, 3);
        assert_eq!(oracle.stats.opf_solves, 3);
    }

    #[test]
    fn one_stage_matches_the_oracle_on_the_triangle() {
        let net = triangle();
        let scenarios = scenario_set(&[(1, -0.3, 0.0), (2, -0.05, 0.0)]);
        let config = SolverConfig::default();
        let base = SwitchConfiguration::all_closed(&net);
        let result = one_stage_sbr(&net, &base, &scenarios, &config).unwrap();

        // With the substation as the only injecting bus the loop is one
        // sub-path; the minimum-|flow| branch is the tie (1,2), whose flow
        // points backward along the canonical traversal, so the upstream
        // neighbor joins the candidate set.
        assert_eq!(result.injecting, vec![BusId(0)]);
        assert_eq!(result.subpath_count, 1);
        let ids: Vec<BranchId> = result.evaluations.iter().map(|e| e.branch).collect();
        assert_eq!(ids, vec![BranchId(3), BranchId(1)]);
        assert_eq!(result.evaluations[0].reason, CandidateReason::MinFlow);
        assert_eq!(result.evaluations[1].reason, CandidateReason::Upstream);
        assert_eq!(result.opened, BranchId(3));
        assert!(is_radial(&net, &result.config).unwrap());
        assert_eq!(result.stats.sopf_flow_solves, 1);
        assert_eq!(result.stats.sopf_candidate_solves, 2);

        let oracle = exhaustive_oracle(&net, &scenarios, &config, 100).unwrap();
        assert_eq!(result.config, oracle.config);
        assert_relative_eq!(result.objective, oracle.objective, max_relative = 1e-12);
    }

    #[test]
    fn one_stage_requires_exactly_one_loop() {
        let net = two_loops();
        let scenarios = scenario_set(&[(1, -0.1, 0.0), (2, -0.1, 0.0), (3, -0.1, 0.0)]);
        let base = SwitchConfiguration::all_closed(&net);
        assert!(matches!(
            one_stage_sbr(&net, &base, &scenarios, &SolverConfig::default()),
            Err(SbrError::BaseNotSingleLoop { found: 2 })
        ));
    }

    #[test]
    fn two_stage_produces_a_radial_near_optimal_configuration() {
        let net = two_loops();
        let scenarios = scenario_set(&[(1, -0.2, -0.05), (2, -0.15, -0.03), (3, -0.1, -0.02)]);
        let config = SolverConfig::default();
        let result = two_stage_sbr(&net, &scenarios, &config).unwrap();

        assert!(is_radial(&net, &result.config).unwrap());
        assert_eq!(result.stage1_openings.len(), 2);
        assert_eq!(result.iterations.len(), 2);
        assert_eq!(result.stats.sopf_flow_solves, 1 + 2);
        let candidate_total: usize = result.iterations.iter().map(|t| t.evaluations.len()).sum();
        assert_eq!(result.stats.sopf_candidate_solves, candidate_total);
        for trace in &result.iterations {
            assert!(!trace.injecting.is_empty());
            assert!(trace.evaluations.len() <= 2 * trace.injecting.len());
            assert_eq!(trace.subpath_count, trace.injecting.len());
        }

        let oracle = exhaustive_oracle(&net, &scenarios, &config, 1000).unwrap();
        assert!(result.objective >= oracle.objective - 1e-9);
        assert_eq!(result.config, oracle.config, "small case should be exact");
        assert_relative_eq!(result.objective, oracle.objective, max_relative = 1e-12);
    }

    #[test]
    fn two_stage_on_a_radial_network_reports_a_note() {
        let net = Network::new(
            vec![substation(0), bus(1), bus(2)],
            vec![branch(1, 0, 1), branch(2, 1, 2)],
            1.0,
            11.0,
        )
        .unwrap();
        let scenarios = scenario_set(&[(1, -0.1, 0.0), (2, -0.1, 0.0)]);
        let result = two_stage_sbr(&net, &scenarios, &SolverConfig::default()).unwrap();
        assert!(result.note.is_some());
        assert!(result.stage1_openings.is_empty());
        assert!(result.iterations.is_empty());
        assert_eq!(result.config, SwitchConfiguration::all_closed(&net));
        assert_eq!(result.stats.sopf_flow_solves, 1);
        assert_eq!(result.stats.sopf_candidate_solves, 0);
    }

    #[test]
    fn baselines_run_and_are_no_better_than_the_oracle() {
        let net = two_loops();
        let scenarios = scenario_set(&[(1, -0.2, -0.05), (2, -0.15, -0.03), (3, -0.1, -0.02)]);
        let config = SolverConfig::default();
        let oracle = exhaustive_oracle(&net, &scenarios, &config, 1000).unwrap();

        let two = baseline_two_stage(&net, &scenarios, &config).unwrap();
        assert!(is_radial(&net, &two.config).unwrap());
        assert!(two.objective >= oracle.objective - 1e-9);
        assert_eq!(two.stage1_openings.len(), 2);
        assert_eq!(two.stats.sopf_flow_solves, 1);

        // Baseline single-loop refinement on a one-loop base.
        let base = SwitchConfiguration::opening(&net, &[BranchId(4)]).unwrap();
        let one = baseline_one_stage(&net, &base, &scenarios, &config).unwrap();
        assert!(is_radial(&net, &one.config).unwrap());
        assert!(one.evaluations.len() <= 2);
        assert!(one.objective >= oracle.objective - 1e-9);
    }

    #[test]
    fn improved_two_stage_does_not_lose_to_the_baseline_here() {
        let net = two_loops();
        let scenarios = scenario_set(&[(1, -0.2, -0.05), (2, -0.15, -0.03), (3, -0.1, -0.02)]);
        let config = SolverConfig::default();
        let improved = two_stage_sbr(&net, &scenarios, &config).unwrap();
        let baseline = baseline_two_stage(&net, &scenarios, &config).unwrap();
        assert!(improved.objective <= baseline.objective + 1e-12);
    }

    #[test]
    fn candidate_sets_follow_the_flow_direction() {
        let net = triangle();
        let lp = &find_loops(&net).unwrap()[0];
        // Canonical traversal: bus 0 -> branch 1 -> bus 1 -> branch 3 ->
        // bus 2 -> branch 2 (backward) -> bus 0.
        let steps: Vec<BranchId> = lp.branch_ids().collect();
        assert_eq!(steps, vec![BranchId(1), BranchId(3), BranchId(2)]);
        let nb = net.branches().len();
        let mut flow = vec![0.0; nb];
        let idx = |id: u32| net.branch_index(BranchId(id)).unwrap();

        // Forward flow on the pivot: downstream neighbor.
        flow[idx(3)] = 0.05;
        let c = candidate_set_cyclic(&net, lp, BranchId(3), &flow, 1e-8).unwrap();
        assert_eq!(
            c,
            vec![
                (BranchId(3), CandidateReason::MinFlow),
                (BranchId(2), CandidateReason::Downstream)
            ]
        );

        // Backward flow: upstream neighbor.
        flow[idx(3)] = -0.05;
        let c = candidate_set_cyclic(&net, lp, BranchId(3), &flow, 1e-8).unwrap();
        assert_eq!(
            c,
            vec![
                (BranchId(3), CandidateReason::MinFlow),
                (BranchId(1), CandidateReason::Upstream)
            ]
        );

        // Near-zero flow: the pivot alone.
        flow[idx(3)] = 1e-12;
        let c = candidate_set_cyclic(&net, lp, BranchId(3), &flow, 1e-8).unwrap();
        assert_eq!(c, vec![(BranchId(3), CandidateReason::MinFlow)]);

        // A reversed reference direction flips the signed flow: branch 2 is
        // traversed against its reference, so a positive reference flow
        // points upstream along the traversal.
        flow = vec![0.0; nb];
        flow[idx(2)] = 0.05;
        let c = candidate_set_cyclic(&net, lp, BranchId(2), &flow, 1e-8).unwrap();
        assert_eq!(
            c,
            vec![
                (BranchId(2), CandidateReason::MinFlow),
                (BranchId(3), CandidateReason::Upstream)
            ]
        );
    }

    #[test]
    fn subpath_candidates_stop_at_the_boundary() {
        let net = triangle();
        let lp = &find_loops(&net).unwrap()[0];
        // Injecting buses 0 and 1 split the loop into [branch 1] and
        // [branch 3, branch 2].
        let subs = divide_into_subpaths(lp, &[BusId(0), BusId(1)]).unwrap();
        assert_eq!(subs[0].steps().len(), 1);
        let sp = &subs[0];
        let nb = net.branches().len();
        let mut flow = vec![0.0; nb];
        flow[net.branch_index(BranchId(1)).unwrap()] = 0.2;
        // Downstream neighbor would be beyond the sub-path boundary.
        let c = candidate_set(&net, sp, BranchId(1), &flow, 1e-8).unwrap();
        assert_eq!(c, vec![(BranchId(1), CandidateReason::MinFlow)]);

        let c = candidate_set(&net, sp, BranchId(3), &flow, 1e-8);
        assert!(matches!(c, Err(SbrError::CandidateNotOnPath(BranchId(3)))));
    }

    #[test]
    fn non_switchable_neighbors_are_not_proposed() {
        let mut branches = vec![branch(1, 0, 1), branch(2, 0, 2), branch(3, 1, 2)];
        branches[0].switchable = false;
        let net = Network::new(vec![substation(0), bus(1), bus(2)], branches, 1.0, 11.0).unwrap();
        let lp = &find_loops(&net).unwrap()[0];
        let nb = net.branches().len();
        let mut flow = vec![0.0; nb];
        flow[net.branch_index(BranchId(3)).unwrap()] = -0.1;
        // Upstream neighbor is branch 1, which cannot be operated.
        let c = candidate_set_cyclic(&net, lp, BranchId(3), &flow, 1e-8).unwrap();
        assert_eq!(c, vec![(BranchId(3), CandidateReason::MinFlow)]);
    }
}
