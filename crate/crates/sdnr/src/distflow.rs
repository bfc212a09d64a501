//! Branch-flow (DistFlow) power flow on a switched feeder.
//!
//! The model works with squared voltage magnitudes `v` and squared branch
//! current magnitudes `l`. Every closed branch `e = (i -> j)` carries three
//! variables — active flow `p`, reactive flow `q`, both measured at the
//! `from` end and signed against the branch reference direction, and `l`
//! anchored at the `from` end via `l * v_i = p^2 + q^2`. The substation is
//! the slack bus with `v = 1`.
//!
//! Radial configurations are solved with a backward/forward sweep; meshed
//! (loopy) configurations with a damped Newton method whose equation set is
//! made square by voltage-angle consistency residuals around each
//! independent cycle. Both paths converge on the same residual norm, so a
//! solution is only reported when every model equation is satisfied to the
//! configured tolerance.
//!
//! A stochastic solve runs one deterministic power flow per scenario (in
//! parallel) and aggregates objectives and flows with the scenario weights
//! in a fixed order, making results bit-for-bit reproducible regardless of
//! thread count.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::netgraph::{
    loops_for_mask, BranchId, BusId, BusKind, GraphError, Loop, Network, SwitchConfiguration,
};
use crate::scenarios::{Scenario, ScenarioSet};

/// What to do when a converged solution violates operating limits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LimitMode {
    /// Record violations on the solution and return it.
    CheckOnly,
    /// Return [`SolveError::LimitsViolated`] instead of the solution.
    Reject,
}

/// Numeric controls for the power flow solvers.
#[derive(Clone, Copy, Debug)]
pub struct SolverConfig {
    /// Convergence threshold on the infinity norm of all model residuals.
    pub tolerance: f64,
    /// Iteration cap for both the sweep and the Newton solver.
    pub max_iterations: usize,
    /// Allowed squared-voltage gap across an open branch before an
    /// [`ViolationKind::OpenVoltageGap`] violation is recorded.
    pub big_m: f64,
    pub limit_mode: LimitMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tolerance: 1e-8,
            max_iterations: 100,
            big_m: 10.0,
            limit_mode: LimitMode::CheckOnly,
        }
    }
}

/// A single operating-limit violation; `amount` is the positive exceedance
/// in the limit's own units.
#[derive(Clone, Debug, PartialEq)]
pub struct LimitViolation {
    pub kind: ViolationKind,
    pub amount: f64,
}

/// Which limit was violated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    VoltageLow(BusId),
    VoltageHigh(BusId),
    ApparentPower(BranchId),
    ActivePower(BranchId),
    ReactivePower(BranchId),
    Current(BranchId),
    SubstationActive,
    SubstationReactive,
    OpenVoltageGap(BranchId),
}

/// Errors from the power flow solvers.
#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("no injection given for bus {0}")]
    MissingInjection(BusId),
    #[error(
        "power flow did not converge within {iterations} iterations (residual {residual:.3e})"
    )]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("Newton system is singular")]
    SingularSystem,
    #[error("operating limits violated (worst exceedance {worst:.3e})")]
    LimitsViolated {
        worst: f64,
        violations: Vec<LimitViolation>,
    },
    #[error("{failed} of {total} scenario solves failed; first failure: {first}")]
    ScenarioFailures {
        failed: usize,
        total: usize,
        first: Box<SolveError>,
    },
}

/// Converged power flow for one scenario and one switch configuration.
///
/// All arrays are aligned with [`Network::buses`] / [`Network::branches`];
/// open branches carry zeros.
#[derive(Clone, Debug)]
pub struct PowerFlowSolution {
    /// Squared voltage magnitude per bus.
    pub v: Vec<f64>,
    /// Active flow per branch at the `from` end, reference direction.
    pub p: Vec<f64>,
    /// Reactive flow per branch at the `from` end, reference direction.
    pub q: Vec<f64>,
    /// Squared current magnitude per branch, anchored at the `from` end.
    pub l: Vec<f64>,
    /// Closed mask the solve used.
    pub closed: Vec<bool>,
    /// Net active injection per bus as given (substation entry is zero).
    pub p_inj: Vec<f64>,
    /// Net reactive injection per bus as given (substation entry is zero).
    pub q_inj: Vec<f64>,
    /// Active power drawn from the substation.
    pub p_slack: f64,
    /// Reactive power drawn from the substation.
    pub q_slack: f64,
    /// Objective value: equals `p_slack`.
    pub objective: f64,
    pub violations: Vec<LimitViolation>,
    /// Largest violation exceedance, zero when `violations` is empty.
    pub max_violation: f64,
    /// Infinity norm of all model residuals at the returned point.
    pub max_mismatch: f64,
    /// Sweep passes or Newton steps taken.
    pub iterations: usize,
}

/// Per-scenario solutions plus probability-weighted aggregates.
#[derive(Clone, Debug)]
pub struct StochasticSolution {
    /// One solution per scenario, in scenario order.
    pub scenarios: Vec<PowerFlowSolution>,
    /// Scenario weights, copied from the scenario set.
    pub weights: Vec<f64>,
    /// Expected objective: weighted substation active power.
    pub expected_objective: f64,
    /// Weighted signed active flow per branch.
    pub expected_flow: Vec<f64>,
    /// Weighted absolute active flow per branch.
    pub expected_abs_flow: Vec<f64>,
}

/// Spanning structure of the closed subgraph plus its non-tree branches.
struct ClosedTopology {
    mask: Vec<bool>,
    /// Bus indices in breadth-first order; the substation comes first.
    order: Vec<usize>,
    /// Parent bus index per bus; `usize::MAX` at the substation.
    parent_bus: Vec<usize>,
    /// Parent branch index per bus; `usize::MAX` at the substation.
    parent_branch: Vec<usize>,
    children: Vec<Vec<usize>>,
    /// Closed branches outside the spanning tree, ascending by index.
    nontree: Vec<usize>,
}

fn closed_topology(net: &Network, cfg: &SwitchConfiguration) -> Result<ClosedTopology, SolveError> {
    let mask = net.closed_mask(cfg)?;
    let n = net.buses().len();
    let root = net.substation_index();
    let mut order = Vec::with_capacity(n);
    let mut parent_bus = vec![usize::MAX; n];
    let mut parent_branch = vec![usize::MAX; n];
    let mut children = vec![Vec::new(); n];
    let mut seen = vec![false; n];
    let mut tree_edge = vec![false; net.branches().len()];
    seen[root] = true;
    order.push(root);
    let mut head = 0usize;
    while head < order.len() {
        let b = order[head];
        head += 1;
        for &(e, other) in net.adjacency(b) {
            if mask[e] && !seen[other] {
                seen[other] = true;
                parent_bus[other] = b;
                parent_branch[other] = e;
                children[b].push(other);
                tree_edge[e] = true;
                order.push(other);
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(GraphError::Disconnected(net.buses()[i].id).into());
    }
    let nontree = (0..net.branches().len())
        .filter(|&e| mask[e] && !tree_edge[e])
        .collect();
    Ok(ClosedTopology {
        mask,
        order,
        parent_bus,
        parent_branch,
        children,
        nontree,
    })
}

/// Net injections per bus index from a scenario; substation entries zero.
fn injection_arrays(
    net: &Network,
    scenario: &Scenario,
) -> Result<(Vec<f64>, Vec<f64>), SolveError> {
    let n = net.buses().len();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for (i, bus) in net.buses().iter().enumerate() {
        if bus.kind.is_substation() {
            continue;
        }
        let inj = scenario
            .injection(bus.id)
            .ok_or(SolveError::MissingInjection(bus.id))?;
        p[i] = inj.p;
        q[i] = inj.q;
    }
    Ok((p, q))
}

/// Flow variables of one solve attempt.
struct RawSolution {
    v: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
    l: Vec<f64>,
    iterations: usize,
}

/// Model residuals at a point, in a fixed order: active balance per
/// non-substation bus (bus order), reactive balance likewise, then voltage
/// drop and current-anchoring residuals per closed branch (branch order).
#[allow(clippy::too_many_arguments)]
fn equation_residuals(
    net: &Network,
    mask: &[bool],
    p_inj: &[f64],
    q_inj: &[f64],
    v: &[f64],
    p: &[f64],
    q: &[f64],
    l: &[f64],
) -> Vec<f64> {
    let mut acc_p = p_inj.to_vec();
    let mut acc_q = q_inj.to_vec();
    for (e, branch) in net.branches().iter().enumerate() {
        if !mask[e] {
            continue;
        }
        let (fi, ti) = net.branch_ends(e);
        acc_p[fi] -= p[e];
        acc_q[fi] -= q[e];
        acc_p[ti] += p[e] - branch.r * l[e];
        acc_q[ti] += q[e] - branch.x * l[e];
    }
    let mut out = Vec::new();
    for (bus, &balance) in net.buses().iter().zip(&acc_p) {
        if !bus.kind.is_substation() {
            out.push(balance);
        }
    }
    for (bus, &balance) in net.buses().iter().zip(&acc_q) {
        if !bus.kind.is_substation() {
            out.push(balance);
        }
    }
    for (e, branch) in net.branches().iter().enumerate() {
        if !mask[e] {
            continue;
        }
        let (fi, ti) = net.branch_ends(e);
        let (r, x) = (branch.r, branch.x);
        out.push(v[fi] - v[ti] - 2.0 * (r * p[e] + x * q[e]) + (r * r + x * x) * l[e]);
    }
    for (e, _) in net.branches().iter().enumerate().filter(|(e, _)| mask[*e]) {
        let (fi, _) = net.branch_ends(e);
        out.push(l[e] * v[fi] - p[e] * p[e] - q[e] * q[e]);
    }
    out
}

fn inf_norm(values: &[f64]) -> f64 {
    values.iter().fold(0.0_f64, |m, r| m.max(r.abs()))
}

/// Angle difference (`theta_from - theta_to`) recovered from branch-flow
/// quantities on one closed branch.
fn branch_angle(r: f64, x: f64, v_from: f64, p: f64, q: f64) -> (f64, f64, f64) {
    let u = x * p - r * q;
    let w = v_from - r * p - x * q;
    (u.atan2(w), u, w)
}

/// Signed sum of branch angle differences around each loop; zero at any
/// physically consistent operating point.
fn cycle_residuals(net: &Network, loops: &[Loop], v: &[f64], p: &[f64], q: &[f64]) -> Vec<f64> {
    loops
        .iter()
        .map(|lp| {
            lp.steps()
                .iter()
                .map(|step| {
                    let e = net
                        .branch_index(step.branch)
                        .expect("loop branch exists in network");
                    let branch = &net.branches()[e];
                    let (fi, _) = net.branch_ends(e);
                    let (beta, _, _) = branch_angle(branch.r, branch.x, v[fi], p[e], q[e]);
                    if step.forward {
                        beta
                    } else {
                        -beta
                    }
                })
                .sum()
        })
        .collect()
}

/// Backward/forward sweep for radial configurations.
fn sweep_solve(
    net: &Network,
    topo: &ClosedTopology,
    p_inj: &[f64],
    q_inj: &[f64],
    config: &SolverConfig,
) -> Result<RawSolution, SolveError> {
    let n = net.buses().len();
    let nb = net.branches().len();
    // Flow on the parent branch of each bus, measured at the parent end.
    let mut fp = vec![0.0; n];
    let mut fq = vec![0.0; n];
    let mut fl = vec![0.0; n];
    let mut v = vec![1.0; n];

    let mut best_mismatch = f64::INFINITY;
    for pass in 1..=config.max_iterations {
        for &j in topo.order.iter().rev() {
            if j == net.substation_index() {
                continue;
            }
            let e = topo.parent_branch[j];
            let branch = &net.branches()[e];
            let mut p_sum = -p_inj[j];
            let mut q_sum = -q_inj[j];
            for &c in &topo.children[j] {
                p_sum += fp[c];
                q_sum += fq[c];
            }
            fp[j] = p_sum + branch.r * fl[j];
            fq[j] = q_sum + branch.x * fl[j];
        }
        for &j in &topo.order {
            if j == net.substation_index() {
                continue;
            }
            let e = topo.parent_branch[j];
            let branch = &net.branches()[e];
            let vp = v[topo.parent_bus[j]];
            fl[j] = (fp[j] * fp[j] + fq[j] * fq[j]) / vp;
            v[j] = vp - 2.0 * (branch.r * fp[j] + branch.x * fq[j])
                + (branch.r * branch.r + branch.x * branch.x) * fl[j];
        }

        let (p, q, l) = tree_flows_to_reference(net, topo, &fp, &fq, &fl, nb);
        let res = equation_residuals(net, &topo.mask, p_inj, q_inj, &v, &p, &q, &l);
        let mismatch = inf_norm(&res);
        if mismatch <= config.tolerance {
            return Ok(RawSolution {
                v,
                p,
                q,
                l,
                iterations: pass,
            });
        }
        best_mismatch = best_mismatch.min(mismatch);
        if !mismatch.is_finite() {
            break;
        }
    }
    Err(SolveError::NonConvergence {
        iterations: config.max_iterations,
        residual: best_mismatch,
    })
}

/// Translate per-bus parent-branch flows into reference-direction branch
/// arrays. For a branch whose reference direction points child -> parent the
/// flow is re-measured at the child end; the squared current is unchanged
/// because `l * v` equals the squared flow magnitude at either end.
fn tree_flows_to_reference(
    net: &Network,
    topo: &ClosedTopology,
    fp: &[f64],
    fq: &[f64],
    fl: &[f64],
    nb: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; nb];
    let mut q = vec![0.0; nb];
    let mut l = vec![0.0; nb];
    for j in 0..net.buses().len() {
        if j == net.substation_index() {
            continue;
        }
        let e = topo.parent_branch[j];
        if e == usize::MAX {
            continue;
        }
        let branch = &net.branches()[e];
        let (fi, _) = net.branch_ends(e);
        if fi == topo.parent_bus[j] {
            p[e] = fp[j];
            q[e] = fq[j];
        } else {
            p[e] = -(fp[j] - branch.r * fl[j]);
            q[e] = -(fq[j] - branch.x * fl[j]);
        }
        l[e] = fl[j];
    }
    (p, q, l)
}

/// Damped Newton iteration on the full branch-flow equation set, closed by
/// cycle angle-consistency residuals when the configuration is meshed.
fn newton_solve(
    net: &Network,
    topo: &ClosedTopology,
    p_inj: &[f64],
    q_inj: &[f64],
    config: &SolverConfig,
) -> Result<RawSolution, SolveError> {
    let n = net.buses().len();
    let nb = net.branches().len();
    let sub = net.substation_index();

    let loops = if topo.nontree.is_empty() {
        Vec::new()
    } else {
        loops_for_mask(net, &topo.mask)?
    };

    // Variable layout: squared voltages of non-substation buses in bus
    // order, then (p, q, l) per closed branch in branch order.
    let mut v_col = vec![usize::MAX; n];
    let mut col = 0usize;
    for (i, slot) in v_col.iter_mut().enumerate() {
        if i != sub {
            *slot = col;
            col += 1;
        }
    }
    let closed: Vec<usize> = (0..nb).filter(|&e| topo.mask[e]).collect();
    let mut flow_col = vec![usize::MAX; nb];
    for &e in &closed {
        flow_col[e] = col;
        col += 3;
    }
    let dim = col;
    let mc = closed.len();
    debug_assert_eq!(dim, (n - 1) + 3 * mc);
    debug_assert_eq!(2 * (n - 1) + 2 * mc + loops.len(), dim);

    let mut v = vec![1.0; n];
    let mut p = vec![0.0; nb];
    let mut q = vec![0.0; nb];
    let mut l = vec![0.0; nb];

    let assemble = |v: &[f64], p: &[f64], q: &[f64], l: &[f64]| -> Vec<f64> {
        let mut f = equation_residuals(net, &topo.mask, p_inj, q_inj, v, p, q, l);
        f.extend(cycle_residuals(net, &loops, v, p, q));
        f
    };

    let mut f = assemble(&v, &p, &q, &l);
    let mut norm = inf_norm(&f);
    for it in 1..=config.max_iterations {
        if norm <= config.tolerance {
            return Ok(RawSolution {
                v,
                p,
                q,
                l,
                iterations: it - 1,
            });
        }
        let mut jac = DMatrix::<f64>::zeros(dim, dim);
        let mut row = 0usize;
        // Active balance rows.
        for i in 0..n {
            if i == sub {
                continue;
            }
            for &(e, _) in net.adjacency(i) {
                if !topo.mask[e] {
                    continue;
                }
                let (fi, ti) = net.branch_ends(e);
                let c = flow_col[e];
                if fi == i {
                    jac[(row, c)] -= 1.0;
                }
                if ti == i {
                    jac[(row, c)] += 1.0;
                    jac[(row, c + 2)] -= net.branches()[e].r;
                }
            }
            row += 1;
        }
        // Reactive balance rows.
        for i in 0..n {
            if i == sub {
                continue;
            }
            for &(e, _) in net.adjacency(i) {
                if !topo.mask[e] {
                    continue;
                }
                let (fi, ti) = net.branch_ends(e);
                let c = flow_col[e];
                if fi == i {
                    jac[(row, c + 1)] -= 1.0;
                }
                if ti == i {
                    jac[(row, c + 1)] += 1.0;
                    jac[(row, c + 2)] -= net.branches()[e].x;
                }
            }
            row += 1;
        }
        // Voltage drop rows.
        for &e in &closed {
            let branch = &net.branches()[e];
            let (fi, ti) = net.branch_ends(e);
            let c = flow_col[e];
            if v_col[fi] != usize::MAX {
                jac[(row, v_col[fi])] += 1.0;
            }
            if v_col[ti] != usize::MAX {
                jac[(row, v_col[ti])] -= 1.0;
            }
            jac[(row, c)] = -2.0 * branch.r;
            jac[(row, c + 1)] = -2.0 * branch.x;
            jac[(row, c + 2)] = branch.r * branch.r + branch.x * branch.x;
            row += 1;
        }
        // Current anchoring rows.
        for &e in &closed {
            let (fi, _) = net.branch_ends(e);
            let c = flow_col[e];
            if v_col[fi] != usize::MAX {
                jac[(row, v_col[fi])] = l[e];
            }
            jac[(row, c)] = -2.0 * p[e];
            jac[(row, c + 1)] = -2.0 * q[e];
            jac[(row, c + 2)] = v[fi];
            row += 1;
        }
        // Cycle rows.
        for lp in &loops {
            for step in lp.steps() {
                let e = net
                    .branch_index(step.branch)
                    .expect("loop branch exists in network");
                let branch = &net.branches()[e];
                let (fi, _) = net.branch_ends(e);
                let (_, u, w) = branch_angle(branch.r, branch.x, v[fi], p[e], q[e]);
                let d = u * u + w * w;
                if d <= f64::MIN_POSITIVE {
                    return Err(SolveError::SingularSystem);
                }
                let s = if step.forward { 1.0 } else { -1.0 };
                let c = flow_col[e];
                jac[(row, c)] += s * (w * branch.x + u * branch.r) / d;
                jac[(row, c + 1)] += s * (u * branch.x - w * branch.r) / d;
                if v_col[fi] != usize::MAX {
                    jac[(row, v_col[fi])] += s * (-u / d);
                }
            }
            row += 1;
        }
        debug_assert_eq!(row, dim);

        let rhs = DVector::from_iterator(dim, f.iter().map(|r| -r));
        let delta = jac.lu().solve(&rhs).ok_or(SolveError::SingularSystem)?;

        // Damped step: back off until the residual norm decreases and all
        // squared voltages stay positive.
        let mut lambda = 1.0_f64;
        loop {
            let (tv, tp, tq, tl) = apply_step(
                &v, &p, &q, &l, &delta, lambda, &v_col, &flow_col, sub, &closed,
            );
            let ok_v = tv.iter().all(|&x| x > 1e-6);
            let tf = assemble(&tv, &tp, &tq, &tl);
            let tnorm = inf_norm(&tf);
            if ok_v && tnorm < norm {
                v = tv;
                p = tp;
                q = tq;
                l = tl;
                f = tf;
                norm = tnorm;
                break;
            }
            lambda *= 0.5;
            if lambda < 1e-12 {
                return Err(SolveError::NonConvergence {
                    iterations: it,
                    residual: norm,
                });
            }
        }
    }
    if norm <= config.tolerance {
        return Ok(RawSolution {
            v,
            p,
            q,
            l,
            iterations: config.max_iterations,
        });
    }
    Err(SolveError::NonConvergence {
        iterations: config.max_iterations,
        residual: norm,
    })
}

#[allow(clippy::too_many_arguments)]
fn apply_step(
    v: &[f64],
    p: &[f64],
    q: &[f64],
    l: &[f64],
    delta: &DVector<f64>,
    lambda: f64,
    v_col: &[usize],
    flow_col: &[usize],
    sub: usize,
    closed: &[usize],
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut tv = v.to_vec();
    let mut tp = p.to_vec();
    let mut tq = q.to_vec();
    let mut tl = l.to_vec();
    for (i, &c) in v_col.iter().enumerate() {
        if i != sub && c != usize::MAX {
            tv[i] += lambda * delta[c];
        }
    }
    for &e in closed {
        let c = flow_col[e];
        tp[e] += lambda * delta[c];
        tq[e] += lambda * delta[c + 1];
        tl[e] += lambda * delta[c + 2];
    }
    (tv, tp, tq, tl)
}

/// Substation injections implied by the branch flows around the slack bus.
fn slack_injections(net: &Network, mask: &[bool], p: &[f64], q: &[f64], l: &[f64]) -> (f64, f64) {
    let sub = net.substation_index();
    let mut ps = 0.0;
    let mut qs = 0.0;
    for &(e, _) in net.adjacency(sub) {
        if !mask[e] {
            continue;
        }
        let branch = &net.branches()[e];
        let (fi, ti) = net.branch_ends(e);
        if fi == sub {
            ps += p[e];
            qs += q[e];
        }
        if ti == sub {
            ps -= p[e] - branch.r * l[e];
            qs -= q[e] - branch.x * l[e];
        }
    }
    (ps, qs)
}

fn check_limits(
    net: &Network,
    mask: &[bool],
    sol: &RawSolution,
    p_slack: f64,
    q_slack: f64,
    config: &SolverConfig,
) -> Vec<LimitViolation> {
    let mut out = Vec::new();
    for (i, bus) in net.buses().iter().enumerate() {
        let mag = sol.v[i].max(0.0).sqrt();
        if mag < bus.v_min {
            out.push(LimitViolation {
                kind: ViolationKind::VoltageLow(bus.id),
                amount: bus.v_min - mag,
            });
        }
        if mag > bus.v_max {
            out.push(LimitViolation {
                kind: ViolationKind::VoltageHigh(bus.id),
                amount: mag - bus.v_max,
            });
        }
    }
    for (e, branch) in net.branches().iter().enumerate() {
        if !mask[e] {
            let (fi, ti) = net.branch_ends(e);
            let gap = (sol.v[fi] - sol.v[ti]).abs();
            if gap > config.big_m {
                out.push(LimitViolation {
                    kind: ViolationKind::OpenVoltageGap(branch.id),
                    amount: gap - config.big_m,
                });
            }
            continue;
        }
        // Flows are checked at both ends; the receiving end differs from
        // the sending end by the branch losses.
        let p_from = sol.p[e];
        let q_from = sol.q[e];
        let p_to = sol.p[e] - branch.r * sol.l[e];
        let q_to = sol.q[e] - branch.x * sol.l[e];
        let p_worst = p_from.abs().max(p_to.abs());
        let q_worst = q_from.abs().max(q_to.abs());
        let s_worst = p_from.hypot(q_from).max(p_to.hypot(q_to));
        if p_worst > branch.p_max {
            out.push(LimitViolation {
                kind: ViolationKind::ActivePower(branch.id),
                amount: p_worst - branch.p_max,
            });
        }
        if q_worst > branch.q_max {
            out.push(LimitViolation {
                kind: ViolationKind::ReactivePower(branch.id),
                amount: q_worst - branch.q_max,
            });
        }
        if s_worst > branch.s_max {
            out.push(LimitViolation {
                kind: ViolationKind::ApparentPower(branch.id),
                amount: s_worst - branch.s_max,
            });
        }
        let i_sq_max = branch.i_max * branch.i_max;
        if sol.l[e] > i_sq_max {
            out.push(LimitViolation {
                kind: ViolationKind::Current(branch.id),
                amount: sol.l[e] - i_sq_max,
            });
        }
    }
    if let BusKind::Substation(limits) = net.substation().kind {
        if p_slack < limits.p_min || p_slack > limits.p_max {
            out.push(LimitViolation {
                kind: ViolationKind::SubstationActive,
                amount: (limits.p_min - p_slack).max(p_slack - limits.p_max),
            });
        }
        if q_slack < limits.q_min || q_slack > limits.q_max {
            out.push(LimitViolation {
                kind: ViolationKind::SubstationReactive,
                amount: (limits.q_min - q_slack).max(q_slack - limits.q_max),
            });
        }
    }
    out
}

/// Solve one scenario's power flow on the given switch configuration.
///
/// Dispatches to the sweep when the closed subgraph is a tree and to the
/// Newton solver otherwise. The scenario must provide an injection for
/// every non-substation bus; its weight is ignored here.
pub fn solve_opf_r(
    net: &Network,
    cfg: &SwitchConfiguration,
    scenario: &Scenario,
    config: &SolverConfig,
) -> Result<PowerFlowSolution, SolveError> {
    let topo = closed_topology(net, cfg)?;
    let (p_inj, q_inj) = injection_arrays(net, scenario)?;
    let raw = if topo.nontree.is_empty() {
        sweep_solve(net, &topo, &p_inj, &q_inj, config)?
    } else {
        newton_solve(net, &topo, &p_inj, &q_inj, config)?
    };

    let mut res = equation_residuals(
        net, &topo.mask, &p_inj, &q_inj, &raw.v, &raw.p, &raw.q, &raw.l,
    );
    if !topo.nontree.is_empty() {
        let loops = loops_for_mask(net, &topo.mask)?;
        res.extend(cycle_residuals(net, &loops, &raw.v, &raw.p, &raw.q));
    }
    let max_mismatch = inf_norm(&res);

    let (p_slack, q_slack) = slack_injections(net, &topo.mask, &raw.p, &raw.q, &raw.l);
    let violations = check_limits(net, &topo.mask, &raw, p_slack, q_slack, config);
    let max_violation = violations.iter().fold(0.0_f64, |m, v| m.max(v.amount));
    if config.limit_mode == LimitMode::Reject && !violations.is_empty() {
        return Err(SolveError::LimitsViolated {
            worst: max_violation,
            violations,
        });
    }
    Ok(PowerFlowSolution {
        v: raw.v,
        p: raw.p,
        q: raw.q,
        l: raw.l,
        closed: topo.mask,
        p_inj,
        q_inj,
        p_slack,
        q_slack,
        objective: p_slack,
        violations,
        max_violation,
        max_mismatch,
        iterations: raw.iterations,
    })
}

/// Solve every scenario on the same configuration and aggregate.
///
/// Scenario solves run in parallel; aggregation is a sequential weighted
/// sum in scenario order, so the result does not depend on thread count.
/// Any per-scenario failure aborts the whole solve with
/// [`SolveError::ScenarioFailures`].
pub fn solve_sopf_r(
    net: &Network,
    cfg: &SwitchConfiguration,
    scenarios: &ScenarioSet,
    config: &SolverConfig,
) -> Result<StochasticSolution, SolveError> {
    let results: Vec<Result<PowerFlowSolution, SolveError>> = scenarios
        .scenarios()
        .par_iter()
        .map(|sc| solve_opf_r(net, cfg, sc, config))
        .collect();

    let total = results.len();
    let failed = results.iter().filter(|r| r.is_err()).count();
    if failed > 0 {
        let first = results
            .into_iter()
            .find_map(|r| r.err())
            .expect("at least one failure");
        return Err(SolveError::ScenarioFailures {
            failed,
            total,
            first: Box::new(first),
        });
    }
    let sols: Vec<PowerFlowSolution> = results.into_iter().map(|r| r.unwrap()).collect();
    let weights: Vec<f64> = scenarios.scenarios().iter().map(|s| s.weight).collect();

    let nb = net.branches().len();
    let mut expected_objective = 0.0;
    let mut expected_flow = vec![0.0; nb];
    let mut expected_abs_flow = vec![0.0; nb];
    for (w, sol) in sols.iter().enumerate() {
        let pi = weights[w];
        expected_objective += pi * sol.objective;
        for e in 0..nb {
            expected_flow[e] += pi * sol.p[e];
            expected_abs_flow[e] += pi * sol.p[e].abs();
        }
    }
    Ok(StochasticSolution {
        scenarios: sols,
        weights,
        expected_objective,
        expected_flow,
        expected_abs_flow,
    })
}

/// Expected net active power injected into a loop at each of its buses.
///
/// For each loop bus the scenario injection (or, at the substation, the
/// solved slack supply) is combined with the flows on closed off-loop
/// branches; branches joining two loop buses contribute nothing. Entries
/// align with [`Loop::buses`]. The expectation uses the solution's scenario
/// weights.
pub fn loop_injections(
    net: &Network,
    lp: &Loop,
    sols: &StochasticSolution,
) -> Result<Vec<f64>, SolveError> {
    let loop_bus_ids: Vec<usize> = lp
        .buses()
        .iter()
        .map(|id| {
            net.bus_index(*id)
                .ok_or_else(|| GraphError::BusNotOnLoop(*id).into())
        })
        .collect::<Result<_, SolveError>>()?;
    let mut on_loop = vec![false; net.buses().len()];
    for &bi in &loop_bus_ids {
        on_loop[bi] = true;
    }
    let mut loop_edge = vec![false; net.branches().len()];
    for step in lp.steps() {
        let e = net
            .branch_index(step.branch)
            .ok_or(GraphError::ForeignLoop(step.branch))?;
        loop_edge[e] = true;
    }

    let mut out = vec![0.0; loop_bus_ids.len()];
    for (w, sol) in sols.scenarios.iter().enumerate() {
        let pi = sols.weights[w];
        for (slot, &bi) in loop_bus_ids.iter().enumerate() {
            let own = if bi == net.substation_index() {
                sol.p_slack
            } else {
                sol.p_inj[bi]
            };
            let mut acc = own;
            for &(e, other) in net.adjacency(bi) {
                if !sol.closed[e] || loop_edge[e] || on_loop[other] {
                    continue;
                }
                let branch = &net.branches()[e];
                let (fi, ti) = net.branch_ends(e);
                if ti == bi {
                    acc += sol.p[e] - branch.r * sol.l[e];
                }
                if fi == bi {
                    acc -= sol.p[e];
                }
            }
            out[slot] += pi * acc;
        }
    }
    Ok(out)
}

/// Largest violation of the current-anchoring identity
/// `l * v_from = p^2 + q^2` over the closed branches of a solution.
pub fn soc_exactness_residual(net: &Network, sol: &PowerFlowSolution) -> f64 {
    let mut worst = 0.0_f64;
    for e in 0..net.branches().len() {
        if !sol.closed[e] {
            continue;
        }
        let (fi, _) = net.branch_ends(e);
        let gap = (sol.l[e] * sol.v[fi] - sol.p[e] * sol.p[e] - sol.q[e] * sol.q[e]).abs();
        worst = worst.max(gap);
    }
    worst
}

/// Expected total network loss: the weighted sum over scenarios of the
/// substation supply plus all bus injections (equal to the weighted sum of
/// `r * l` over closed branches).
pub fn expected_loss(net: &Network, sols: &StochasticSolution) -> f64 {
    let mut total = 0.0;
    for (w, sol) in sols.scenarios.iter().enumerate() {
        let injections: f64 = net
            .buses()
            .iter()
            .enumerate()
            .filter(|(_, b)| !b.kind.is_substation())
            .map(|(i, _)| sol.p_inj[i])
            .sum();
        total += sols.weights[w] * (sol.p_slack + injections);
    }
    total
}
