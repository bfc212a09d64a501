//! Graph model of a switched distribution feeder.
//!
//! A [`Network`] is an undirected multigraph of buses and switchable
//! branches. Every branch carries a fixed reference direction (`from` →
//! `to`); power flow variables are signed against that direction. The module
//! provides the radiality predicate, a chordless loop basis of the
//! all-closed network, maintenance of that basis as branches are opened, and
//! division of a loop into sub-paths at power-injecting buses.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use thiserror::Error;

/// Bus identifier as given by the case data.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct BusId(pub u32);

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Branch identifier as given by the case data.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct BranchId(pub u32);

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Substation injection bounds, per-unit on the system base.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubstationLimits {
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
}

/// Role of a bus. Injection bounds only exist at substations, so they live
/// inside the variant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BusKind {
    Substation(SubstationLimits),
    NonSubstation,
}

impl BusKind {
    pub fn is_substation(&self) -> bool {
        matches!(self, BusKind::Substation(_))
    }
}

/// A bus with its voltage magnitude bounds (per-unit, not squared).
#[derive(Clone, Debug)]
pub struct Bus {
    pub id: BusId,
    pub kind: BusKind,
    pub v_min: f64,
    pub v_max: f64,
}

/// A switchable branch with impedance and operating limits, all per-unit.
///
/// `s_max`, `p_max` and `q_max` bound the sending-end flow magnitudes;
/// `i_max` bounds the current magnitude (the squared-current variable is
/// checked against `i_max^2`). A branch with `switchable == false` must stay
/// closed and is never proposed for opening.
#[derive(Clone, Debug)]
pub struct Branch {
    pub id: BranchId,
    pub from: BusId,
    pub to: BusId,
    pub r: f64,
    pub x: f64,
    pub s_max: f64,
    pub p_max: f64,
    pub q_max: f64,
    pub i_max: f64,
    pub switchable: bool,
}

/// Errors from network construction and the graph operations.
#[derive(Debug, Error)]
pub enum GraphError {
    #[error("duplicate bus id {0}")]
    DuplicateBus(BusId),
    #[error("duplicate branch id {0}")]
    DuplicateBranch(BranchId),
    #[error("branch {branch} references unknown bus {bus}")]
    UnknownBusRef { branch: BranchId, bus: BusId },
    #[error("branch {0} connects a bus to itself")]
    SelfLoop(BranchId),
    #[error("branch {0} needs r >= 0, x >= 0 and r + x > 0")]
    BadImpedance(BranchId),
    #[error("branch {0} operating limits must all be positive")]
    BadLimits(BranchId),
    #[error("bus {0} voltage bounds must satisfy 0 < v_min <= v_max")]
    BadVoltageBounds(BusId),
    #[error("network has no substation bus")]
    NoSubstation,
    #[error("switch configuration does not cover branch {0}")]
    ConfigMissingBranch(BranchId),
    #[error("switch configuration names unknown branch {0}")]
    ConfigUnknownBranch(BranchId),
    #[error("closed subgraph is disconnected: bus {0} is unreachable from the substation")]
    Disconnected(BusId),
    #[error("bus {0} does not lie on the loop")]
    BusNotOnLoop(BusId),
    #[error("sub-path division needs at least one injecting bus")]
    NoInjectingBus,
    #[error("branch {0} does not lie on the loop")]
    BranchNotOnLoop(BranchId),
    #[error("merging loops across opened branch {0} does not produce a single cycle")]
    NonSimpleMerge(BranchId),
    #[error("loop references branch {0} which is not part of this network")]
    ForeignLoop(BranchId),
}

/// Open/closed state of one switchable branch.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SwitchState {
    Open,
    Closed,
}

/// Complete open/closed assignment for every branch of one network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwitchConfiguration {
    status: BTreeMap<BranchId, SwitchState>,
}

impl SwitchConfiguration {
    /// Configuration with every branch closed.
    pub fn all_closed(net: &Network) -> Self {
        let status = net
            .branches
            .iter()
            .map(|b| (b.id, SwitchState::Closed))
            .collect();
        SwitchConfiguration { status }
    }

    /// Configuration with exactly the listed branches open.
    pub fn opening(net: &Network, open: &[BranchId]) -> Result<Self, GraphError> {
        let mut cfg = Self::all_closed(net);
        for id in open {
            cfg.set(*id, SwitchState::Open)?;
        }
        Ok(cfg)
    }

    pub fn state(&self, id: BranchId) -> Option<SwitchState> {
        self.status.get(&id).copied()
    }

    pub fn set(&mut self, id: BranchId, state: SwitchState) -> Result<(), GraphError> {
        match self.status.get_mut(&id) {
            Some(slot) => {
                *slot = state;
                Ok(())
            }
            None => Err(GraphError::ConfigUnknownBranch(id)),
        }
    }

    /// Ids of the open branches, ascending.
    pub fn open_ids(&self) -> Vec<BranchId> {
        self.status
            .iter()
            .filter(|(_, s)| **s == SwitchState::Open)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (BranchId, SwitchState)> + '_ {
        self.status.iter().map(|(id, s)| (*id, *s))
    }

    pub fn len(&self) -> usize {
        self.status.len()
    }

    pub fn is_empty(&self) -> bool {
        self.status.is_empty()
    }
}

/// A switched feeder: buses, branches and the derived adjacency.
///
/// Multiple substation buses are collapsed into the lowest-id one at
/// construction time (a zero-impedance merge); branches that end up
/// connecting the merged substation to itself are dropped. The absorbed ids
/// are retained for reporting via [`Network::merged_substations`].
#[derive(Clone, Debug)]
pub struct Network {
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    bus_pos: BTreeMap<BusId, usize>,
    branch_pos: BTreeMap<BranchId, usize>,
    /// Branch index -> (from bus index, to bus index).
    ends: Vec<(usize, usize)>,
    /// Bus index -> (branch index, neighbor bus index), in branch order.
    adjacency: Vec<Vec<(usize, usize)>>,
    substation: usize,
    merged: Vec<BusId>,
    base_mva: f64,
    base_kv: f64,
}

impl Network {
    pub fn new(
        buses: Vec<Bus>,
        mut branches: Vec<Branch>,
        base_mva: f64,
        base_kv: f64,
    ) -> Result<Self, GraphError> {
        // Reject self-loops before the substation merge so that genuine data
        // errors are not mistaken for merge artifacts.
        for b in &branches {
            if b.from == b.to {
                return Err(GraphError::SelfLoop(b.id));
            }
        }

        let mut sub_ids: Vec<BusId> = buses
            .iter()
            .filter(|b| b.kind.is_substation())
            .map(|b| b.id)
            .collect();
        sub_ids.sort();
        let (&kept_sub, absorbed) = sub_ids.split_first().ok_or(GraphError::NoSubstation)?;
        let merged: Vec<BusId> = absorbed.to_vec();
        let absorbed_set: BTreeSet<BusId> = merged.iter().copied().collect();

        let buses: Vec<Bus> = buses
            .into_iter()
            .filter(|b| !absorbed_set.contains(&b.id))
            .collect();
        for b in &mut branches {
            if absorbed_set.contains(&b.from) {
                b.from = kept_sub;
            }
            if absorbed_set.contains(&b.to) {
                b.to = kept_sub;
            }
        }
        // Branches between two substations collapse onto the merged bus.
        branches.retain(|b| b.from != b.to);

        let mut bus_pos = BTreeMap::new();
        for (i, b) in buses.iter().enumerate() {
            if bus_pos.insert(b.id, i).is_some() {
                return Err(GraphError::DuplicateBus(b.id));
            }
            if !(b.v_min > 0.0 && b.v_min <= b.v_max) {
                return Err(GraphError::BadVoltageBounds(b.id));
            }
        }

        let mut branch_pos = BTreeMap::new();
        let mut ends = Vec::with_capacity(branches.len());
        for (i, b) in branches.iter().enumerate() {
            if branch_pos.insert(b.id, i).is_some() {
                return Err(GraphError::DuplicateBranch(b.id));
            }
            if !(b.r >= 0.0 && b.x >= 0.0 && b.r + b.x > 0.0) {
                return Err(GraphError::BadImpedance(b.id));
            }
            if !(b.s_max > 0.0 && b.p_max > 0.0 && b.q_max > 0.0 && b.i_max > 0.0) {
                return Err(GraphError::BadLimits(b.id));
            }
            let fi = *bus_pos.get(&b.from).ok_or(GraphError::UnknownBusRef {
                branch: b.id,
                bus: b.from,
            })?;
            let ti = *bus_pos.get(&b.to).ok_or(GraphError::UnknownBusRef {
                branch: b.id,
                bus: b.to,
            })?;
            ends.push((fi, ti));
        }

        let mut adjacency = vec![Vec::new(); buses.len()];
        for (i, &(fi, ti)) in ends.iter().enumerate() {
            adjacency[fi].push((i, ti));
            adjacency[ti].push((i, fi));
        }

        let substation = bus_pos[&kept_sub];
        Ok(Network {
            buses,
            branches,
            bus_pos,
            branch_pos,
            ends,
            adjacency,
            substation,
            merged,
            base_mva,
            base_kv,
        })
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }

    pub fn base_kv(&self) -> f64 {
        self.base_kv
    }

    /// Index of the (merged) substation bus.
    pub fn substation_index(&self) -> usize {
        self.substation
    }

    pub fn substation(&self) -> &Bus {
        &self.buses[self.substation]
    }

    /// Substation ids absorbed into the surviving one at construction.
    pub fn merged_substations(&self) -> &[BusId] {
        &self.merged
    }

    pub fn bus_index(&self, id: BusId) -> Option<usize> {
        self.bus_pos.get(&id).copied()
    }

    pub fn branch_index(&self, id: BranchId) -> Option<usize> {
        self.branch_pos.get(&id).copied()
    }

    /// (from, to) bus indices of a branch, by branch index.
    pub fn branch_ends(&self, branch: usize) -> (usize, usize) {
        self.ends[branch]
    }

    pub(crate) fn adjacency(&self, bus: usize) -> &[(usize, usize)] {
        &self.adjacency[bus]
    }

    /// Dense closed/open mask aligned with `branches()`, validating that the
    /// configuration covers exactly this network's branch ids.
    pub fn closed_mask(&self, cfg: &SwitchConfiguration) -> Result<Vec<bool>, GraphError> {
        let mut mask = vec![false; self.branches.len()];
        let mut seen = 0usize;
        for (id, state) in cfg.iter() {
            match self.branch_pos.get(&id) {
                Some(&i) => {
                    mask[i] = state == SwitchState::Closed;
                    seen += 1;
                }
                None => return Err(GraphError::ConfigUnknownBranch(id)),
            }
        }
        if seen != self.branches.len() {
            for b in &self.branches {
                if cfg.state(b.id).is_none() {
                    return Err(GraphError::ConfigMissingBranch(b.id));
                }
            }
        }
        Ok(mask)
    }
}

/// One traversal step around a loop: the branch taken and whether the
/// traversal agrees with the branch's reference direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoopStep {
    pub branch: BranchId,
    pub forward: bool,
}

/// A simple cycle of branches, stored in canonical traversal order: the walk
/// starts at the lowest-id bus on the cycle and proceeds toward its lower-id
/// cycle neighbor. `buses()[t]` is the bus where `steps()[t]` begins.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Loop {
    steps: Vec<LoopStep>,
    buses: Vec<BusId>,
    generator: BranchId,
}

impl Loop {
    pub fn steps(&self) -> &[LoopStep] {
        &self.steps
    }

    pub fn buses(&self) -> &[BusId] {
        &self.buses
    }

    /// The non-tree branch this loop was generated from; merged loops keep
    /// the generator of the loop they replaced.
    pub fn generator(&self) -> BranchId {
        self.generator
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn branch_ids(&self) -> impl Iterator<Item = BranchId> + '_ {
        self.steps.iter().map(|s| s.branch)
    }

    pub fn contains_branch(&self, id: BranchId) -> bool {
        self.steps.iter().any(|s| s.branch == id)
    }

    pub fn branch_position(&self, id: BranchId) -> Option<usize> {
        self.steps.iter().position(|s| s.branch == id)
    }

    pub fn bus_position(&self, id: BusId) -> Option<usize> {
        self.buses.iter().position(|b| *b == id)
    }

    fn edge_set(&self) -> BTreeSet<BranchId> {
        self.branch_ids().collect()
    }

    /// Canonical loop from an unordered edge set. Fails with
    /// [`GraphError::NonSimpleMerge`] when the edges do not form one simple
    /// cycle.
    fn from_edge_set(
        net: &Network,
        edges: &BTreeSet<BranchId>,
        generator: BranchId,
    ) -> Result<Loop, GraphError> {
        let mut incident: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for id in edges {
            let bi = net.branch_index(*id).ok_or(GraphError::ForeignLoop(*id))?;
            let (f, t) = net.branch_ends(bi);
            incident.entry(f).or_default().push(bi);
            incident.entry(t).or_default().push(bi);
        }
        if incident.values().any(|v| v.len() != 2) {
            return Err(GraphError::NonSimpleMerge(generator));
        }

        let start = *incident
            .keys()
            .min_by_key(|&&b| net.buses[b].id)
            .expect("cycle has buses");
        // Head toward the lower-id neighbor so the orientation is canonical.
        let first = {
            let mut cands = incident[&start].clone();
            cands.sort_by_key(|&bi| {
                let (f, t) = net.branch_ends(bi);
                let other = if f == start { t } else { f };
                net.buses[other].id
            });
            cands[0]
        };

        let mut steps = Vec::with_capacity(edges.len());
        let mut buses = Vec::with_capacity(edges.len());
        let mut here = start;
        let mut via = first;
        loop {
            let (f, t) = net.branch_ends(via);
            let forward = f == here;
            steps.push(LoopStep {
                branch: net.branches[via].id,
                forward,
            });
            buses.push(net.buses[here].id);
            let next = if forward { t } else { f };
            if next == start {
                break;
            }
            if buses.len() > edges.len() {
                return Err(GraphError::NonSimpleMerge(generator));
            }
            let pair = &incident[&next];
            via = if pair[0] == via { pair[1] } else { pair[0] };
            here = next;
        }
        if steps.len() != edges.len() {
            return Err(GraphError::NonSimpleMerge(generator));
        }
        Ok(Loop {
            steps,
            buses,
            generator,
        })
    }
}

/// A contiguous run of loop branches between two injecting buses, in loop
/// traversal order. `start()` and `end()` coincide when a single injecting
/// bus anchors the whole loop.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubPath {
    steps: Vec<LoopStep>,
    start: BusId,
    end: BusId,
}

impl SubPath {
    pub fn steps(&self) -> &[LoopStep] {
        &self.steps
    }

    pub fn start(&self) -> BusId {
        self.start
    }

    pub fn end(&self) -> BusId {
        self.end
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn branch_position(&self, id: BranchId) -> Option<usize> {
        self.steps.iter().position(|s| s.branch == id)
    }
}

/// True iff the closed subgraph of `cfg` is a spanning tree: every bus is
/// reachable from the substation and no closed cycle exists.
pub fn is_radial(net: &Network, cfg: &SwitchConfiguration) -> Result<bool, GraphError> {
    let mask = net.closed_mask(cfg)?;
    let closed = mask.iter().filter(|c| **c).count();
    let n = net.buses().len();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::new();
    seen[net.substation_index()] = true;
    queue.push_back(net.substation_index());
    let mut reached = 1usize;
    while let Some(b) = queue.pop_front() {
        for &(e, other) in net.adjacency(b) {
            if mask[e] && !seen[other] {
                seen[other] = true;
                reached += 1;
                queue.push_back(other);
            }
        }
    }
    Ok(reached == n && closed == n - 1)
}

/// Chordless loop basis of the all-closed network, ordered by generating
/// branch id.
pub fn find_loops(net: &Network) -> Result<Vec<Loop>, GraphError> {
    let mask = vec![true; net.branches().len()];
    loops_for_mask(net, &mask)
}

/// Loop basis of an arbitrary closed subgraph. Fundamental cycles come from
/// a breadth-first spanning tree rooted at the substation; each is then
/// reduced to a chordless cycle by splitting on chords and keeping the side
/// that contains the generating branch.
pub(crate) fn loops_for_mask(net: &Network, mask: &[bool]) -> Result<Vec<Loop>, GraphError> {
    let n = net.buses().len();
    let mut parent_branch = vec![usize::MAX; n];
    let mut parent_bus = vec![usize::MAX; n];
    let mut depth = vec![0usize; n];
    let mut seen = vec![false; n];
    let mut tree_edge = vec![false; net.branches().len()];

    let root = net.substation_index();
    seen[root] = true;
    let mut queue = VecDeque::new();
    queue.push_back(root);
    while let Some(b) = queue.pop_front() {
        for &(e, other) in net.adjacency(b) {
            if mask[e] && !seen[other] {
                seen[other] = true;
                parent_branch[other] = e;
                parent_bus[other] = b;
                depth[other] = depth[b] + 1;
                tree_edge[e] = true;
                queue.push_back(other);
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(GraphError::Disconnected(net.buses()[i].id));
    }

    let mut loops = Vec::new();
    for (e, branch) in net.branches().iter().enumerate() {
        if !mask[e] || tree_edge[e] {
            continue;
        }
        let (mut a, mut b) = net.branch_ends(e);
        let mut edges: BTreeSet<BranchId> = BTreeSet::new();
        edges.insert(branch.id);
        while depth[a] > depth[b] {
            edges.insert(net.branches()[parent_branch[a]].id);
            a = parent_bus[a];
        }
        while depth[b] > depth[a] {
            edges.insert(net.branches()[parent_branch[b]].id);
            b = parent_bus[b];
        }
        while a != b {
            edges.insert(net.branches()[parent_branch[a]].id);
            edges.insert(net.branches()[parent_branch[b]].id);
            a = parent_bus[a];
            b = parent_bus[b];
        }
        let reduced = reduce_to_chordless(net, mask, edges, branch.id)?;
        loops.push(Loop::from_edge_set(net, &reduced, branch.id)?);
    }
    loops.sort_by_key(|l| l.generator);
    Ok(loops)
}

/// Split a cycle on chords until none remain, keeping the side that contains
/// the generating branch. A chord is a closed branch joining two
/// non-adjacent cycle buses.
fn reduce_to_chordless(
    net: &Network,
    mask: &[bool],
    mut edges: BTreeSet<BranchId>,
    generator: BranchId,
) -> Result<BTreeSet<BranchId>, GraphError> {
    loop {
        let lp = Loop::from_edge_set(net, &edges, generator)?;
        let on_cycle: BTreeMap<BusId, usize> = lp
            .buses()
            .iter()
            .enumerate()
            .map(|(i, b)| (*b, i))
            .collect();
        let k = lp.len();
        let mut chord: Option<(usize, usize, BranchId)> = None;
        for (e, branch) in net.branches().iter().enumerate() {
            if !mask[e] || edges.contains(&branch.id) {
                continue;
            }
            let (Some(&pf), Some(&pt)) = (on_cycle.get(&branch.from), on_cycle.get(&branch.to))
            else {
                continue;
            };
            let gap = (pf + k - pt) % k;
            if gap == 1 || gap == k - 1 {
                continue; // joins adjacent cycle buses: a parallel edge, not a chord
            }
            chord = Some((pf, pt, branch.id));
            break;
        }
        let Some((pf, pt, chord_id)) = chord else {
            return Ok(edges);
        };
        let (lo, hi) = if pf < pt { (pf, pt) } else { (pt, pf) };
        // Steps lo..hi form one arc; the rest the other. Keep the arc holding
        // the generator, plus the chord.
        let mut arc_a: BTreeSet<BranchId> = (lo..hi).map(|t| lp.steps()[t].branch).collect();
        let mut arc_b: BTreeSet<BranchId> = (0..k)
            .filter(|t| !(lo..hi).contains(t))
            .map(|t| lp.steps()[t].branch)
            .collect();
        arc_a.insert(chord_id);
        arc_b.insert(chord_id);
        edges = if arc_a.contains(&generator) {
            arc_a
        } else {
            arc_b
        };
    }
}

/// Result of [`update_loops_after_opening`].
#[derive(Clone, Debug)]
pub struct LoopUpdate {
    pub loops: Vec<Loop>,
    /// Set when the opened branch was not on any supplied loop; the list is
    /// then returned unchanged.
    pub opened_outside_any_loop: bool,
}

/// Maintain a loop basis after opening one branch.
///
/// The loop containing the opened branch disappears. Every other loop that
/// also contains it is replaced, in place, by its symmetric difference with
/// the disappearing loop (the classic basis update); the replacement keeps
/// the surviving loop's generator. The result always has exactly one loop
/// fewer, unless the branch was on no loop at all.
pub fn update_loops_after_opening(
    net: &Network,
    loops: &[Loop],
    opened: BranchId,
) -> Result<LoopUpdate, GraphError> {
    let containing: Vec<usize> = loops
        .iter()
        .enumerate()
        .filter(|(_, l)| l.contains_branch(opened))
        .map(|(i, _)| i)
        .collect();
    if containing.is_empty() {
        return Ok(LoopUpdate {
            loops: loops.to_vec(),
            opened_outside_any_loop: true,
        });
    }
    let pivot = *containing
        .iter()
        .min_by_key(|&&i| loops[i].generator)
        .expect("non-empty");
    let pivot_edges = loops[pivot].edge_set();

    let mut out = Vec::with_capacity(loops.len() - 1);
    for (i, lp) in loops.iter().enumerate() {
        if i == pivot {
            continue;
        }
        if containing.contains(&i) {
            let sym: BTreeSet<BranchId> = lp
                .edge_set()
                .symmetric_difference(&pivot_edges)
                .copied()
                .collect();
            out.push(Loop::from_edge_set(net, &sym, lp.generator)?);
        } else {
            out.push(lp.clone());
        }
    }
    Ok(LoopUpdate {
        loops: out,
        opened_outside_any_loop: false,
    })
}

/// Divide a loop into sub-paths delimited by the injecting buses.
///
/// Each sub-path spans the branches from one injecting bus to the next in
/// traversal order; with a single injecting bus the whole loop becomes one
/// sub-path anchored there. The sub-paths partition the loop's branches.
pub fn divide_into_subpaths(lp: &Loop, injecting: &[BusId]) -> Result<Vec<SubPath>, GraphError> {
    if injecting.is_empty() {
        return Err(GraphError::NoInjectingBus);
    }
    let mut positions = BTreeSet::new();
    for id in injecting {
        let pos = lp.bus_position(*id).ok_or(GraphError::BusNotOnLoop(*id))?;
        positions.insert(pos);
    }
    let positions: Vec<usize> = positions.into_iter().collect();
    let n = lp.len();
    let mut out = Vec::with_capacity(positions.len());
    for (a, &start) in positions.iter().enumerate() {
        let end = positions[(a + 1) % positions.len()];
        let span = if positions.len() == 1 {
            n
        } else {
            (end + n - start) % n
        };
        let steps: Vec<LoopStep> = (0..span).map(|t| lp.steps()[(start + t) % n]).collect();
        out.push(SubPath {
            steps,
            start: lp.buses()[start],
            end: lp.buses()[end],
        });
    }
    Ok(out)
}
