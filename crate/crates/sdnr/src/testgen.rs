//! Deterministic random feeder instances for tests and benchmarks.
//!
//! Each generator derives everything from a single seed (ChaCha8), so a
//! given seed always produces the same network and scenario set, on any
//! platform. Instances are admitted only if their all-closed stochastic
//! power flow converges, so downstream consumers can assume solvability;
//! the multi-loop generator additionally bounds the number of radial
//! configurations so exhaustive search stays affordable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

use crate::distflow::{solve_sopf_r, SolverConfig};
use crate::netgraph::{
    Branch, BranchId, Bus, BusId, BusKind, Network, SubstationLimits, SwitchConfiguration,
};
use crate::sbr::spanning_tree_count;
use crate::scenarios::{Scenario, ScenarioInjection, ScenarioSet};

const SCENARIO_COUNT: usize = 5;
const MAX_ATTEMPTS: usize = 64;

/// A feeder whose all-closed graph contains exactly one loop, with a
/// five-scenario injection set. 8 to 15 buses.
pub fn single_loop(seed: u64) -> (Network, ScenarioSet) {
    generate(seed, 1..=1, u64::MAX)
}

/// A feeder with two or three independent loops whose radial-configuration
/// count does not exceed `max_trees`, with a five-scenario injection set.
pub fn multi_loop(seed: u64, max_trees: u64) -> (Network, ScenarioSet) {
    generate(seed, 2..=3, max_trees)
}

fn generate(
    seed: u64,
    extra_edges: std::ops::RangeInclusive<usize>,
    max_trees: u64,
) -> (Network, ScenarioSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let Some((net, scenarios)) = attempt(&mut rng, extra_edges.clone()) else {
            continue;
        };
        if spanning_tree_count(&net)
            .map(|c| c > max_trees.into())
            .unwrap_or(true)
        {
            continue;
        }
        let all_closed = SwitchConfiguration::all_closed(&net);
        if solve_sopf_r(&net, &all_closed, &scenarios, &SolverConfig::default()).is_ok() {
            return (net, scenarios);
        }
    }
    panic!("no admissible instance within {MAX_ATTEMPTS} attempts for seed {seed}");
}

fn attempt(
    rng: &mut ChaCha8Rng,
    extra_edges: std::ops::RangeInclusive<usize>,
) -> Option<(Network, ScenarioSet)> {
    let n: usize = rng.gen_range(8..=15);

    let mut buses = Vec::with_capacity(n);
    buses.push(Bus {
        id: BusId(0),
        kind: BusKind::Substation(SubstationLimits {
            p_min: -10.0,
            p_max: 10.0,
            q_min: -10.0,
            q_max: 10.0,
        }),
        v_min: 0.5,
        v_max: 1.5,
    });
    for i in 1..n {
        buses.push(Bus {
            id: BusId(i as u32),
            kind: BusKind::NonSubstation,
            v_min: 0.5,
            v_max: 1.5,
        });
    }

    // A random spanning tree, then extra edges to create loops.
    let mut pairs: BTreeSet<(u32, u32)> = BTreeSet::new();
    let mut edges: Vec<(u32, u32)> = Vec::new();
    for i in 1..n as u32 {
        let parent = rng.gen_range(0..i);
        pairs.insert((parent.min(i), parent.max(i)));
        edges.push((parent, i));
    }
    let extras = rng.gen_range(extra_edges);
    let mut placed = 0usize;
    let mut guard = 0usize;
    while placed < extras {
        guard += 1;
        if guard > 200 {
            return None;
        }
        let a = rng.gen_range(0..n as u32);
        let b = rng.gen_range(0..n as u32);
        if a == b {
            continue;
        }
        let key = (a.min(b), a.max(b));
        if pairs.contains(&key) {
            continue;
        }
        pairs.insert(key);
        edges.push((a, b));
        placed += 1;
    }

    let branches: Vec<Branch> = edges
        .iter()
        .enumerate()
        .map(|(t, &(from, to))| Branch {
            id: BranchId(t as u32 + 1),
            from: BusId(from),
            to: BusId(to),
            r: rng.gen_range(0.01..=0.10),
            x: rng.gen_range(0.01..=0.10),
            s_max: 10.0,
            p_max: 10.0,
            q_max: 10.0,
            i_max: 10.0,
            switchable: true,
        })
        .collect();
    let net = Network::new(buses, branches, 1.0, 11.0).ok()?;

    // Base injections: mostly loads, some renewable producers.
    let mut base: Vec<(u32, f64, f64)> = Vec::with_capacity(n - 1);
    let mut has_load = false;
    for i in 1..n as u32 {
        if rng.gen_bool(0.35) {
            let p = rng.gen_range(0.01..0.10);
            base.push((i, p, 0.0));
        } else {
            let p = -rng.gen_range(0.01..0.06);
            let q = p * rng.gen_range(0.2..0.5);
            base.push((i, p, q));
            has_load = true;
        }
    }
    if !has_load {
        base[0] = (1, -0.05, -0.02);
    }

    // Scenario weights: positive, summing to one with an exact final fix.
    let raw: Vec<f64> = (0..SCENARIO_COUNT)
        .map(|_| rng.gen_range(0.1..1.0))
        .collect();
    let total: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let head: f64 = weights[..SCENARIO_COUNT - 1].iter().sum();
    weights[SCENARIO_COUNT - 1] = 1.0 - head;

    let scenarios: Vec<Scenario> = weights
        .iter()
        .map(|&weight| {
            let mut injections = BTreeMap::new();
            for &(id, p, q) in &base {
                let scale = rng.gen_range(0.5..1.5);
                injections.insert(
                    BusId(id),
                    ScenarioInjection {
                        p: p * scale,
                        q: q * scale,
                    },
                );
            }
            Scenario { injections, weight }
        })
        .collect();
    let set = ScenarioSet::new(scenarios).ok()?;
    Some((net, set))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::find_loops;
    use num_bigint::BigUint;

    #[test]
    fn generators_are_deterministic() {
        let (net_a, set_a) = single_loop(7);
        let (net_b, set_b) = single_loop(7);
        assert_eq!(net_a.buses().len(), net_b.buses().len());
        assert_eq!(net_a.branches().len(), net_b.branches().len());
        for (a, b) in net_a.branches().iter().zip(net_b.branches()) {
            assert_eq!(a.id, b.id);
            assert_eq!((a.from, a.to), (b.from, b.to));
            assert_eq!(a.r.to_bits(), b.r.to_bits());
            assert_eq!(a.x.to_bits(), b.x.to_bits());
        }
        for (sa, sb) in set_a.scenarios().iter().zip(set_b.scenarios()) {
            assert_eq!(sa.weight.to_bits(), sb.weight.to_bits());
            assert_eq!(sa.injections, sb.injections);
        }
    }

    #[test]
    fn single_loop_instances_have_exactly_one_loop() {
        for seed in 0..20 {
            let (net, set) = single_loop(seed);
            assert_eq!(find_loops(&net).unwrap().len(), 1, "seed {seed}");
            let n = net.buses().len();
            assert!((8..=15).contains(&n), "seed {seed}: {n} buses");
            assert_eq!(set.len(), SCENARIO_COUNT);
            let sum: f64 = set.scenarios().iter().map(|s| s.weight).sum();
            assert!((sum - 1.0).abs() <= 1e-12, "seed {seed}: weights sum {sum}");
        }
    }

    #[test]
    fn multi_loop_instances_respect_the_tree_budget() {
        for seed in 0..10 {
            let (net, _) = multi_loop(seed, 2000);
            let loops = find_loops(&net).unwrap().len();
            assert!((2..=3).contains(&loops), "seed {seed}: {loops} loops");
            let count = spanning_tree_count(&net).unwrap();
            assert!(
                count <= BigUint::from(2000u32),
                "seed {seed}: {count} trees"
            );
        }
    }

    #[test]
    fn generated_instances_solve_all_closed() {
        for seed in [3, 17, 99] {
            let (net, set) = multi_loop(seed, 2000);
            let cfg = SwitchConfiguration::all_closed(&net);
            let sol = solve_sopf_r(&net, &cfg, &set, &SolverConfig::default()).unwrap();
            assert!(sol.expected_objective.is_finite());
        }
    }
}
