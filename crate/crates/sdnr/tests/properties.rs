//! Property-based validation over randomized feeder instances.
//!
//! The branch-flow solvers are cross-checked against an independent nodal
//! power flow in complex voltage phasors (an implicit-impedance fixed
//! point), and the graph and reconfiguration routines are checked against
//! structural invariants that must hold for every instance.

use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;

use sdnr::{
    divide_into_subpaths, exhaustive_oracle, expected_loss, find_loops, is_radial, loop_injections,
    reduce_kmedoids, soc_exactness_residual, solve_opf_r, solve_sopf_r, testgen, two_stage_sbr,
    update_loops_after_opening, BusId, Network, Scenario, SolverConfig, SwitchConfiguration,
    SwitchState, TimeSeriesTable,
};

/// Complex nodal voltages from an implicit-impedance fixed point: the
/// substation holds 1 + 0j and every other bus satisfies
/// `S_i = V_i * conj(I_i)` with `I = Y V`. Returns bus voltages or `None`
/// on non-convergence.
fn nodal_voltages(
    net: &Network,
    cfg: &SwitchConfiguration,
    scenario: &Scenario,
) -> Option<Vec<Complex64>> {
    let mask = net.closed_mask(cfg).ok()?;
    let n = net.buses().len();
    let sub = net.substation_index();
    let mut slot = vec![usize::MAX; n];
    let mut k = 0usize;
    for (i, s) in slot.iter_mut().enumerate() {
        if i != sub {
            *s = k;
            k += 1;
        }
    }

    let mut y_ll = DMatrix::<Complex64>::zeros(k, k);
    let mut y_ls = vec![Complex64::new(0.0, 0.0); k];
    for (e, branch) in net.branches().iter().enumerate() {
        if !mask[e] {
            continue;
        }
        let y = Complex64::new(1.0, 0.0) / Complex64::new(branch.r, branch.x);
        let (fi, ti) = net.branch_ends(e);
        for (a, b) in [(fi, ti), (ti, fi)] {
            if a == sub {
                continue;
            }
            let sa = slot[a];
            y_ll[(sa, sa)] += y;
            if b == sub {
                y_ls[sa] -= y;
            } else {
                y_ll[(sa, slot[b])] -= y;
            }
        }
    }
    let lu = y_ll.lu();

    let mut s = vec![Complex64::new(0.0, 0.0); k];
    for (i, bus) in net.buses().iter().enumerate() {
        if i == sub {
            continue;
        }
        let inj = scenario.injection(bus.id)?;
        s[slot[i]] = Complex64::new(inj.p, inj.q);
    }

    let v_sub = Complex64::new(1.0, 0.0);
    let mut v = nalgebra::DVector::from_element(k, Complex64::new(1.0, 0.0));
    for _ in 0..5000 {
        let mut rhs = nalgebra::DVector::from_element(k, Complex64::new(0.0, 0.0));
        for i in 0..k {
            if v[i].norm() < 1e-6 {
                return None;
            }
            rhs[i] = (s[i] / v[i]).conj() - y_ls[i] * v_sub;
        }
        let next = lu.solve(&rhs)?;
        let delta = (0..k).fold(0.0_f64, |m, i| m.max((next[i] - v[i]).norm()));
        v = next;
        if delta <= 1e-14 {
            let mut full = vec![v_sub; n];
            for i in 0..n {
                if i != sub {
                    full[i] = v[slot[i]];
                }
            }
            return Some(full);
        }
    }
    None
}

/// Compare a branch-flow solution with the nodal oracle on every variable.
fn assert_matches_nodal_oracle(net: &Network, cfg: &SwitchConfiguration, scenario: &Scenario) {
    let config = SolverConfig {
        tolerance: 1e-11,
        ..SolverConfig::default()
    };
    let sol = solve_opf_r(net, cfg, scenario, &config).expect("branch-flow solve");
    let volts = nodal_voltages(net, cfg, scenario).expect("nodal oracle solve");

    for (i, volt) in volts.iter().enumerate() {
        let v_oracle = volt.norm_sqr();
        assert!(
            (sol.v[i] - v_oracle).abs() <= 1e-6,
            "bus {} squared voltage: {} vs {}",
            net.buses()[i].id,
            sol.v[i],
            v_oracle
        );
    }
    for (e, branch) in net.branches().iter().enumerate() {
        if !sol.closed[e] {
            continue;
        }
        let (fi, ti) = net.branch_ends(e);
        let y = Complex64::new(1.0, 0.0) / Complex64::new(branch.r, branch.x);
        let current = (volts[fi] - volts[ti]) * y;
        let s_from = volts[fi] * current.conj();
        assert!(
            (sol.p[e] - s_from.re).abs() <= 1e-6,
            "branch {} active flow: {} vs {}",
            branch.id,
            sol.p[e],
            s_from.re
        );
        assert!(
            (sol.q[e] - s_from.im).abs() <= 1e-6,
            "branch {} reactive flow: {} vs {}",
            branch.id,
            sol.q[e],
            s_from.im
        );
        assert!(
            (sol.l[e] - current.norm_sqr()).abs() <= 1e-6,
            "branch {} squared current: {} vs {}",
            branch.id,
            sol.l[e],
            current.norm_sqr()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Meshed (all-closed) branch-flow solutions agree with the nodal
    /// power flow oracle.
    #[test]
    fn meshed_solver_matches_the_nodal_oracle(seed in 0u64..400) {
        let (net, set) = testgen::multi_loop(seed, 2000);
        let cfg = SwitchConfiguration::all_closed(&net);
        assert_matches_nodal_oracle(&net, &cfg, &set.scenarios()[0]);
    }

    /// Radial (sweep) solutions agree with the nodal power flow oracle.
    #[test]
    fn radial_solver_matches_the_nodal_oracle(seed in 0u64..400) {
        let (net, set) = testgen::single_loop(seed);
        let lp = &find_loops(&net).unwrap()[0];
        let mut cfg = SwitchConfiguration::all_closed(&net);
        cfg.set(lp.generator(), SwitchState::Open).unwrap();
        prop_assert!(is_radial(&net, &cfg).unwrap());
        assert_matches_nodal_oracle(&net, &cfg, &set.scenarios()[0]);
    }

    /// The loop basis has exactly the cyclomatic number of loops, and
    /// opening one branch per loop step-by-step ends radial.
    #[test]
    fn loop_basis_counts_and_openings(seed in 0u64..400) {
        let (net, _) = testgen::multi_loop(seed, 2000);
        let n = net.buses().len();
        let m = net.branches().len();
        let mut loops = find_loops(&net).unwrap();
        prop_assert_eq!(loops.len(), m - n + 1);

        let mut opened = Vec::new();
        while let Some(first) = loops.first() {
            let pick = first.steps()[0].branch;
            opened.push(pick);
            let before = loops.len();
            let upd = update_loops_after_opening(&net, &loops, pick).unwrap();
            prop_assert!(!upd.opened_outside_any_loop);
            prop_assert_eq!(upd.loops.len(), before - 1);
            loops = upd.loops;
        }
        let cfg = SwitchConfiguration::opening(&net, &opened).unwrap();
        prop_assert!(is_radial(&net, &cfg).unwrap());
    }

    /// Sub-paths partition each loop's branches, with one sub-path per
    /// injecting bus.
    #[test]
    fn subpaths_partition_loops(seed in 0u64..400) {
        let (net, set) = testgen::multi_loop(seed, 2000);
        let cfg = SwitchConfiguration::all_closed(&net);
        let config = SolverConfig::default();
        let sols = solve_sopf_r(&net, &cfg, &set, &config).unwrap();
        for lp in &find_loops(&net).unwrap() {
            let inj = loop_injections(&net, lp, &sols).unwrap();
            let mut injecting: Vec<BusId> = lp
                .buses()
                .iter()
                .zip(&inj)
                .filter(|(_, p)| **p > config.tolerance)
                .map(|(b, _)| *b)
                .collect();
            if injecting.is_empty() {
                injecting.push(*lp.buses().iter().min().unwrap());
            }
            let subs = divide_into_subpaths(lp, &injecting).unwrap();
            prop_assert_eq!(subs.len(), injecting.len());
            let mut seen: Vec<_> = subs
                .iter()
                .flat_map(|s| s.steps().iter().map(|st| st.branch))
                .collect();
            let total = seen.len();
            prop_assert_eq!(total, lp.len());
            seen.sort();
            seen.dedup();
            prop_assert_eq!(seen.len(), lp.len());
        }
    }

    /// Converged solutions satisfy every model equation: power balance,
    /// voltage drops, current anchoring, and the loss identity.
    #[test]
    fn solutions_satisfy_conservation(seed in 0u64..400) {
        let (net, set) = testgen::multi_loop(seed, 2000);
        let cfg = SwitchConfiguration::all_closed(&net);
        let config = SolverConfig::default();
        let sols = solve_sopf_r(&net, &cfg, &set, &config).unwrap();
        for sol in &sols.scenarios {
            prop_assert!(sol.max_mismatch <= config.tolerance);
            prop_assert!(soc_exactness_residual(&net, sol) <= 1e-7);
            let injections: f64 = sol.p_inj.iter().sum();
            let loss: f64 = net
                .branches()
                .iter()
                .enumerate()
                .filter(|(e, _)| sol.closed[*e])
                .map(|(e, b)| b.r * sol.l[e])
                .sum();
            prop_assert!((sol.p_slack + injections - loss).abs() <= 1e-7);
        }
        prop_assert!(expected_loss(&net, &sols) >= -1e-9);
    }

    /// The stochastic solve returns bit-identical aggregates regardless of
    /// how many worker threads evaluate the scenarios.
    #[test]
    fn stochastic_solve_is_thread_count_invariant(seed in 0u64..200) {
        let (net, set) = testgen::multi_loop(seed, 2000);
        let cfg = SwitchConfiguration::all_closed(&net);
        let config = SolverConfig::default();
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| solve_sopf_r(&net, &cfg, &set, &config).unwrap());
        let many = rayon::ThreadPoolBuilder::new()
            .num_threads(8)
            .build()
            .unwrap()
            .install(|| solve_sopf_r(&net, &cfg, &set, &config).unwrap());
        prop_assert_eq!(
            single.expected_objective.to_bits(),
            many.expected_objective.to_bits()
        );
        for e in 0..net.branches().len() {
            prop_assert_eq!(
                single.expected_flow[e].to_bits(),
                many.expected_flow[e].to_bits()
            );
        }
    }

    /// The heuristic can never beat the exhaustive optimum, and both
    /// produce radial configurations.
    #[test]
    fn two_stage_never_beats_the_oracle(seed in 0u64..60) {
        let (net, set) = testgen::multi_loop(seed, 1500);
        let config = SolverConfig::default();
        let heuristic = two_stage_sbr(&net, &set, &config).unwrap();
        let oracle = exhaustive_oracle(&net, &set, &config, 1500).unwrap();
        prop_assert!(is_radial(&net, &heuristic.config).unwrap());
        prop_assert!(is_radial(&net, &oracle.config).unwrap());
        prop_assert!(heuristic.objective >= oracle.objective - 1e-9);
        let info = oracle.oracle.unwrap();
        prop_assert_eq!(
            num_bigint::BigUint::from(info.enumerated),
            info.tree_count
        );
    }

    /// k-medoids output is internally consistent for arbitrary tables.
    #[test]
    fn kmedoids_output_is_consistent(days in 1usize..6, k in 1usize..8, seed in 0u64..500) {
        let table = sdnr::synthetic_table(days, seed);
        let k = k.min(table.len());
        let c = reduce_kmedoids(&table, k, seed ^ 0xABCD).unwrap();

        prop_assert_eq!(c.medoid_rows.len(), k);
        prop_assert!(c.medoid_rows.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(c.medoid_rows.iter().all(|&m| m < table.len()));
        prop_assert_eq!(c.assignment.len(), table.len());
        prop_assert!(c.assignment.iter().all(|&s| s < k));
        let sum: f64 = c.probabilities.iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-9);
        let mut counts = vec![0usize; k];
        for &s in &c.assignment {
            counts[s] += 1;
        }
        for (s, &cnt) in counts.iter().enumerate() {
            prop_assert!((c.probabilities[s] - cnt as f64 / table.len() as f64).abs() <= 1e-12);
        }
        // Every medoid serves itself.
        for (s, &m) in c.medoid_rows.iter().enumerate() {
            prop_assert_eq!(c.assignment[m], s);
        }
        prop_assert!(c.cost_history.windows(2).all(|w| w[1] < w[0]));
    }

    /// Clustering probabilities feed straight into a valid scenario set,
    /// whatever the table.
    #[test]
    fn clustering_probabilities_form_a_distribution(days in 1usize..5, seed in 0u64..300) {
        let table = sdnr::synthetic_table(days, seed);
        let k = 4.min(table.len());
        let c = reduce_kmedoids(&table, k, seed).unwrap();
        let rows: Vec<_> = c.scenario_factors();
        prop_assert_eq!(rows.len(), k);
        let sum: f64 = rows.iter().map(|r| r.probability).sum();
        prop_assert!((sum - 1.0).abs() <= 1e-9);
        prop_assert!(TimeSeriesTable::new(rows.iter().map(|r| r.factors).collect()).is_ok());
    }
}
