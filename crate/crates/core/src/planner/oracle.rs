use std::time::Instant;

use petgraph::algo::ford_fulkerson;
use petgraph::graph::{EdgeIndex, Graph};

use super::node_balance::{clean, Instance, NodeBalanceProblem, SolveReport, SolverStatus};
use crate::error::{Error, Result};
use crate::perfmodel::{node_overhead_with, CommModel};
use crate::placement::LayerPlacement;

/// Largest `E·D` the exhaustive oracle accepts.
pub const BRUTE_FORCE_LIMIT: usize = 12;

/// Whether expert work `f` can be routed along pattern `z` with every node
/// load in `[lower, upper]`; returns the resulting `P` when it can.
///
/// Expert supplies are exact (lower = upper = `f_i`); lower bounds are
/// removed by the usual demand transformation onto a super source and sink,
/// and feasibility is a saturating max flow.
fn route(inst: &Instance, z: &[bool], lower: f64, upper: f64) -> Option<Vec<f64>> {
    let (e, d) = (inst.e, inst.d);
    let supply: f64 = inst.f.iter().sum();
    let unbounded = 4.0 * supply + 1.0;
    let mut g: Graph<(), f64> = Graph::new();
    let s = g.add_node(());
    let experts: Vec<_> = (0..e).map(|_| g.add_node(())).collect();
    let nodes: Vec<_> = (0..d).map(|_| g.add_node(())).collect();
    let t = g.add_node(());
    let (ss, tt) = (g.add_node(()), g.add_node(()));
    let mut demand = vec![0.0; g.node_count()];
    let mut edges: Vec<Option<EdgeIndex>> = vec![None; e * d];
    for i in 0..e {
        if inst.f[i] <= 0.0 {
            continue;
        }
        demand[experts[i].index()] += inst.f[i];
        demand[s.index()] -= inst.f[i];
        for c in 0..d {
            if z[i * d + c] {
                edges[i * d + c] = Some(g.add_edge(experts[i], nodes[c], unbounded));
            }
        }
    }
    for &n in &nodes {
        g.add_edge(n, t, upper - lower);
        demand[t.index()] += lower;
        demand[n.index()] -= lower;
    }
    g.add_edge(t, s, unbounded);
    let mut required = 0.0;
    for (v, &dem) in demand.iter().enumerate() {
        let v = petgraph::graph::NodeIndex::new(v);
        if dem > 0.0 {
            g.add_edge(ss, v, dem);
            required += dem;
        } else if dem < 0.0 {
            g.add_edge(v, tt, -dem);
        }
    }
    let (total, flows) = ford_fulkerson(&g, ss, tt);
    if total < required * (1.0 - 1e-12) {
        return None;
    }
    let mut p = vec![0.0; e * d];
    for i in 0..e {
        let holders: Vec<usize> = (0..d).filter(|&c| z[i * d + c]).collect();
        if inst.f[i] <= 0.0 {
            holders
                .iter()
                .for_each(|&c| p[i * d + c] = 1.0 / holders.len() as f64);
            continue;
        }
        for &c in &holders {
            p[i * d + c] = edges[i * d + c].map_or(0.0, |h| flows[h.index()]) / inst.f[i];
        }
    }
    clean(&mut p, d);
    Some(p)
}

/// Minimum largest node load for pattern `z`, by bisection on the load bound.
fn min_max_load(inst: &Instance, z: &[bool]) -> Option<Vec<f64>> {
    if (0..inst.e).any(|i| !(0..inst.d).any(|c| z[i * inst.d + c])) {
        return None;
    }
    let mut best = route(inst, z, inst.eps, inst.cap)?;
    let mut lo = inst.f.iter().sum::<f64>() / inst.d as f64;
    let mut hi = inst.cap;
    for _ in 0..200 {
        if hi - lo <= 1e-15 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        match route(inst, z, inst.eps, mid) {
            Some(p) => {
                best = p;
                hi = mid;
            }
            None => lo = mid,
        }
    }
    Some(best)
}

/// Ground truth for tiny instances: every activity pattern without an empty
/// row, each solved exactly for the best `P`.
pub fn brute_force_node_balance(problem: &NodeBalanceProblem) -> Result<SolveReport> {
    let start = Instant::now();
    let inst = Instance::new(problem)?;
    let (e, d) = (inst.e, inst.d);
    if e * d > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(format!(
            "exhaustive node balance needs E·D ≤ {BRUTE_FORCE_LIMIT}, got {}",
            e * d
        )));
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut solves = 0;
    for mask in 1u32..(1 << (e * d)) {
        let z: Vec<bool> = (0..e * d).map(|k| mask >> k & 1 == 1).collect();
        solves += 1;
        let Some(p) = min_max_load(&inst, &z) else {
            continue;
        };
        let obj = inst.objective(&p);
        if best.as_ref().is_none_or(|b| obj < b.0) {
            best = Some((obj, p));
        }
    }
    let (_, p) = best.ok_or_else(|| Error::Solver("no feasible activity pattern".into()))?;
    let placement = LayerPlacement::from_flat(e, d, p)?;
    let objective_value_s = node_overhead_with(
        &placement,
        &problem.stats,
        problem.batch,
        &problem.model,
        &problem.mesh,
        problem.gamma,
        CommModel::Linearized,
    )?
    .t_node_overhead_s;
    Ok(SolveReport {
        placement,
        objective_value_s,
        solver_status: if inst.cap_scale > 1.0 {
            SolverStatus::Fallback
        } else {
            SolverStatus::Optimal
        },
        wall_time_s: start.elapsed().as_secs_f64(),
        lower_bound_s: Some(objective_value_s),
        gap: Some(0.0),
        cap_scale: inst.cap_scale,
        lp_evaluations: solves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::node_balance::tests::tiny;

    #[test]
    fn single_expert_single_node() {
        // The linearized traffic term counts the lone expert even on one
        // node, so it is priced out with an unbounded link.
        let mut problem = tiny(&[1.0], 1e30);
        problem.mesh = crate::model::MeshSpec::new(1, 1, problem.mesh.hardware());
        let r = brute_force_node_balance(&problem).unwrap();
        assert_eq!(r.placement.as_flat(), &[1.0]);
        assert!((r.objective_value_s - 16.0).abs() < 1e-9);
        let with_links = brute_force_node_balance(&NodeBalanceProblem {
            mesh: crate::model::MeshSpec::new(
                1,
                1,
                crate::model::HardwareProfile::new(1.0, 1.0, 0.0),
            ),
            ..problem
        })
        .unwrap();
        assert!((with_links.objective_value_s - (16.0 + 2.0 * 32.0)).abs() < 1e-9);
    }

    #[test]
    fn worked_instances() {
        let r = brute_force_node_balance(&tiny(&[0.75, 0.25], 1e30)).unwrap();
        assert!((r.objective_value_s - 8.0).abs() < 1e-9);
        let r = brute_force_node_balance(&tiny(&[0.75, 0.25], 1e-3)).unwrap();
        let t_comp = 16.0
            * r.placement
                .weighted_node_sums(&[0.75, 0.25])
                .into_iter()
                .fold(0.0, f64::max);
        assert!((t_comp - 12.0).abs() < 1e-9);
    }

    #[test]
    fn invariant_under_node_relabeling() {
        let problem = tiny(&[0.5, 0.3, 0.2], 2.0);
        let a = brute_force_node_balance(&problem).unwrap();
        let swapped = a.placement.permute_nodes(&[1, 0]);
        let b = node_overhead_with(
            &swapped,
            &problem.stats,
            8,
            &problem.model,
            &problem.mesh,
            1.0,
            CommModel::Linearized,
        )
        .unwrap();
        assert!((a.objective_value_s - b.t_node_overhead_s).abs() < 1e-12);
    }

    #[test]
    fn size_bound() {
        let mut problem = tiny(&[0.2; 5], 1.0);
        problem.mesh = crate::model::MeshSpec::new(1, 3, problem.mesh.hardware());
        assert!(matches!(
            brute_force_node_balance(&problem),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn flow_agrees_with_hand_solution() {
        let problem = tiny(&[0.75, 0.25], 1e30);
        let inst = Instance::new(&problem).unwrap();
        let p = min_max_load(&inst, &[true, true, false, true]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-9 && (p[1] - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn solver_matches_oracle_on_tiny_instances() {
        use crate::planner::solve_node_balance;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let e = rng.gen_range(1..=3);
            let raw: Vec<f64> = (0..e).map(|_| rng.gen_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let f: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let bw = 10f64.powf(rng.gen_range(-3.0..3.0));
            let problem = tiny(&f, bw);
            let a = solve_node_balance(&problem).unwrap();
            let b = brute_force_node_balance(&problem).unwrap();
            let rel = (a.objective_value_s - b.objective_value_s).abs() / b.objective_value_s;
            assert!(
                rel <= 1e-6,
                "f={f:?} bw={bw} solver={} {:?} oracle={} {:?}",
                a.objective_value_s,
                a.placement,
                b.objective_value_s,
                b.placement
            );
        }
    }
}
