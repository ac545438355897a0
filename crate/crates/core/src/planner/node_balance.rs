use std::time::Instant;

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::baselines::{baseline_ep, baseline_hybrid_cb, baseline_tp, default_region_count};
use crate::error::{Error, Result};
use crate::model::{MeshSpec, ModelSpec};
use crate::perfmodel::{node_load_cap, node_overhead_with, CommModel};
use crate::placement::{LayerPlacement, Placement, Strategy, EPS_PLACE};
use crate::stats::{LayerStats, TraceStats};

/// Smallest admissible per-node load `Σ_i P[i][c]·f_i`; every node must do
/// some work.
pub const EPS_LOAD: f64 = 1e-6;

/// One layer's node-balance program.
#[derive(Debug, Clone)]
pub struct NodeBalanceProblem {
    pub stats: LayerStats,
    pub batch: usize,
    pub model: ModelSpec,
    pub mesh: MeshSpec,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverStatus {
    Optimal,
    Feasible,
    Fallback,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    #[serde(skip)]
    pub placement: LayerPlacement,
    /// `t_comp + 2·γ·t̂` of `placement` with the linearized estimate.
    pub objective_value_s: f64,
    pub solver_status: SolverStatus,
    pub wall_time_s: f64,
    /// Objective of the continuous relaxation, a lower bound on the optimum.
    pub lower_bound_s: Option<f64>,
    /// `(objective − lower bound) / objective`.
    pub gap: Option<f64>,
    /// Factor applied to the per-node load cap (1 unless the cap was infeasible).
    pub cap_scale: f64,
    pub lp_evaluations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct NodeBalanceOptions {
    /// Budget of fixed-pattern LP solves spent in local search.
    pub max_lp_evals: usize,
    pub round_threshold: f64,
}

impl Default for NodeBalanceOptions {
    fn default() -> Self {
        Self {
            max_lp_evals: 4000,
            round_threshold: 0.5,
        }
    }
}

/// The program in load units: minimize `T + ρ·C` where `T` is the largest
/// node load `Σ_i P·f` and `C` the largest `Σ_i w_i·Z`.
#[derive(Debug, Clone)]
pub(crate) struct Instance {
    pub e: usize,
    pub d: usize,
    pub f: Vec<f64>,
    pub w: Vec<f64>,
    pub rho: f64,
    pub cap: f64,
    pub eps: f64,
    pub cap_scale: f64,
}

impl Instance {
    pub fn new(problem: &NodeBalanceProblem) -> Result<Self> {
        let NodeBalanceProblem {
            stats,
            batch,
            model,
            mesh,
            gamma,
        } = problem;
        if !(*gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "gamma must be positive, got {gamma}"
            )));
        }
        if stats.freq.is_empty() || stats.groups.is_empty() {
            return Err(Error::InvalidConfig(
                "node balance needs nonempty statistics".into(),
            ));
        }
        let d = mesh.num_nodes();
        let s_comp = *batch as f64 * model.flops_per_token_expert() / mesh.node_compute_flops;
        let s_comm = (model.bytes_per_activation * batch * model.hidden_size) as f64
            / mesh.link_bandwidth_bps;
        let total: f64 = stats.freq.iter().sum();
        let cap = node_load_cap(model, mesh, d);
        let needed = total / d as f64;
        let cap_scale = if needed > cap {
            needed / cap * (1.0 + 1e-9)
        } else {
            1.0
        };
        Ok(Self {
            e: stats.freq.len(),
            d,
            f: stats.freq.clone(),
            w: stats.group_weight(),
            rho: 2.0 * gamma * s_comm / s_comp,
            cap: cap * cap_scale,
            eps: EPS_LOAD.min(needed / 2.0),
            cap_scale,
        })
    }

    pub fn objective(&self, p: &[f64]) -> f64 {
        let (mut t, mut c) = (0.0f64, 0.0f64);
        for node in 0..self.d {
            let (mut load, mut comm) = (0.0, 0.0);
            for i in 0..self.e {
                let x = p[i * self.d + node];
                load += x * self.f[i];
                if x > EPS_PLACE {
                    comm += self.w[i];
                }
            }
            t = t.max(load);
            c = c.max(comm);
        }
        t + self.rho * c
    }

    pub fn loads(&self, p: &[f64]) -> Vec<f64> {
        (0..self.d)
            .map(|c| (0..self.e).map(|i| p[i * self.d + c] * self.f[i]).sum())
            .collect()
    }

    pub fn comm_columns(&self, z: &[bool]) -> Vec<f64> {
        (0..self.d)
            .map(|c| {
                (0..self.e)
                    .filter(|&i| z[i * self.d + c])
                    .map(|i| self.w[i])
                    .sum()
            })
            .collect()
    }

    /// Whether `loads` respect the cap and the minimum load.
    pub fn admissible(&self, loads: &[f64]) -> bool {
        loads
            .iter()
            .all(|&l| l >= self.eps * (1.0 - 1e-9) && l <= self.cap * (1.0 + 1e-9))
    }
}

/// Drops entries at or below `EPS_PLACE` and renormalizes rows.
pub(crate) fn clean(p: &mut [f64], d: usize) {
    for row in p.chunks_mut(d) {
        for x in row.iter_mut() {
            if *x <= EPS_PLACE {
                *x = 0.0;
            }
        }
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|x| *x /= s);
        }
    }
}

#[derive(Debug, Clone)]
struct Candidate {
    p: Vec<f64>,
    z: Vec<bool>,
    obj: f64,
}

/// Minimum-`T` assignment with the active pattern `z` fixed; `None` when the
/// pattern admits no feasible `P`.
fn solve_fixed(inst: &Instance, z: &[bool], cap: f64) -> Option<Vec<f64>> {
    let (e, d) = (inst.e, inst.d);
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let t = lp.add_var(1.0, (0.0, f64::INFINITY));
    let mut vars = vec![None; e * d];
    for i in 0..e {
        let mut row = Vec::new();
        for c in 0..d {
            if z[i * d + c] {
                let v = lp.add_var(0.0, (0.0, 1.0));
                vars[i * d + c] = Some(v);
                row.push((v, 1.0));
            }
        }
        if row.is_empty() {
            return None;
        }
        lp.add_constraint(&row[..], ComparisonOp::Eq, 1.0);
    }
    for c in 0..d {
        let col: Vec<_> = (0..e)
            .filter(|&i| inst.f[i] > 0.0)
            .filter_map(|i| vars[i * d + c].map(|v| (v, inst.f[i])))
            .collect();
        if col.is_empty() {
            return None;
        }
        let mut with_t = col.clone();
        with_t.push((t, -1.0));
        lp.add_constraint(&with_t[..], ComparisonOp::Le, 0.0);
        lp.add_constraint(&col[..], ComparisonOp::Ge, inst.eps);
        if cap.is_finite() {
            lp.add_constraint(&col[..], ComparisonOp::Le, cap);
        }
    }
    let sol = lp.solve().ok()?;
    let mut p = vec![0.0; e * d];
    for (k, v) in vars.iter().enumerate() {
        if let Some(v) = v {
            p[k] = sol[*v].clamp(0.0, 1.0);
        }
    }
    clean(&mut p, d);
    Some(p)
}

fn candidate(inst: &Instance, p: Vec<f64>) -> Candidate {
    let z = p.iter().map(|&x| x > EPS_PLACE).collect();
    let obj = inst.objective(&p);
    Candidate { p, z, obj }
}

fn evaluate(inst: &Instance, z: &[bool], evals: &mut usize) -> Option<Candidate> {
    *evals += 1;
    let p = solve_fixed(inst, z, inst.cap)?;
    let c = candidate(inst, p);
    inst.admissible(&inst.loads(&c.p)).then_some(c)
}

/// Continuous relaxation. At its optimum `Z = P`, so `Z` is eliminated and
/// the communication rows are written on `P` directly.
fn solve_relaxation(inst: &Instance) -> Option<(Vec<f64>, f64)> {
    let (e, d) = (inst.e, inst.d);
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let t = lp.add_var(1.0, (0.0, f64::INFINITY));
    let cm = lp.add_var(inst.rho, (0.0, f64::INFINITY));
    let vars: Vec<_> = (0..e * d).map(|_| lp.add_var(0.0, (0.0, 1.0))).collect();
    for i in 0..e {
        let row: Vec<_> = (0..d).map(|c| (vars[i * d + c], 1.0)).collect();
        lp.add_constraint(&row[..], ComparisonOp::Eq, 1.0);
    }
    for c in 0..d {
        let col: Vec<_> = (0..e)
            .filter(|&i| inst.f[i] > 0.0)
            .map(|i| (vars[i * d + c], inst.f[i]))
            .collect();
        let mut load = col.clone();
        load.push((t, -1.0));
        lp.add_constraint(&load[..], ComparisonOp::Le, 0.0);
        lp.add_constraint(&col[..], ComparisonOp::Ge, inst.eps);
        lp.add_constraint(&col[..], ComparisonOp::Le, inst.cap);
        let mut comm: Vec<_> = (0..e)
            .filter(|&i| inst.w[i] > 0.0)
            .map(|i| (vars[i * d + c], inst.w[i]))
            .collect();
        comm.push((cm, -1.0));
        lp.add_constraint(&comm[..], ComparisonOp::Le, 0.0);
    }
    let sol = lp.solve().ok()?;
    Some((
        vars.iter().map(|&v| sol[v].clamp(0.0, 1.0)).collect(),
        sol.objective(),
    ))
}

/// Makes a pattern feasible: places uncovered experts by LPT, gives every
/// node some weighted expert, then spreads the heaviest expert of the most
/// loaded node until the load cap can be met.
fn repair(inst: &Instance, mut z: Vec<bool>, evals: &mut usize) -> Option<Candidate> {
    let (e, d) = (inst.e, inst.d);
    let est = |z: &[bool]| -> Vec<f64> {
        let mut load = vec![0.0; d];
        for i in 0..e {
            let holders: Vec<usize> = (0..d).filter(|&c| z[i * d + c]).collect();
            for &c in &holders {
                load[c] += inst.f[i] / holders.len() as f64;
            }
        }
        load
    };
    let unplaced: Vec<usize> = (0..e).filter(|&i| !(0..d).any(|c| z[i * d + c])).collect();
    if !unplaced.is_empty() {
        let mut load = est(&z);
        let mut order = unplaced;
        order.sort_by(|&a, &b| inst.f[b].total_cmp(&inst.f[a]).then(a.cmp(&b)));
        for i in order {
            let c = (0..d)
                .min_by(|&a, &b| load[a].total_cmp(&load[b]).then(a.cmp(&b)))
                .unwrap();
            z[i * d + c] = true;
            load[c] += inst.f[i];
        }
    }
    for c in 0..d {
        if (0..e).any(|i| z[i * d + c] && inst.f[i] > 0.0) {
            continue;
        }
        let load = est(&z);
        let donor = (0..d)
            .max_by(|&a, &b| load[a].total_cmp(&load[b]).then(b.cmp(&a)))
            .unwrap();
        let i = (0..e)
            .filter(|&i| z[i * d + donor] && inst.f[i] > 0.0)
            .max_by(|&a, &b| inst.f[a].total_cmp(&inst.f[b]).then(b.cmp(&a)))
            .or_else(|| {
                (0..e)
                    .filter(|&i| inst.f[i] > 0.0)
                    .max_by(|&a, &b| inst.f[a].total_cmp(&inst.f[b]))
            })?;
        z[i * d + c] = true;
    }
    for _ in 0..=e * d {
        if let Some(c) = evaluate(inst, &z, evals) {
            return Some(c);
        }
        *evals += 1;
        let p = solve_fixed(inst, &z, f64::INFINITY)?;
        let load = inst.loads(&p);
        let hot = (0..d)
            .max_by(|&a, &b| load[a].total_cmp(&load[b]).then(b.cmp(&a)))
            .unwrap();
        let mut experts: Vec<usize> = (0..e).filter(|&i| p[i * d + hot] > 0.0).collect();
        experts.sort_by(|&a, &b| {
            (p[b * d + hot] * inst.f[b])
                .total_cmp(&(p[a * d + hot] * inst.f[a]))
                .then(a.cmp(&b))
        });
        let added = experts.iter().find_map(|&i| {
            (0..d)
                .filter(|&c| !z[i * d + c])
                .min_by(|&a, &b| load[a].total_cmp(&load[b]).then(a.cmp(&b)))
                .map(|c| i * d + c)
        })?;
        z[added] = true;
    }
    None
}

fn improves(new: f64, old: f64) -> bool {
    new < old - 1e-12 * old.abs().max(1e-300)
}

/// A pattern change given as the flipped entries.
struct Move {
    flips: Vec<usize>,
    /// Lower bound on the objective after the move.
    bound: f64,
}

/// Single-entry removals, additions for experts on the most loaded nodes,
/// moves off those nodes and off the busiest traffic nodes, and exchanges of
/// which expert a node shares, in that order.
fn neighbours(inst: &Instance, cur: &Candidate) -> Vec<Move> {
    let (e, d) = (inst.e, inst.d);
    let t_floor = inst.f.iter().sum::<f64>() / d as f64;
    let loads = inst.loads(&cur.p);
    let cols = inst.comm_columns(&cur.z);
    let t = loads.iter().copied().fold(0.0, f64::max);
    let cmax = cols.iter().copied().fold(0.0, f64::max);
    let holders: Vec<usize> = (0..e)
        .map(|i| (0..d).filter(|&c| cur.z[i * d + c]).count())
        .collect();
    let comm_after = |flips: &[usize]| -> f64 {
        let mut cols = cols.clone();
        for &k in flips {
            cols[k % d] += if cur.z[k] {
                -inst.w[k / d]
            } else {
                inst.w[k / d]
            };
        }
        cols.into_iter().fold(0.0, f64::max)
    };
    let mut out = Vec::new();
    let mut push = |flips: Vec<usize>, removal_only: bool| {
        let floor = if removal_only { t } else { t_floor };
        let bound = floor + inst.rho * comm_after(&flips);
        out.push(Move { flips, bound });
    };

    let mut removals: Vec<usize> = (0..e * d)
        .filter(|&k| cur.z[k] && holders[k / d] > 1)
        .collect();
    removals.sort_by(|&a, &b| {
        let key = |k: usize| (cols[k % d] < cmax - 1e-15, cur.p[k] * inst.f[k / d]);
        let (ka, kb) = (key(a), key(b));
        ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(a.cmp(&b))
    });
    for k in removals {
        push(vec![k], true);
    }

    let mut by_load: Vec<usize> = (0..d).collect();
    by_load.sort_by(|&a, &b| loads[a].total_cmp(&loads[b]).then(a.cmp(&b)));
    let mut hot_entries: Vec<usize> = (0..d)
        .filter(|&c| loads[c] >= t * (1.0 - 1e-9))
        .flat_map(|c| (0..e).filter(|&i| inst.f[i] > 0.0).map(move |i| i * d + c))
        .filter(|&k| cur.z[k])
        .collect();
    hot_entries.sort_by(|&a, &b| {
        (cur.p[b] * inst.f[b / d])
            .total_cmp(&(cur.p[a] * inst.f[a / d]))
            .then(a.cmp(&b))
    });
    for &k in &hot_entries {
        let i = k / d;
        for &c in &by_load {
            if !cur.z[i * d + c] {
                push(vec![i * d + c], false);
                push(vec![i * d + c, k], false);
            }
        }
    }

    for from in (0..d).filter(|&c| cols[c] >= cmax * (1.0 - 1e-12)) {
        for i in (0..e).filter(|&i| cur.z[i * d + from]) {
            for &c in &by_load {
                if !cur.z[i * d + c] {
                    push(vec![i * d + c, i * d + from], false);
                }
            }
        }
    }

    let mut nodes: Vec<usize> = (0..d).collect();
    nodes.sort_by(|&a, &b| cols[b].total_cmp(&cols[a]).then(a.cmp(&b)));
    for &c in &nodes {
        for i in (0..e).filter(|&i| cur.z[i * d + c] && holders[i] > 1) {
            for j in (0..e).filter(|&j| j != i && !cur.z[j * d + c]) {
                push(vec![i * d + c, j * d + c], false);
            }
        }
    }
    out
}

fn apply(z: &[bool], flips: &[usize]) -> Vec<bool> {
    let mut z = z.to_vec();
    for &k in flips {
        z[k] = !z[k];
    }
    z
}

/// First-improvement descent over [`neighbours`]. When no single move
/// improves, each feasible neighbour's own improving moves are tried once
/// (a two-move lookahead) before giving up.
fn local_search(
    inst: &Instance,
    mut cur: Candidate,
    evals: &mut usize,
    budget: usize,
) -> Candidate {
    'outer: while *evals < budget {
        let moves = neighbours(inst, &cur);
        for m in &moves {
            if !improves(m.bound, cur.obj) {
                continue;
            }
            if let Some(c) = evaluate(inst, &apply(&cur.z, &m.flips), evals) {
                if improves(c.obj, cur.obj) {
                    cur = c;
                    continue 'outer;
                }
            }
            if *evals >= budget {
                break 'outer;
            }
        }
        for m in &moves {
            let Some(mid) = evaluate(inst, &apply(&cur.z, &m.flips), evals) else {
                continue;
            };
            for m2 in neighbours(inst, &mid) {
                if *evals >= budget {
                    break 'outer;
                }
                if !improves(m2.bound, cur.obj) {
                    continue;
                }
                if let Some(c) = evaluate(inst, &apply(&mid.z, &m2.flips), evals) {
                    if improves(c.obj, cur.obj) {
                        cur = c;
                        continue 'outer;
                    }
                }
            }
        }
        break;
    }
    cur
}

fn pattern(p: &LayerPlacement) -> Vec<bool> {
    p.as_flat().iter().map(|&x| x > EPS_PLACE).collect()
}

/// Solves one layer by relax, round, repair and local search, seeded also
/// with the TP, EP and hybrid patterns so the result is never worse than a
/// feasible baseline.
pub fn solve_node_balance(problem: &NodeBalanceProblem) -> Result<SolveReport> {
    solve_node_balance_with(problem, &NodeBalanceOptions::default())
}

pub fn solve_node_balance_with(
    problem: &NodeBalanceProblem,
    options: &NodeBalanceOptions,
) -> Result<SolveReport> {
    let start = Instant::now();
    let inst = Instance::new(problem)?;
    let (e, d) = (inst.e, inst.d);
    let s_comp = problem.batch as f64 * problem.model.flops_per_token_expert()
        / problem.mesh.node_compute_flops;
    let mut evals = 0usize;

    let relaxed = solve_relaxation(&inst);
    let mut seeds = Vec::new();
    let mut integral = false;
    if let Some((p, _)) = &relaxed {
        integral = p.iter().all(|&x| x <= 1e-9 || x >= 1.0 - 1e-9);
        seeds.push(
            p.iter()
                .map(|&x| x >= options.round_threshold)
                .collect::<Vec<bool>>(),
        );
    }
    seeds.push(vec![true; e * d]);
    seeds.push(pattern(&baseline_ep(&inst.f, d)));
    let regions = default_region_count(e, &problem.mesh);
    if let Ok((cb, _)) = baseline_hybrid_cb(&inst.f, &problem.mesh, regions) {
        seeds.push(pattern(&cb));
    }

    let per_seed = options.max_lp_evals / seeds.len();
    let mut best: Option<Candidate> = None;
    for (k, z) in seeds.into_iter().enumerate() {
        let Some(start) = repair(&inst, z, &mut evals) else {
            continue;
        };
        let budget = evals + per_seed.max(1);
        let found = local_search(&inst, start, &mut evals, budget);
        if best.as_ref().is_none_or(|b| improves(found.obj, b.obj)) {
            best = Some(found);
        }
        if k == 0 && integral {
            break;
        }
    }
    let best = best.ok_or_else(|| {
        Error::Solver(format!("no feasible pattern found after {evals} LP solves"))
    })?;

    let placement = LayerPlacement::from_flat(e, d, best.p)?;
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
    let lower_bound_s = relaxed.map(|(_, obj)| obj * s_comp);
    let gap = lower_bound_s.map(|lb| {
        if objective_value_s > 0.0 {
            ((objective_value_s - lb) / objective_value_s).max(0.0)
        } else {
            0.0
        }
    });
    let solver_status = if inst.cap_scale > 1.0 {
        SolverStatus::Fallback
    } else if integral {
        SolverStatus::Optimal
    } else {
        SolverStatus::Feasible
    };
    Ok(SolveReport {
        placement,
        objective_value_s,
        solver_status,
        wall_time_s: start.elapsed().as_secs_f64(),
        lower_bound_s,
        gap,
        cap_scale: inst.cap_scale,
        lp_evaluations: evals,
    })
}

/// Linearized objective of a baseline and whether it meets the load cap and
/// minimum load the node-balance program imposes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineObjective {
    pub strategy: Strategy,
    pub objective_s: f64,
    pub within_cap: bool,
}

pub fn baseline_objectives(problem: &NodeBalanceProblem) -> Result<Vec<BaselineObjective>> {
    let inst = Instance::new(problem)?;
    let f = &problem.stats.freq;
    let d = problem.mesh.num_nodes();
    let mut out = Vec::new();
    let regions = default_region_count(f.len(), &problem.mesh);
    let candidates = [
        (Strategy::Tp, Some(baseline_tp(f.len(), d))),
        (Strategy::Ep, Some(baseline_ep(f, d))),
        (
            Strategy::HybridCb,
            baseline_hybrid_cb(f, &problem.mesh, regions)
                .ok()
                .map(|x| x.0),
        ),
    ];
    for (strategy, layer) in candidates {
        let Some(layer) = layer else { continue };
        let objective_s = node_overhead_with(
            &layer,
            &problem.stats,
            problem.batch,
            &problem.model,
            &problem.mesh,
            problem.gamma,
            CommModel::Linearized,
        )?
        .t_node_overhead_s;
        out.push(BaselineObjective {
            strategy,
            objective_s,
            within_cap: inst.admissible(&inst.loads(layer.as_flat())),
        });
    }
    Ok(out)
}

/// Independent node-balance solves for every layer of `stats`, run in
/// parallel.
pub fn plan_node_balance(
    stats: &TraceStats,
    batch: usize,
    model: &ModelSpec,
    mesh: &MeshSpec,
    gamma: f64,
    options: &NodeBalanceOptions,
) -> Result<(Placement, Vec<SolveReport>)> {
    let reports = stats
        .layers
        .par_iter()
        .map(|layer| {
            let problem = NodeBalanceProblem {
                stats: layer.clone(),
                batch,
                model: *model,
                mesh: *mesh,
                gamma,
            };
            solve_node_balance_with(&problem, options)
        })
        .collect::<Result<Vec<_>>>()?;
    let placement = Placement {
        strategy: Strategy::NodeBalance,
        layers: reports.iter().map(|r| r.placement.clone()).collect(),
    };
    Ok((placement, reports))
}
