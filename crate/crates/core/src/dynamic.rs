//! Online dynamic placement: next-layer load prediction, pre-broadcast of
//! hot experts sized by the α–β model, and load-aware token dispatch.

use serde::{Deserialize, Serialize};

use crate::activations::{ActivationTrace, LayerActivations};
use crate::error::{Error, Result};
use crate::model::{MeshSpec, ModelSpec};
use crate::netsim::{
    remap_tasks, simulate, tasks_from_sources, ProportionalDispatch, DEFAULT_CHUNK_BYTES,
};
use crate::placement::{LayerPlacement, NodeMapping, Placement, EPS_PLACE};

/// How a token's expert work is assigned among replicas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DispatchMode {
    /// Any replica, least loaded first.
    LeastLoaded,
    /// Least loaded among replicas on nodes the token already uses under
    /// static dispatch, so no token gains a source node.
    CommFree,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynamicPolicy {
    pub prediction_accuracy: f64,
    /// Per-hop latency, seconds.
    pub alpha_s: f64,
    /// Transmission cost, seconds per byte.
    pub beta_s_per_byte: f64,
    /// Size of one expert's parameters in bytes.
    pub expert_bytes: u64,
    pub enabled: bool,
    /// Upper bound on pre-broadcasts per layer on top of the latency budget.
    pub max_broadcasts: Option<usize>,
    pub dispatch: DispatchMode,
}

impl DynamicPolicy {
    /// `α` from the per-hop latency, `β = 1/BW`, and the model's expert size.
    pub fn from_hardware(mesh: &MeshSpec, model: &ModelSpec, prediction_accuracy: f64) -> Self {
        Self {
            prediction_accuracy,
            alpha_s: mesh.per_hop_latency_s,
            beta_s_per_byte: 1.0 / mesh.link_bandwidth_bps,
            expert_bytes: model.expert_bytes(),
            enabled: true,
            max_broadcasts: None,
            dispatch: DispatchMode::LeastLoaded,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prediction_accuracy) {
            return Err(Error::InvalidConfig(format!(
                "prediction accuracy {} outside [0, 1]",
                self.prediction_accuracy
            )));
        }
        if !(self.alpha_s >= 0.0 && self.beta_s_per_byte >= 0.0) {
            return Err(Error::InvalidConfig(
                "alpha and beta must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// `f̂ = a·f_next + (1 − a)·e/E`.
pub fn predict_frequencies(next_freq: &[f64], experts_per_token: usize, accuracy: f64) -> Vec<f64> {
    let uniform = experts_per_token as f64 / next_freq.len() as f64;
    next_freq
        .iter()
        .map(|&f| accuracy * f + (1.0 - accuracy) * uniform)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Priority {
    /// `2·P[i][c]·f̂_i·IS/comp`, row-major `E×D`.
    pub scores: Vec<f64>,
    pub predicted_loads: Vec<f64>,
    /// Highest-scoring eligible expert on the most loaded node that has one.
    pub selected: Option<(usize, usize)>,
}

/// Priority scores under predicted frequencies and the pre-broadcast pick.
/// Nodes are tried from the highest predicted load `Σ_i P·f̂` down; experts
/// flagged in `exclude` are never picked. Ties go to lower ids.
pub fn priority_scores(
    layer: &LayerPlacement,
    f_hat: &[f64],
    model: &ModelSpec,
    mesh: &MeshSpec,
    exclude: &[bool],
) -> Priority {
    let (e, d) = (layer.num_experts(), layer.num_nodes());
    let per = 2.0 * model.intermediate_size as f64 / mesh.node_compute_flops;
    let scores: Vec<f64> = (0..e * d)
        .map(|k| per * layer.as_flat()[k] * f_hat[k / d])
        .collect();
    let predicted_loads = layer.weighted_node_sums(f_hat);
    let mut nodes: Vec<usize> = (0..d).collect();
    nodes.sort_by(|&a, &b| {
        predicted_loads[b]
            .total_cmp(&predicted_loads[a])
            .then(a.cmp(&b))
    });
    let selected = nodes.iter().find_map(|&c| {
        (0..e)
            .filter(|&i| {
                !exclude.get(i).copied().unwrap_or(false)
                    && layer.get(i, c) > EPS_PLACE
                    && f_hat[i] > 0.0
            })
            .max_by(|&a, &b| {
                scores[a * d + c]
                    .total_cmp(&scores[b * d + c])
                    .then(b.cmp(&a))
            })
            .map(|i| (i, c))
    });
    Priority {
        scores,
        predicted_loads,
        selected,
    }
}

/// `t_pre_b(c, k) = α·(2√D + V/c) + k·β·(V + 2c√D)` for payload `V`.
pub fn pre_broadcast_time(
    alpha: f64,
    beta: f64,
    k: usize,
    num_nodes: usize,
    payload: f64,
    chunk: f64,
) -> f64 {
    let sd = (num_nodes as f64).sqrt();
    alpha * (2.0 * sd + payload / chunk) + k as f64 * beta * (payload + 2.0 * chunk * sd)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub c_star: f64,
    pub t_pre_b_s: f64,
    pub lower_bound_s: f64,
}

/// Optimal chunk `c* = √(α·V / (2·β·k·√D))`, its cost, and the closed-form
/// bound `V·β·k + 2α√D + 2√(2√D·β·k·α·V)`.
pub fn optimal_chunk(
    alpha: f64,
    beta: f64,
    k: usize,
    num_nodes: usize,
    payload: f64,
) -> Result<ChunkPlan> {
    if !(alpha > 0.0 && beta > 0.0 && k >= 1 && num_nodes >= 1 && payload > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "chunk sizing needs positive inputs (alpha={alpha}, beta={beta}, k={k}, D={num_nodes}, V={payload})"
        )));
    }
    let sd = (num_nodes as f64).sqrt();
    let kf = k as f64;
    let c_star = (alpha * payload / (2.0 * beta * kf * sd)).sqrt();
    let lower_bound_s = payload * beta * kf
        + 2.0 * alpha * sd
        + 2.0 * (2.0 * sd * beta * kf * alpha * payload).sqrt();
    Ok(ChunkPlan {
        c_star,
        t_pre_b_s: pre_broadcast_time(alpha, beta, k, num_nodes, payload, c_star),
        lower_bound_s,
    })
}

/// Cost of `k` pre-broadcasts of one expert at the optimal chunk; with no
/// hop latency the chunk shrinks to nothing and the cost is `k·β·V`.
pub fn pre_broadcast_cost(
    policy: &DynamicPolicy,
    k: usize,
    num_nodes: usize,
) -> Result<(f64, Option<f64>)> {
    if k == 0 {
        return Ok((0.0, None));
    }
    let v = policy.expert_bytes as f64;
    if policy.alpha_s == 0.0 || policy.beta_s_per_byte == 0.0 {
        let sd = (num_nodes as f64).sqrt();
        return Ok((
            2.0 * policy.alpha_s * sd + k as f64 * policy.beta_s_per_byte * v,
            None,
        ));
    }
    let plan = optimal_chunk(policy.alpha_s, policy.beta_s_per_byte, k, num_nodes, v)?;
    Ok((plan.t_pre_b_s, Some(plan.c_star)))
}

const MAX_BUDGET: usize = 1 << 20;

/// Largest `k` whose optimal pre-broadcast cost fits in the previous layer's
/// latency, found by doubling and bisection.
pub fn broadcast_budget(
    prev_layer_latency_s: f64,
    policy: &DynamicPolicy,
    num_nodes: usize,
) -> Result<usize> {
    let fits = |k: usize| -> Result<bool> {
        Ok(pre_broadcast_cost(policy, k, num_nodes)?.0 <= prev_layer_latency_s)
    };
    if prev_layer_latency_s.is_nan() || prev_layer_latency_s <= 0.0 || !fits(1)? {
        return Ok(0);
    }
    let mut lo = 1;
    let mut hi = 2;
    while hi <= MAX_BUDGET && fits(hi)? {
        lo = hi;
        hi *= 2;
    }
    if hi > MAX_BUDGET {
        return Ok(MAX_BUDGET);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Assigns each (token, expert) unit to one replica node.
///
/// Units with a single candidate are placed first; the rest go, token by
/// token, to the candidate with the smallest running load (ties to the
/// lowest node id), each adding `unit_s`. Under [`DispatchMode::CommFree`]
/// candidates are limited to the nodes in `reference[t]`, the token's
/// sources under static dispatch.
pub fn dispatch(
    tokens: &LayerActivations,
    replicas: &[Vec<usize>],
    node_loads: &mut [f64],
    unit_s: f64,
    mode: DispatchMode,
    reference: Option<&[Vec<usize>]>,
) -> Result<Vec<Vec<usize>>> {
    if mode == DispatchMode::CommFree && reference.is_none_or(|r| r.len() != tokens.num_tokens()) {
        return Err(Error::InvalidConfig(
            "comm-free dispatch needs one reference source set per token".into(),
        ));
    }
    let candidates = |t: usize, i: usize| -> Result<Vec<usize>> {
        let holders = replicas
            .get(i)
            .filter(|h| !h.is_empty())
            .ok_or(Error::UnplacedExpert(i))?;
        Ok(match (mode, reference) {
            (DispatchMode::CommFree, Some(r)) => {
                let allowed: Vec<usize> = holders
                    .iter()
                    .copied()
                    .filter(|c| r[t].contains(c))
                    .collect();
                if allowed.is_empty() {
                    holders.clone()
                } else {
                    allowed
                }
            }
            _ => holders.clone(),
        })
    };
    let mut out: Vec<Vec<usize>> = tokens
        .tokens()
        .map(|set| vec![usize::MAX; set.len()])
        .collect();
    for (t, set) in tokens.tokens().enumerate() {
        for (j, &i) in set.iter().enumerate() {
            let cand = candidates(t, i as usize)?;
            if cand.len() == 1 {
                out[t][j] = cand[0];
                node_loads[cand[0]] += unit_s;
            }
        }
    }
    for (t, set) in tokens.tokens().enumerate() {
        for (j, &i) in set.iter().enumerate() {
            if out[t][j] != usize::MAX {
                continue;
            }
            let cand = candidates(t, i as usize)?;
            let c = *cand
                .iter()
                .min_by(|&&a, &&b| node_loads[a].total_cmp(&node_loads[b]).then(a.cmp(&b)))
                .unwrap();
            out[t][j] = c;
            node_loads[c] += unit_s;
        }
    }
    Ok(out)
}

/// Latency of one layer given per-token source nodes: the busiest node's
/// expert work plus `2·γ` times its send volume over the link bandwidth,
/// where every source of a multi-node token sends one activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerLatency {
    pub compute_s: f64,
    pub comm_hat_s: f64,
    pub latency_s: f64,
    pub max_units: u64,
    pub sent_bytes: u64,
}

pub fn layer_latency(
    assign: &[Vec<usize>],
    num_nodes: usize,
    model: &ModelSpec,
    mesh: &MeshSpec,
    gamma: f64,
) -> LayerLatency {
    let mut units = vec![0u64; num_nodes];
    let mut sends = vec![0u64; num_nodes];
    let mut nodes = Vec::new();
    for token in assign {
        nodes.clear();
        for &c in token {
            units[c] += 1;
            if !nodes.contains(&c) {
                nodes.push(c);
            }
        }
        if nodes.len() > 1 {
            nodes.iter().for_each(|&c| sends[c] += 1);
        }
    }
    let max_units = units.iter().copied().max().unwrap_or(0);
    let max_sends = sends.iter().copied().max().unwrap_or(0);
    let bytes = model.activation_bytes();
    let compute_s = max_units as f64 * model.flops_per_token_expert() / mesh.node_compute_flops;
    let comm_hat_s = (max_sends * bytes) as f64 / mesh.link_bandwidth_bps;
    let sent_bytes = sends.iter().sum::<u64>() * bytes;
    LayerLatency {
        compute_s,
        comm_hat_s,
        latency_s: compute_s + 2.0 * gamma * comm_hat_s,
        max_units,
        sent_bytes,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynamicStepReport {
    pub iteration: usize,
    pub layer: usize,
    pub budget_k: usize,
    pub broadcasts: Vec<usize>,
    /// Chunk size in bytes; absent without broadcasts or hop latency.
    pub chunk_bytes: Option<f64>,
    pub t_pre_b_s: f64,
    pub static_latency: LayerLatency,
    pub dynamic_latency: LayerLatency,
    /// Simulated aggregation makespans, when requested.
    pub static_simulated_comm_s: Option<f64>,
    pub dynamic_simulated_comm_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DynamicOptions {
    /// Also replay both dispatches through the network simulator.
    pub simulate_traffic: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynamicReport {
    pub steps: Vec<DynamicStepReport>,
    pub static_total_s: f64,
    pub dynamic_total_s: f64,
    /// `static_total_s / dynamic_total_s`.
    pub speedup: f64,
}

fn frequencies(tokens: &LayerActivations, num_experts: usize) -> Vec<f64> {
    let mut f = vec![0.0; num_experts];
    for set in tokens.tokens() {
        set.iter().for_each(|&i| f[i as usize] += 1.0);
    }
    let n = tokens.num_tokens().max(1) as f64;
    f.iter_mut().for_each(|x| *x /= n);
    f
}

/// Replays `trace` layer by layer with and without dynamic pre-broadcast.
///
/// Static latency uses proportional dispatch over the placement. The
/// dynamic run spends a budget derived from the previous layer's dynamic
/// latency on broadcasting predicted-hot experts to every node, then
/// dispatches tokens over the enlarged replica sets. Replicas last for one
/// layer; the first layer of an iteration has no budget.
#[allow(clippy::too_many_arguments)]
pub fn dynamic_simulate(
    trace: &ActivationTrace,
    static_placement: &Placement,
    mapping: &NodeMapping,
    policy: &DynamicPolicy,
    model: &ModelSpec,
    mesh: &MeshSpec,
    gamma: f64,
    options: &DynamicOptions,
) -> Result<DynamicReport> {
    policy.validate()?;
    trace.validate()?;
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    let d = mesh.num_nodes();
    if static_placement.layers.len() != trace.num_layers() {
        return Err(Error::InvalidConfig(format!(
            "placement has {} layers, trace {}",
            static_placement.layers.len(),
            trace.num_layers()
        )));
    }
    if mapping.len() != d {
        return Err(Error::InvalidConfig(format!(
            "mapping covers {} nodes, mesh has {d}",
            mapping.len()
        )));
    }
    for (l, layer) in static_placement.layers.iter().enumerate() {
        if layer.num_experts() != trace.num_experts || layer.num_nodes() != d {
            return Err(Error::DimensionMismatch {
                layer: l,
                message: format!(
                    "placement is {}x{}, expected {}x{d}",
                    layer.num_experts(),
                    layer.num_nodes(),
                    trace.num_experts
                ),
            });
        }
    }
    let unit_s = model.flops_per_token_expert() / mesh.node_compute_flops;
    let simulated = |assign: &[Vec<usize>], seed: u64| -> Option<f64> {
        options.simulate_traffic.then(|| {
            let sources: Vec<Vec<usize>> = assign.to_vec();
            let tasks = remap_tasks(
                &tasks_from_sources(&sources, model.activation_bytes(), seed),
                mapping,
            );
            simulate(&tasks, mesh, DEFAULT_CHUNK_BYTES).makespan_s
        })
    };

    let mut steps = Vec::with_capacity(trace.iterations.len() * trace.num_layers());
    for (it, iteration) in trace.iterations.iter().enumerate() {
        let mut prev_latency = 0.0;
        for (l, tokens) in iteration.layers.iter().enumerate() {
            let layer = &static_placement.layers[l];
            let mut prop = ProportionalDispatch::new(layer)?;
            let static_assign: Vec<Vec<usize>> = tokens
                .tokens()
                .map(|set| set.iter().map(|&i| prop.pick(i as usize)).collect())
                .collect();
            let static_latency = layer_latency(&static_assign, d, model, mesh, gamma);

            let mut replicas: Vec<Vec<usize>> = (0..trace.num_experts)
                .map(|i| layer.holders(i).collect())
                .collect();
            let mut broadcasts = Vec::new();
            let mut budget_k = 0;
            let (mut t_pre_b_s, mut chunk_bytes) = (0.0, None);
            if policy.enabled && l > 0 {
                budget_k = broadcast_budget(prev_latency, policy, d)?;
                if let Some(cap) = policy.max_broadcasts {
                    budget_k = budget_k.min(cap);
                }
                let f_hat = predict_frequencies(
                    &frequencies(tokens, trace.num_experts),
                    trace.experts_per_token,
                    policy.prediction_accuracy,
                );
                let mut effective = layer.clone();
                let mut done = vec![false; trace.num_experts];
                for _ in 0..budget_k {
                    let Some((i, _)) =
                        priority_scores(&effective, &f_hat, model, mesh, &done).selected
                    else {
                        break;
                    };
                    done[i] = true;
                    broadcasts.push(i);
                    replicas[i] = (0..d).collect();
                    for c in 0..d {
                        effective.set(i, c, 1.0 / d as f64);
                    }
                }
                if !broadcasts.is_empty() {
                    let (t, c) = pre_broadcast_cost(policy, broadcasts.len(), d)?;
                    t_pre_b_s = t;
                    chunk_bytes = c;
                }
            }
            let dynamic_assign = if broadcasts.is_empty() {
                static_assign.clone()
            } else {
                let sources: Vec<Vec<usize>> = static_assign.clone();
                dispatch(
                    tokens,
                    &replicas,
                    &mut vec![0.0; d],
                    unit_s,
                    policy.dispatch,
                    Some(&sources),
                )?
            };
            let dynamic_latency = layer_latency(&dynamic_assign, d, model, mesh, gamma);
            let seed =
                options.seed ^ ((it as u64) << 32 | l as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            steps.push(DynamicStepReport {
                iteration: it,
                layer: l,
                budget_k,
                broadcasts,
                chunk_bytes,
                t_pre_b_s,
                static_latency,
                dynamic_latency,
                static_simulated_comm_s: simulated(&static_assign, seed),
                dynamic_simulated_comm_s: simulated(&dynamic_assign, seed),
            });
            prev_latency = dynamic_latency.latency_s;
        }
    }
    let static_total_s: f64 = steps.iter().map(|s| s.static_latency.latency_s).sum();
    let dynamic_total_s: f64 = steps.iter().map(|s| s.dynamic_latency.latency_s).sum();
    let speedup = if dynamic_total_s > 0.0 {
        static_total_s / dynamic_total_s
    } else {
        1.0
    };
    Ok(DynamicReport {
        steps,
        static_total_s,
        dynamic_total_s,
        speedup,
    })
}
