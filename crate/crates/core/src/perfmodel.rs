//! Analytical latency model: per-node compute time, the node-traffic
//! communication estimate and its linear calibration, ring all-reduce time,
//! and the compute/communication ratio that caps per-node load.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MeshSpec, ModelSpec};
use crate::placement::LayerPlacement;
use crate::stats::LayerStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeTime {
    pub per_node_s: Vec<f64>,
    pub max_s: f64,
}

/// Seconds each node spends on its share of expert work:
/// `(Σ_i P[i][c]·f_i·B)·2·h·IS / comp`.
pub fn compute_time(
    layer: &LayerPlacement,
    freq: &[f64],
    batch: usize,
    model: &ModelSpec,
    mesh: &MeshSpec,
) -> ComputeTime {
    let per_token = batch as f64 * model.flops_per_token_expert() / mesh.node_compute_flops;
    let per_node_s: Vec<f64> = layer
        .weighted_node_sums(freq)
        .into_iter()
        .map(|x| x * per_token)
        .collect();
    let max_s = per_node_s.iter().copied().fold(0.0, f64::max);
    ComputeTime { per_node_s, max_s }
}

/// How group membership is turned into per-node send volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CommModel {
    /// A node sends one activation per group it partially holds; groups held
    /// entirely by one node cost nothing.
    NodeTraffic,
    /// `Σ_{i∈g} Z[i][c]` per group, the linear form used inside the
    /// node-balance program. Upper-bounds [`CommModel::NodeTraffic`].
    Linearized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommEstimate {
    pub per_node_bytes: Vec<f64>,
    pub t_hat_s: f64,
}

/// Node-traffic estimate: `t̂ = max_c volume_c / BW`.
pub fn comm_estimate(
    layer: &LayerPlacement,
    stats: &LayerStats,
    batch: usize,
    model: &ModelSpec,
    mesh: &MeshSpec,
) -> CommEstimate {
    comm_estimate_with(layer, stats, batch, model, mesh, CommModel::NodeTraffic)
}

pub fn comm_estimate_with(
    layer: &LayerPlacement,
    stats: &LayerStats,
    batch: usize,
    model: &ModelSpec,
    mesh: &MeshSpec,
    comm: CommModel,
) -> CommEstimate {
    let d = layer.num_nodes();
    let per_group = model.bytes_per_activation as f64 * batch as f64 * model.hidden_size as f64;
    let mut per_node_bytes = vec![0.0; d];
    for g in &stats.groups {
        for (c, vol) in per_node_bytes.iter_mut().enumerate() {
            let mult = match comm {
                CommModel::NodeTraffic => {
                    let any = g.experts.iter().any(|&i| layer.is_active(i, c));
                    let all_whole = g.experts.iter().all(|&i| layer.is_whole(i, c));
                    if any && !all_whole {
                        1.0
                    } else {
                        0.0
                    }
                }
                CommModel::Linearized => {
                    g.experts.iter().filter(|&&i| layer.is_active(i, c)).count() as f64
                }
            };
            *vol += mult * g.freq * per_group;
        }
    }
    let max = per_node_bytes.iter().copied().fold(0.0, f64::max);
    CommEstimate {
        t_hat_s: max / mesh.link_bandwidth_bps,
        per_node_bytes,
    }
}

/// Least-squares slope through the origin mapping estimated to simulated
/// communication time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaFit {
    pub gamma: f64,
    pub r_squared: f64,
    pub sample_count: usize,
}

/// Fits `y = γ·x` over `(estimate, simulated)` pairs. R² is reported against
/// the mean-centred total sum of squares.
pub fn calibrate_gamma(samples: &[(f64, f64)]) -> Result<GammaFit> {
    if samples.len() < 2 {
        return Err(Error::DegenerateCalibration(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    let sxx: f64 = samples.iter().map(|(x, _)| x * x).sum();
    if sxx <= 0.0 {
        return Err(Error::DegenerateCalibration(
            "every estimate is zero".into(),
        ));
    }
    let sxy: f64 = samples.iter().map(|(x, y)| x * y).sum();
    let gamma = sxy / sxx;
    let mean_y = samples.iter().map(|s| s.1).sum::<f64>() / samples.len() as f64;
    let ss_res: f64 = samples.iter().map(|(x, y)| (y - gamma * x).powi(2)).sum();
    let ss_tot: f64 = samples.iter().map(|(_, y)| (y - mean_y).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(GammaFit {
        gamma,
        r_squared,
        sample_count: samples.len(),
    })
}

/// Analytical ring all-reduce time for one MoE layer under tensor
/// parallelism: `bytes·B·h / BW`.
pub fn ring_allreduce_time(
    batch: usize,
    hidden: usize,
    mesh: &MeshSpec,
    bytes_per_activation: usize,
) -> f64 {
    (bytes_per_activation * batch * hidden) as f64 / mesh.link_bandwidth_bps
}

/// Compute-to-communication ratio of tensor parallelism,
/// `BW·IS·e / (2·D·comp)`.
pub fn rcc(model: &ModelSpec, mesh: &MeshSpec, num_nodes: usize) -> f64 {
    mesh.link_bandwidth_bps * model.intermediate_size as f64 * model.experts_per_token as f64
        / (2.0 * num_nodes as f64 * mesh.node_compute_flops)
}

/// Upper bound on `Σ_i P[i][c]·f_i` for any node: `(1/R_CC + 1)·e/D`.
pub fn node_load_cap(model: &ModelSpec, mesh: &MeshSpec, num_nodes: usize) -> f64 {
    (1.0 / rcc(model, mesh, num_nodes) + 1.0) * model.experts_per_token as f64 / num_nodes as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub t_comp_s: f64,
    pub t_comm_hat_s: f64,
    pub t_comm_s: f64,
    pub t_node_overhead_s: f64,
    pub per_node_compute_s: Vec<f64>,
    pub per_node_send_bytes: Vec<f64>,
}

/// `t_comp + 2·γ·t̂` with the node-traffic estimator.
pub fn node_overhead(
    layer: &LayerPlacement,
    stats: &LayerStats,
    batch: usize,
    model: &ModelSpec,
    mesh: &MeshSpec,
    gamma: f64,
) -> Result<LatencyBreakdown> {
    node_overhead_with(
        layer,
        stats,
        batch,
        model,
        mesh,
        gamma,
        CommModel::NodeTraffic,
    )
}

pub fn node_overhead_with(
    layer: &LayerPlacement,
    stats: &LayerStats,
    batch: usize,
    model: &ModelSpec,
    mesh: &MeshSpec,
    gamma: f64,
    comm: CommModel,
) -> Result<LatencyBreakdown> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    if layer.num_experts() != stats.num_experts() {
        return Err(Error::DimensionMismatch {
            layer: 0,
            message: format!(
                "placement has {} experts, statistics {}",
                layer.num_experts(),
                stats.num_experts()
            ),
        });
    }
    let compute = compute_time(layer, &stats.freq, batch, model, mesh);
    let est = comm_estimate_with(layer, stats, batch, model, mesh, comm);
    let t_comm_s = gamma * est.t_hat_s;
    Ok(LatencyBreakdown {
        t_comp_s: compute.max_s,
        t_comm_hat_s: est.t_hat_s,
        t_comm_s,
        t_node_overhead_s: compute.max_s + 2.0 * t_comm_s,
        per_node_compute_s: compute.per_node_s,
        per_node_send_bytes: est.per_node_bytes,
    })
}
