//! End-to-end helpers: γ calibration against the simulator, planning by
//! strategy, evaluation of a placement, and strategy comparison.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{ActivationTrace, LayerActivations};
use crate::error::{Error, Result};
use crate::model::{MeshSpec, ModelSpec};
use crate::netsim::{
    build_tasks, simulate, simulate_ring_allreduce, SimReport, DEFAULT_CHUNK_BYTES,
};
use crate::perfmodel::{
    calibrate_gamma, comm_estimate, compute_time, node_overhead, ring_allreduce_time, GammaFit,
};
use crate::placement::{LayerPlacement, NodeMapping, Placement, Strategy};
use crate::planner::{
    optimize_mapping, plan_baseline, plan_node_balance, tokens_from_stats, MappingResult,
    NodeBalanceOptions, SolveReport,
};
use crate::stats::{derive_stats, LayerStats, TraceStats, DEFAULT_GROUP_CAP};

/// Number of random placements used when γ is calibrated automatically.
pub const DEFAULT_CALIBRATION_SAMPLES: usize = 50;
/// Evaluations granted to the link-balance search by default.
pub const DEFAULT_MAPPING_BUDGET: usize = 200;

/// Derives a sub-seed for a named component.
pub fn fan_out_seed(seed: u64, component: &str) -> u64 {
    // FNV-1a over the name, mixed with the root seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in component.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    (seed ^ h)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .rotate_left(29)
}

/// A random expert-parallel placement: a random subset of nodes is used and
/// each expert sits whole on one of them, drawn uniformly.
pub fn random_placement<R: Rng>(
    num_experts: usize,
    num_nodes: usize,
    rng: &mut R,
) -> LayerPlacement {
    let used = rng.gen_range(1..=num_nodes);
    let active: Vec<usize> = sample(rng, num_nodes, used).into_vec();
    let mut p = LayerPlacement::zeros(num_experts, num_nodes);
    for i in 0..num_experts {
        p.set(i, active[rng.gen_range(0..used)], 1.0);
    }
    p
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub layer: usize,
    pub iteration: usize,
    /// Tokens of the layer's batch included in the sample.
    pub tokens: usize,
    pub estimate_s: f64,
    pub simulated_s: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Calibration {
    pub fit: GammaFit,
    pub samples: Vec<CalibrationSample>,
}

/// Fits γ from `samples` random placements. Sample `k` uses layer
/// `k mod L` of iteration `⌊k/L⌋ mod I`, truncated to a random number of
/// tokens between `B/16` and `B` so that the samples span a range of traffic
/// volumes; its node-traffic estimate comes from that token set's statistics
/// and is paired with the simulated makespan of its traffic.
pub fn calibrate(
    trace: &ActivationTrace,
    model: &ModelSpec,
    mesh: &MeshSpec,
    samples: usize,
    seed: u64,
) -> Result<Calibration> {
    trace.validate()?;
    let (layers, iters) = (trace.num_layers(), trace.iterations.len());
    let batch = trace.batch_size();
    let d = mesh.num_nodes();
    let out = (0..samples)
        .into_par_iter()
        .map(|k| -> Result<CalibrationSample> {
            let (layer, iteration) = (k % layers, (k / layers) % iters);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let n = rng.gen_range(batch.div_ceil(16)..=batch);
            let tokens = trace.iterations[iteration].layers[layer].prefix(n);
            let stats = LayerStats::from_tokens(
                trace.num_experts,
                trace.experts_per_token,
                tokens.tokens(),
                DEFAULT_GROUP_CAP,
            )?;
            let placement = random_placement(trace.num_experts, d, &mut rng);
            let estimate_s = comm_estimate(&placement, &stats, n, model, mesh).t_hat_s;
            let tasks = build_tasks(
                &tokens,
                &placement,
                &NodeMapping::identity(d),
                model,
                rng.gen(),
            )?;
            let simulated_s = simulate(&tasks, mesh, DEFAULT_CHUNK_BYTES).makespan_s;
            Ok(CalibrationSample {
                layer,
                iteration,
                tokens: n,
                estimate_s,
                simulated_s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(f64, f64)> = out.iter().map(|s| (s.estimate_s, s.simulated_s)).collect();
    Ok(Calibration {
        fit: calibrate_gamma(&pairs)?,
        samples: out,
    })
}

#[derive(Debug, Clone)]
pub struct PlanConfig {
    pub strategy: Strategy,
    pub gamma: f64,
    pub num_regions: Option<usize>,
    pub node_balance: NodeBalanceOptions,
    pub mapping_budget: usize,
    pub seed: u64,
}

impl PlanConfig {
    pub fn new(strategy: Strategy, gamma: f64, seed: u64) -> Self {
        Self {
            strategy,
            gamma,
            num_regions: None,
            node_balance: NodeBalanceOptions::default(),
            mapping_budget: DEFAULT_MAPPING_BUDGET,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlanOutput {
    pub placement: Placement,
    pub mapping: NodeMapping,
    pub solve_reports: Vec<SolveReport>,
    pub mapping_result: Option<MappingResult>,
}

/// Builds the placement for `config.strategy` from per-layer statistics.
/// NODE_LINK_BALANCE additionally searches a mapping over traffic
/// reconstructed from each layer's group frequencies.
pub fn plan(
    stats: &TraceStats,
    batch: usize,
    model: &ModelSpec,
    mesh: &MeshSpec,
    config: &PlanConfig,
) -> Result<PlanOutput> {
    let d = mesh.num_nodes();
    match config.strategy {
        Strategy::Tp | Strategy::Ep | Strategy::HybridCb => {
            let (placement, mapping) =
                plan_baseline(config.strategy, stats, mesh, config.num_regions)?;
            Ok(PlanOutput {
                placement,
                mapping,
                solve_reports: Vec::new(),
                mapping_result: None,
            })
        }
        Strategy::NodeBalance | Strategy::NodeLinkBalance => {
            let (mut placement, solve_reports) = plan_node_balance(
                stats,
                batch,
                model,
                mesh,
                config.gamma,
                &config.node_balance,
            )?;
            if config.strategy == Strategy::NodeBalance {
                return Ok(PlanOutput {
                    placement,
                    mapping: NodeMapping::identity(d),
                    solve_reports,
                    mapping_result: None,
                });
            }
            placement.strategy = Strategy::NodeLinkBalance;
            let tokens: Vec<LayerActivations> = stats
                .layers
                .iter()
                .map(|l| tokens_from_stats(l, batch))
                .collect();
            let result = optimize_mapping(
                &placement,
                &tokens,
                mesh,
                model,
                config.mapping_budget,
                fan_out_seed(config.seed, "mapping"),
            )?;
            Ok(PlanOutput {
                placement,
                mapping: result.mapping.clone(),
                solve_reports,
                mapping_result: Some(result),
            })
        }
        Strategy::Custom => Err(Error::InvalidConfig(
            "CUSTOM placements are loaded, not planned".into(),
        )),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerEvaluation {
    pub layer: usize,
    pub t_comp_s: f64,
    pub t_comm_hat_s: f64,
    /// Modeled communication: `2·γ·t̂`, or one ring all-reduce under TP.
    pub t_comm_model_s: f64,
    /// Simulated communication, averaged over iterations.
    pub t_comm_sim_s: f64,
    pub modeled_latency_s: f64,
    pub simulated_latency_s: f64,
    pub per_node_compute_s: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub strategy: Strategy,
    pub layers: Vec<LayerEvaluation>,
    pub t_comp_s: f64,
    pub t_comm_model_s: f64,
    pub t_comm_sim_s: f64,
    pub modeled_latency_s: f64,
    pub simulated_latency_s: f64,
    /// Simulation of layer 0, iteration 0 (link utilization data).
    #[serde(skip)]
    pub sample_report: Option<SimReport>,
}

/// Ring all-reduce of one layer's activations, simulated.
pub fn simulate_tp_allreduce(mesh: &MeshSpec, model: &ModelSpec, batch: usize) -> f64 {
    let bytes = model.activation_bytes() * batch as u64;
    let d = mesh.num_nodes() as u64;
    let chunks = bytes.div_ceil(d).div_ceil(DEFAULT_CHUNK_BYTES).max(1);
    simulate_ring_allreduce(mesh, bytes, chunks as usize)
}

/// Modeled and simulated MoE-layer latency of a placement over the trace.
///
/// Compute always follows the placement's per-node load. Under TP the
/// communication is one ring all-reduce per layer (analytical with γ = 1);
/// otherwise it is `2·γ·t̂` modeled and twice the simulated aggregation
/// makespan, covering dispatch and combine.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    placement: &Placement,
    mapping: &NodeMapping,
    trace: &ActivationTrace,
    stats: &TraceStats,
    model: &ModelSpec,
    mesh: &MeshSpec,
    gamma: f64,
    seed: u64,
) -> Result<Evaluation> {
    if placement.layers.len() != trace.num_layers() || stats.layers.len() != trace.num_layers() {
        return Err(Error::InvalidConfig(format!(
            "placement has {} layers, statistics {}, trace {}",
            placement.layers.len(),
            stats.layers.len(),
            trace.num_layers()
        )));
    }
    let batch = trace.batch_size();
    let tp = placement.strategy == Strategy::Tp;
    let tp_sim = tp.then(|| simulate_tp_allreduce(mesh, model, batch));
    let sample_tasks = build_tasks(
        &trace.iterations[0].layers[0],
        &placement.layers[0],
        mapping,
        model,
        fan_out_seed(seed, "sample"),
    );
    let layers = placement
        .layers
        .par_iter()
        .enumerate()
        .map(|(l, layer)| -> Result<LayerEvaluation> {
            let st = &stats.layers[l];
            let breakdown = node_overhead(layer, st, batch, model, mesh, gamma)?;
            let (t_comm_model_s, t_comm_sim_s) = if let Some(sim) = tp_sim {
                (
                    ring_allreduce_time(batch, model.hidden_size, mesh, model.bytes_per_activation),
                    sim,
                )
            } else {
                let mut total = 0.0;
                for (it, iteration) in trace.iterations.iter().enumerate() {
                    let s = fan_out_seed(seed, "evaluate") ^ ((it as u64) << 32 | l as u64);
                    let tasks = build_tasks(&iteration.layers[l], layer, mapping, model, s)?;
                    total += simulate(&tasks, mesh, DEFAULT_CHUNK_BYTES).makespan_s;
                }
                (
                    2.0 * breakdown.t_comm_s,
                    2.0 * total / trace.iterations.len() as f64,
                )
            };
            let t_comp_s = compute_time(layer, &st.freq, batch, model, mesh).max_s;
            Ok(LayerEvaluation {
                layer: l,
                t_comp_s,
                t_comm_hat_s: breakdown.t_comm_hat_s,
                t_comm_model_s,
                t_comm_sim_s,
                modeled_latency_s: t_comp_s + t_comm_model_s,
                simulated_latency_s: t_comp_s + t_comm_sim_s,
                per_node_compute_s: breakdown.per_node_compute_s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sum = |f: fn(&LayerEvaluation) -> f64| layers.iter().map(f).sum::<f64>();
    Ok(Evaluation {
        strategy: placement.strategy,
        t_comp_s: sum(|l| l.t_comp_s),
        t_comm_model_s: sum(|l| l.t_comm_model_s),
        t_comm_sim_s: sum(|l| l.t_comm_sim_s),
        modeled_latency_s: sum(|l| l.modeled_latency_s),
        simulated_latency_s: sum(|l| l.simulated_latency_s),
        sample_report: sample_tasks
            .ok()
            .map(|t| simulate(&t, mesh, DEFAULT_CHUNK_BYTES)),
        layers,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub t_comp_s: f64,
    pub t_comm_model_s: f64,
    pub t_comm_sim_s: f64,
    pub modeled_latency_s: f64,
    pub simulated_latency_s: f64,
    /// Modeled MoE-layer latency over TP's.
    pub normalized_tbt: f64,
    pub normalized_tbt_simulated: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub gamma: f64,
    pub rows: Vec<ComparisonRow>,
    #[serde(skip)]
    pub evaluations: Vec<Evaluation>,
    #[serde(skip)]
    pub plans: Vec<PlanOutput>,
}

/// Plans and evaluates every strategy on the same trace and normalizes by
/// TP (evaluated even when not listed).
pub fn compare(
    trace: &ActivationTrace,
    model: &ModelSpec,
    mesh: &MeshSpec,
    strategies: &[Strategy],
    gamma: f64,
    seed: u64,
) -> Result<Comparison> {
    if strategies.len() < 2 {
        return Err(Error::InvalidConfig(
            "comparison needs at least two strategies".into(),
        ));
    }
    if trace.num_experts != model.num_experts || trace.experts_per_token != model.experts_per_token
    {
        return Err(Error::InvalidConfig(format!(
            "trace has E={}, e={} but the model has E={}, e={}",
            trace.num_experts, trace.experts_per_token, model.num_experts, model.experts_per_token
        )));
    }
    let stats = derive_stats(trace, DEFAULT_GROUP_CAP)?;
    let batch = trace.batch_size();
    let mut wanted: Vec<Strategy> = strategies.to_vec();
    if !wanted.contains(&Strategy::Tp) {
        wanted.push(Strategy::Tp);
    }
    let results = wanted
        .par_iter()
        .map(|&s| -> Result<(PlanOutput, Evaluation)> {
            let out = plan(&stats, batch, model, mesh, &PlanConfig::new(s, gamma, seed))?;
            let ev = evaluate(
                &out.placement,
                &out.mapping,
                trace,
                &stats,
                model,
                mesh,
                gamma,
                seed,
            )?;
            Ok((out, ev))
        })
        .collect::<Result<Vec<_>>>()?;
    let tp = &results[wanted.iter().position(|&s| s == Strategy::Tp).unwrap()].1;
    let (tp_model, tp_sim) = (tp.modeled_latency_s, tp.simulated_latency_s);
    let rows = strategies
        .iter()
        .map(|s| {
            let ev = &results[wanted.iter().position(|w| w == s).unwrap()].1;
            ComparisonRow {
                strategy: *s,
                t_comp_s: ev.t_comp_s,
                t_comm_model_s: ev.t_comm_model_s,
                t_comm_sim_s: ev.t_comm_sim_s,
                modeled_latency_s: ev.modeled_latency_s,
                simulated_latency_s: ev.simulated_latency_s,
                normalized_tbt: ev.modeled_latency_s / tp_model,
                normalized_tbt_simulated: ev.simulated_latency_s / tp_sim,
            }
        })
        .collect();
    let (plans, evaluations) = results.into_iter().unzip();
    Ok(Comparison {
        gamma,
        rows,
        evaluations,
        plans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HardwareProfile;
    use crate::trace::{generate_trace, TraceGenConfig};

    fn small() -> (ActivationTrace, ModelSpec, MeshSpec) {
        let model = ModelSpec {
            num_layers: 2,
            ..ModelSpec::MIXTRAL
        };
        let mut cfg = TraceGenConfig::new(model, 32, 2, 5);
        cfg.skew = 1.0;
        (
            generate_trace(&cfg).unwrap(),
            model,
            MeshSpec::new(2, 2, HardwareProfile::PRESETS[1]),
        )
    }

    #[test]
    fn fan_out_differs_by_component() {
        assert_ne!(fan_out_seed(1, "a"), fan_out_seed(1, "b"));
        assert_eq!(fan_out_seed(1, "a"), fan_out_seed(1, "a"));
    }

    #[test]
    fn random_placements_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = random_placement(10, 16, &mut rng);
            for i in 0..10 {
                assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn calibration_is_deterministic() {
        let (trace, model, mesh) = small();
        let a = calibrate(&trace, &model, &mesh, 12, 9).unwrap();
        let b = calibrate(&trace, &model, &mesh, 12, 9).unwrap();
        assert_eq!(a.samples.len(), 12);
        assert_eq!(a.fit, b.fit);
    }

    #[test]
    fn tp_normalizes_to_one_and_duplicates_match() {
        let (trace, model, mesh) = small();
        let c = compare(
            &trace,
            &model,
            &mesh,
            &[Strategy::Tp, Strategy::Ep, Strategy::Ep],
            1.0,
            1,
        )
        .unwrap();
        assert_eq!(c.rows[0].normalized_tbt, 1.0);
        assert_eq!(c.rows[1].modeled_latency_s, c.rows[2].modeled_latency_s);
        assert_eq!(c.rows[1].simulated_latency_s, c.rows[2].simulated_latency_s);
        assert!(compare(&trace, &model, &mesh, &[Strategy::Tp], 1.0, 1).is_err());
    }

    #[test]
    fn compare_rejects_mismatched_model() {
        let (trace, _, mesh) = small();
        assert!(compare(
            &trace,
            &ModelSpec::DEEPSEEK,
            &mesh,
            &[Strategy::Tp, Strategy::Ep],
            1.0,
            1
        )
        .is_err());
    }

    #[test]
    fn tp_compute_is_balanced() {
        let (trace, model, mesh) = small();
        let stats = derive_stats(&trace, DEFAULT_GROUP_CAP).unwrap();
        let out = plan(
            &stats,
            32,
            &model,
            &mesh,
            &PlanConfig::new(Strategy::Tp, 1.0, 0),
        )
        .unwrap();
        let ev = evaluate(
            &out.placement,
            &out.mapping,
            &trace,
            &stats,
            &model,
            &mesh,
            1.0,
            0,
        )
        .unwrap();
        let expected = 2.0 * 32.0 * 2.0 * 4096.0 * 14336.0 / (4.0 * mesh.node_compute_flops);
        assert!((ev.layers[0].t_comp_s - expected).abs() < 1e-9 * expected);
    }
}
