//! Placement synthesis: tensor-parallel, expert-parallel and hybrid
//! baselines, the node-balance program with its exhaustive oracle, and the
//! link-balance search over logical-to-physical mappings.

mod baselines;
mod mapping;
mod node_balance;
mod oracle;

pub use baselines::{
    baseline_ep, baseline_hybrid_cb, baseline_tp, default_region_count, region_shape,
};
pub use mapping::{
    optimize_mapping, search_mapping, tokens_from_stats, MappingEvaluator, MappingResult,
    DEFAULT_DST_SAMPLES,
};
pub use node_balance::{
    baseline_objectives, plan_node_balance, solve_node_balance, solve_node_balance_with,
    BaselineObjective, NodeBalanceOptions, NodeBalanceProblem, SolveReport, SolverStatus, EPS_LOAD,
};
pub use oracle::{brute_force_node_balance, BRUTE_FORCE_LIMIT};

use crate::error::{Error, Result};
use crate::model::MeshSpec;
use crate::placement::{NodeMapping, Placement, Strategy};
use crate::stats::TraceStats;

/// Per-layer baseline placement for `strategy` (TP, EP or HYBRID_CB) and the
/// mapping it is meant to run under. `num_regions` defaults to
/// [`default_region_count`].
pub fn plan_baseline(
    strategy: Strategy,
    stats: &TraceStats,
    mesh: &MeshSpec,
    num_regions: Option<usize>,
) -> Result<(Placement, NodeMapping)> {
    let d = mesh.num_nodes();
    let mut mapping = NodeMapping::identity(d);
    let mut layers = Vec::with_capacity(stats.layers.len());
    for layer in &stats.layers {
        layers.push(match strategy {
            Strategy::Tp => baseline_tp(stats.num_experts, d),
            Strategy::Ep => baseline_ep(&layer.freq, d),
            Strategy::HybridCb => {
                let regions =
                    num_regions.unwrap_or_else(|| default_region_count(stats.num_experts, mesh));
                let (p, m) = baseline_hybrid_cb(&layer.freq, mesh, regions)?;
                mapping = m;
                p
            }
            other => {
                return Err(Error::InvalidConfig(format!(
                    "{other} is not a baseline strategy"
                )))
            }
        });
    }
    Ok((Placement { strategy, layers }, mapping))
}
