use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CommTask;
use crate::activations::LayerActivations;
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::placement::{LayerPlacement, NodeMapping};

/// Deterministic token-to-replica assignment for split experts.
///
/// The k-th token of expert `i` goes to the holder whose assigned count lags
/// furthest behind its share `P[i][c]·k` (ties to the lowest node id), so
/// per-node token counts track the placement fractions to within one token.
#[derive(Debug, Clone)]
pub struct ProportionalDispatch {
    holders: Vec<Vec<(usize, f64)>>,
    assigned: Vec<Vec<u64>>,
    seen: Vec<u64>,
}

impl ProportionalDispatch {
    pub fn new(layer: &LayerPlacement) -> Result<Self> {
        let mut holders: Vec<Vec<(usize, f64)>> = Vec::with_capacity(layer.num_experts());
        for i in 0..layer.num_experts() {
            let hs: Vec<(usize, f64)> = layer.holders(i).map(|c| (c, layer.get(i, c))).collect();
            if hs.is_empty() {
                return Err(Error::UnplacedExpert(i));
            }
            let total: f64 = hs.iter().map(|h| h.1).sum();
            holders.push(hs.into_iter().map(|(c, p)| (c, p / total)).collect());
        }
        let assigned = holders.iter().map(|h| vec![0; h.len()]).collect();
        Ok(Self {
            holders,
            assigned,
            seen: vec![0; layer.num_experts()],
        })
    }

    pub fn pick(&mut self, expert: usize) -> usize {
        let hs = &self.holders[expert];
        let counts = &mut self.assigned[expert];
        self.seen[expert] += 1;
        let k = self.seen[expert] as f64;
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for (j, &(_, share)) in hs.iter().enumerate() {
            let deficit = share * k - counts[j] as f64;
            if deficit > best_deficit + 1e-12 {
                best = j;
                best_deficit = deficit;
            }
        }
        counts[best] += 1;
        hs[best].0
    }
}

/// Aggregation traffic of one layer in logical cluster ids.
///
/// Every token's experts are assigned to replicas by
/// [`ProportionalDispatch`]. Each distinct cluster computing part of the token
/// sends one activation vector (`h·bytes`) to a destination drawn uniformly
/// from those clusters; the destination itself sends nothing.
pub fn build_logical_tasks(
    tokens: &LayerActivations,
    layer: &LayerPlacement,
    model: &ModelSpec,
    seed: u64,
) -> Result<Vec<CommTask>> {
    let mut dispatch = ProportionalDispatch::new(layer)?;
    let mut sources = Vec::with_capacity(tokens.num_tokens());
    for set in tokens.tokens() {
        let mut nodes = Vec::with_capacity(set.len());
        for &i in set {
            let i = i as usize;
            if i >= layer.num_experts() {
                return Err(Error::InvalidTrace(format!(
                    "expert {i} outside the placement"
                )));
            }
            let c = dispatch.pick(i);
            if !nodes.contains(&c) {
                nodes.push(c);
            }
        }
        sources.push(nodes);
    }
    Ok(tasks_from_sources(&sources, model.activation_bytes(), seed))
}

/// Aggregation traffic given each token's set of computing nodes: one
/// `bytes` transfer from every source to a seeded uniform pick among them.
pub fn tasks_from_sources(sources: &[Vec<usize>], bytes: u64, seed: u64) -> Vec<CommTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::new();
    let mut sorted = Vec::new();
    for nodes in sources {
        if nodes.len() < 2 {
            continue;
        }
        sorted.clear();
        sorted.extend_from_slice(nodes);
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() < 2 {
            continue;
        }
        let dst = sorted[rng.gen_range(0..sorted.len())];
        for &src in sorted.iter().filter(|&&s| s != dst) {
            tasks.push(CommTask {
                id: tasks.len(),
                src,
                dst,
                bytes,
                release_time_s: 0.0,
            });
        }
    }
    tasks
}

/// Moves logical tasks onto physical nodes and renumbers them in a canonical
/// `(release, src, dst, original id)` order, so that mappings producing the
/// same physical traffic produce identical task lists.
pub fn remap_tasks(tasks: &[CommTask], mapping: &NodeMapping) -> Vec<CommTask> {
    let mut out: Vec<CommTask> = tasks
        .iter()
        .map(|t| CommTask {
            src: mapping.physical(t.src),
            dst: mapping.physical(t.dst),
            ..*t
        })
        .collect();
    out.sort_by(|a, b| {
        a.release_time_s
            .total_cmp(&b.release_time_s)
            .then(a.src.cmp(&b.src))
            .then(a.dst.cmp(&b.dst))
            .then(a.id.cmp(&b.id))
    });
    for (k, t) in out.iter_mut().enumerate() {
        t.id = k;
    }
    out
}

/// Physical aggregation traffic of one layer under `mapping`.
pub fn build_tasks(
    tokens: &LayerActivations,
    layer: &LayerPlacement,
    mapping: &NodeMapping,
    model: &ModelSpec,
    seed: u64,
) -> Result<Vec<CommTask>> {
    if mapping.len() != layer.num_nodes() {
        return Err(Error::InvalidConfig(format!(
            "mapping covers {} nodes, placement {}",
            mapping.len(),
            layer.num_nodes()
        )));
    }
    Ok(remap_tasks(
        &build_logical_tasks(tokens, layer, model, seed)?,
        mapping,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(h: usize) -> ModelSpec {
        ModelSpec {
            hidden_size: h,
            ..ModelSpec::MIXTRAL
        }
    }

    #[test]
    fn single_node_has_no_traffic() {
        let layer = LayerPlacement::from_rows(vec![vec![1.0]; 2]);
        let tokens = LayerActivations::from_sets(2, &[[0, 1], [1, 0]]);
        let tasks = build_tasks(&tokens, &layer, &NodeMapping::identity(1), &model(8), 1).unwrap();
        assert!(tasks.is_empty());
    }

    #[test]
    fn two_nodes_one_task() {
        let layer = LayerPlacement::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let tokens = LayerActivations::from_sets(2, &[[0, 1]]);
        let tasks = build_tasks(&tokens, &layer, &NodeMapping::identity(2), &model(8), 3).unwrap();
        assert_eq!(tasks.len(), 1);
        let t = tasks[0];
        assert_eq!(t.bytes, 8 * 4);
        assert_ne!(t.src, t.dst);
    }

    #[test]
    fn unplaced_expert_is_an_error() {
        let layer = LayerPlacement::from_rows(vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        let tokens = LayerActivations::from_sets(1, &[[0]]);
        let err =
            build_tasks(&tokens, &layer, &NodeMapping::identity(2), &model(8), 0).unwrap_err();
        assert!(matches!(err, Error::UnplacedExpert(1)));
    }

    #[test]
    fn proportional_dispatch_tracks_fractions() {
        let layer = LayerPlacement::from_rows(vec![vec![0.25, 0.75, 0.0]]);
        let mut d = ProportionalDispatch::new(&layer).unwrap();
        let mut counts = [0; 3];
        for _ in 0..100 {
            counts[d.pick(0)] += 1;
        }
        assert_eq!(counts, [25, 75, 0]);
    }

    #[test]
    fn mapping_relabels_endpoints() {
        let layer = LayerPlacement::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let tokens = LayerActivations::from_sets(2, &[[0, 1], [0, 1], [1, 0]]);
        let logical = build_logical_tasks(&tokens, &layer, &model(8), 9).unwrap();
        let swapped = build_tasks(
            &tokens,
            &layer,
            &NodeMapping::new(vec![1, 0]).unwrap(),
            &model(8),
            9,
        )
        .unwrap();
        let mut a: Vec<_> = logical.iter().map(|t| (1 - t.src, 1 - t.dst)).collect();
        let mut b: Vec<_> = swapped.iter().map(|t| (t.src, t.dst)).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }
}
