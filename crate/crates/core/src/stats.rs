//! Activation statistics: per-expert frequencies, co-activation groups,
//! affinity and adjacent-layer overlap.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::activations::ActivationTrace;
use crate::error::{Error, Result};

/// Default number of co-activation groups kept per layer.
pub const DEFAULT_GROUP_CAP: usize = 1024;

/// A set of experts activated together by some tokens, and the fraction of
/// tokens that activated exactly this set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertGroup {
    pub experts: Vec<usize>,
    pub freq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub num_tokens: usize,
    pub experts_per_token: usize,
    /// Fraction of tokens activating each expert; sums to `experts_per_token`.
    pub freq: Vec<f64>,
    /// Retained groups, most frequent first; frequencies sum to 1.
    pub groups: Vec<ExpertGroup>,
    /// Number of distinct groups before truncation.
    pub distinct_groups: usize,
    /// Token fraction covered by the retained groups before rescaling.
    pub group_coverage: f64,
    /// `affinity[i][j]` = P(j active | i active).
    pub affinity: Vec<Vec<f64>>,
}

impl LayerStats {
    /// Statistics of an arbitrary token collection. Tokens must hold valid,
    /// distinct expert ids.
    pub fn from_tokens<'a, I>(
        num_experts: usize,
        experts_per_token: usize,
        tokens: I,
        group_cap: usize,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [u16]>,
    {
        if group_cap == 0 {
            return Err(Error::InvalidConfig("group cap must be at least 1".into()));
        }
        let mut counts = vec![0u64; num_experts];
        let mut pair_counts = vec![0u64; num_experts * num_experts];
        let mut group_counts: BTreeMap<Vec<u16>, u64> = BTreeMap::new();
        let mut n = 0usize;
        let mut key = Vec::with_capacity(experts_per_token);
        for set in tokens {
            n += 1;
            for &a in set {
                counts[a as usize] += 1;
                for &b in set {
                    pair_counts[a as usize * num_experts + b as usize] += 1;
                }
            }
            key.clear();
            key.extend_from_slice(set);
            key.sort_unstable();
            match group_counts.get_mut(key.as_slice()) {
                Some(c) => *c += 1,
                None => {
                    group_counts.insert(key.clone(), 1);
                }
            }
        }
        if n == 0 {
            return Err(Error::EmptyTrace);
        }
        let nf = n as f64;
        let freq = counts.iter().map(|&c| c as f64 / nf).collect();

        let distinct_groups = group_counts.len();
        let mut ranked: Vec<(Vec<u16>, u64)> = group_counts.into_iter().collect();
        // Stable sort keeps lexicographic order among equal counts.
        ranked.sort_by_key(|r| std::cmp::Reverse(r.1));
        ranked.truncate(group_cap);
        let kept: u64 = ranked.iter().map(|g| g.1).sum();
        let groups = ranked
            .into_iter()
            .map(|(k, c)| ExpertGroup {
                experts: k.into_iter().map(usize::from).collect(),
                freq: c as f64 / kept as f64,
            })
            .collect();

        let affinity = (0..num_experts)
            .map(|i| {
                (0..num_experts)
                    .map(|j| {
                        if counts[i] == 0 {
                            0.0
                        } else {
                            pair_counts[i * num_experts + j] as f64 / counts[i] as f64
                        }
                    })
                    .collect()
            })
            .collect();

        Ok(Self {
            num_tokens: n,
            experts_per_token,
            freq,
            groups,
            distinct_groups,
            group_coverage: kept as f64 / nf,
            affinity,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.freq.len()
    }

    /// `Σ_{g ∋ i} f_g` for every expert: the weight of expert `i` in the
    /// summed (per-expert) form of the node traffic estimate.
    pub fn group_weight(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.freq.len()];
        for g in &self.groups {
            for &i in &g.experts {
                w[i] += g.freq;
            }
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub num_experts: usize,
    pub experts_per_token: usize,
    pub layers: Vec<LayerStats>,
    /// Mean fraction of a token's experts reused by the next layer, for each
    /// adjacent layer pair.
    pub layer_overlap: Vec<f64>,
}

/// Per-layer statistics over all iterations of the trace.
pub fn derive_stats(trace: &ActivationTrace, group_cap: usize) -> Result<TraceStats> {
    if trace.iterations.is_empty() || trace.num_layers() == 0 || trace.batch_size() == 0 {
        return Err(Error::EmptyTrace);
    }
    trace.validate()?;
    let (e_total, e) = (trace.num_experts, trace.experts_per_token);
    let layers = (0..trace.num_layers())
        .map(|l| LayerStats::from_tokens(e_total, e, trace.layer_tokens(l), group_cap))
        .collect::<Result<Vec<_>>>()?;
    Ok(TraceStats {
        num_experts: e_total,
        experts_per_token: e,
        layers,
        layer_overlap: layer_overlap(trace),
    })
}

/// Statistics pooled over every layer, for callers that want one frequency
/// vector for the whole model instead of one per layer.
pub fn derive_pooled_stats(trace: &ActivationTrace, group_cap: usize) -> Result<LayerStats> {
    if trace.iterations.is_empty() || trace.num_layers() == 0 || trace.batch_size() == 0 {
        return Err(Error::EmptyTrace);
    }
    trace.validate()?;
    let tokens = (0..trace.num_layers()).flat_map(|l| trace.layer_tokens(l));
    LayerStats::from_tokens(
        trace.num_experts,
        trace.experts_per_token,
        tokens,
        group_cap,
    )
}

fn layer_overlap(trace: &ActivationTrace) -> Vec<f64> {
    let e = trace.experts_per_token as f64;
    (1..trace.num_layers())
        .map(|l| {
            let mut shared = 0usize;
            let mut n = 0usize;
            for it in &trace.iterations {
                for (a, b) in it.layers[l - 1].tokens().zip(it.layers[l].tokens()) {
                    shared += a.iter().filter(|x| b.contains(x)).count();
                    n += 1;
                }
            }
            shared as f64 / (n as f64 * e)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::{Iteration, LayerActivations};

    fn single_layer(e_total: usize, e: usize, sets: &[Vec<usize>]) -> ActivationTrace {
        ActivationTrace {
            num_experts: e_total,
            experts_per_token: e,
            iterations: vec![Iteration {
                layers: vec![LayerActivations::from_sets(e, sets)],
            }],
        }
    }

    #[test]
    fn degenerate_single_group() {
        let trace = single_layer(2, 2, &vec![vec![0, 1]; 5]);
        let s = derive_stats(&trace, 16).unwrap();
        let l = &s.layers[0];
        assert_eq!(l.freq, vec![1.0, 1.0]);
        assert_eq!(
            l.groups,
            vec![ExpertGroup {
                experts: vec![0, 1],
                freq: 1.0
            }]
        );
        assert_eq!(l.affinity, vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
    }

    #[test]
    fn counting_frequencies_and_groups() {
        let trace = single_layer(2, 1, &[vec![0], vec![0], vec![0], vec![1]]);
        let l = &derive_stats(&trace, 16).unwrap().layers[0];
        assert_eq!(l.freq, vec![0.75, 0.25]);
        assert_eq!(
            l.groups[0],
            ExpertGroup {
                experts: vec![0],
                freq: 0.75
            }
        );
        assert_eq!(
            l.groups[1],
            ExpertGroup {
                experts: vec![1],
                freq: 0.25
            }
        );
        assert_eq!(l.group_coverage, 1.0);
    }

    #[test]
    fn truncation_rescales_and_reports_coverage() {
        let sets = vec![vec![0], vec![0], vec![1], vec![2]];
        let l = &derive_stats(&single_layer(3, 1, &sets), 2).unwrap().layers[0];
        assert_eq!(l.distinct_groups, 3);
        assert_eq!(l.groups.len(), 2);
        assert!((l.group_coverage - 0.75).abs() < 1e-12);
        let total: f64 = l.groups.iter().map(|g| g.freq).sum();
        assert!((total - 1.0).abs() < 1e-9);
        // Ties are broken lexicographically: {1} survives, {2} is dropped.
        assert_eq!(l.groups[1].experts, vec![1]);
    }

    #[test]
    fn unused_expert_has_zero_affinity_row() {
        let l = &derive_stats(&single_layer(3, 1, &[vec![0], vec![1]]), 8)
            .unwrap()
            .layers[0];
        assert_eq!(l.affinity[2], vec![0.0; 3]);
        assert_eq!(l.affinity[0][0], 1.0);
    }

    #[test]
    fn empty_trace_is_rejected() {
        let trace = ActivationTrace {
            num_experts: 2,
            experts_per_token: 1,
            iterations: vec![],
        };
        assert!(matches!(derive_stats(&trace, 4), Err(Error::EmptyTrace)));
    }

    #[test]
    fn overlap_between_layers() {
        let l0 = LayerActivations::from_sets(2, &[[0, 1], [2, 3]]);
        let l1 = LayerActivations::from_sets(2, &[[1, 0], [2, 0]]);
        let trace = ActivationTrace {
            num_experts: 4,
            experts_per_token: 2,
            iterations: vec![Iteration {
                layers: vec![l0, l1],
            }],
        };
        let s = derive_stats(&trace, 8).unwrap();
        assert!((s.layer_overlap[0] - 0.75).abs() < 1e-12);
    }
}
