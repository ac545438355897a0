use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::activations::LayerActivations;
use crate::error::{Error, Result};
use crate::model::{MeshSpec, ModelSpec};
use crate::netsim::{
    build_logical_tasks, remap_tasks, simulate_with_router, CommTask, Router, SimReport,
    DEFAULT_CHUNK_BYTES,
};
use crate::placement::{NodeMapping, Placement};
use crate::stats::LayerStats;

/// Destination samplings averaged per layer when scoring a mapping.
pub const DEFAULT_DST_SAMPLES: usize = 3;

/// Mean simulated makespan of a fixed set of logical traffic scenarios under
/// a candidate mapping.
pub struct MappingEvaluator {
    mesh: MeshSpec,
    router: Router,
    scenarios: Vec<Vec<CommTask>>,
    chunk_bytes: u64,
}

impl MappingEvaluator {
    pub fn from_tasks(mesh: &MeshSpec, scenarios: Vec<Vec<CommTask>>) -> Result<Self> {
        if scenarios.is_empty() {
            return Err(Error::InvalidConfig(
                "mapping search needs at least one traffic scenario".into(),
            ));
        }
        let d = mesh.num_nodes();
        if scenarios.iter().flatten().any(|t| t.src >= d || t.dst >= d) {
            return Err(Error::InvalidConfig(
                "task endpoint outside the mesh".into(),
            ));
        }
        Ok(Self {
            mesh: *mesh,
            router: Router::new(mesh),
            scenarios,
            chunk_bytes: DEFAULT_CHUNK_BYTES,
        })
    }

    /// Scenarios from each layer's tokens, with `samples` seeded destination
    /// draws per layer.
    pub fn from_tokens(
        placement: &Placement,
        tokens: &[LayerActivations],
        mesh: &MeshSpec,
        model: &ModelSpec,
        samples: usize,
        seed: u64,
    ) -> Result<Self> {
        if tokens.len() != placement.layers.len() {
            return Err(Error::InvalidConfig(format!(
                "{} token layers for a {}-layer placement",
                tokens.len(),
                placement.layers.len()
            )));
        }
        let mut scenarios = Vec::with_capacity(tokens.len() * samples);
        for (l, (layer, toks)) in placement.layers.iter().zip(tokens).enumerate() {
            for s in 0..samples.max(1) {
                let sample_seed =
                    seed ^ ((l as u64) << 32 | s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                scenarios.push(build_logical_tasks(toks, layer, model, sample_seed)?);
            }
        }
        Self::from_tasks(mesh, scenarios)
    }

    pub fn num_nodes(&self) -> usize {
        self.mesh.num_nodes()
    }

    pub fn evaluate(&self, mapping: &NodeMapping) -> f64 {
        let total: f64 = self
            .scenarios
            .iter()
            .map(|s| self.report(s, mapping).makespan_s)
            .sum();
        total / self.scenarios.len() as f64
    }

    fn report(&self, scenario: &[CommTask], mapping: &NodeMapping) -> SimReport {
        simulate_with_router(
            &remap_tasks(scenario, mapping),
            &self.mesh,
            &self.router,
            self.chunk_bytes,
        )
    }

    /// Simulation of the first scenario under `mapping`.
    pub fn representative_report(&self, mapping: &NodeMapping) -> SimReport {
        self.report(&self.scenarios[0], mapping)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MappingResult {
    pub mapping: NodeMapping,
    pub mean_makespan_s: f64,
    pub identity_makespan_s: f64,
    pub evaluations: usize,
    pub exhaustive: bool,
    pub report: SimReport,
}

/// Token sets reproducing the group distribution of `stats` over `batch`
/// tokens, apportioned by largest remainder.
pub fn tokens_from_stats(stats: &LayerStats, batch: usize) -> LayerActivations {
    let quotas: Vec<f64> = stats.groups.iter().map(|g| g.freq * batch as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        (quotas[b] - quotas[b].floor())
            .total_cmp(&(quotas[a] - quotas[a].floor()))
            .then(a.cmp(&b))
    });
    let missing = batch.saturating_sub(counts.iter().sum());
    for &g in order.iter().take(missing) {
        counts[g] += 1;
    }
    let mut out = LayerActivations::with_capacity(stats.experts_per_token, batch);
    for (g, &n) in stats.groups.iter().zip(&counts) {
        for _ in 0..n {
            out.push(&g.experts);
        }
    }
    out
}

fn decode(keys: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));
    let mut perm = vec![0; keys.len()];
    for (physical, &cluster) in order.iter().enumerate() {
        perm[cluster] = physical;
    }
    perm
}

fn encode(perm: &[usize]) -> Vec<f64> {
    let d = perm.len() as f64;
    perm.iter().map(|&p| (p as f64 + 0.5) / d).collect()
}

fn next_permutation(v: &mut [usize]) -> bool {
    let Some(i) = (1..v.len()).rev().find(|&i| v[i - 1] < v[i]) else {
        return false;
    };
    let j = (i..v.len()).rev().find(|&j| v[j] > v[i - 1]).unwrap();
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

fn factorial_at_most(n: usize, limit: usize) -> Option<usize> {
    (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k).filter(|&x| x <= limit))
}

/// Gaussian-process regression on the physical coordinates each cluster is
/// mapped to, with a squared-exponential kernel and expected improvement.
struct Surrogate {
    cols: usize,
    rows: usize,
    xs: Vec<Vec<f64>>,
    ys: Vec<f64>,
}

struct Fitted {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    alpha: DVector<f64>,
    mean: f64,
    scale: f64,
    length2: f64,
}

const NOISE: f64 = 1e-4;

impl Surrogate {
    fn features(&self, perm: &[usize]) -> Vec<f64> {
        let norm = |v: usize, n: usize| {
            if n > 1 {
                v as f64 / (n - 1) as f64
            } else {
                0.0
            }
        };
        perm.iter()
            .flat_map(|&p| {
                [
                    norm(p % self.cols, self.cols),
                    norm(p / self.cols, self.rows),
                ]
            })
            .collect()
    }

    fn kernel(a: &[f64], b: &[f64], length2: f64) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        (-0.5 * d2 / length2).exp()
    }

    fn fit(&self) -> Option<Fitted> {
        let n = self.ys.len();
        let mean = self.ys.iter().sum::<f64>() / n as f64;
        let var = self.ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        let length2 = 0.25 * self.xs[0].len() as f64 / 2.0;
        let k = DMatrix::from_fn(n, n, |i, j| {
            Self::kernel(&self.xs[i], &self.xs[j], length2) + if i == j { NOISE } else { 0.0 }
        });
        let chol = k.cholesky()?;
        let y = DVector::from_iterator(n, self.ys.iter().map(|y| (y - mean) / scale));
        let alpha = chol.solve(&y);
        Some(Fitted {
            chol,
            alpha,
            mean,
            scale,
            length2,
        })
    }

    fn expected_improvement(&self, fit: &Fitted, x: &[f64], best: f64) -> f64 {
        let kx = DVector::from_iterator(
            self.xs.len(),
            self.xs.iter().map(|xi| Self::kernel(xi, x, fit.length2)),
        );
        let mu = kx.dot(&fit.alpha);
        let v = fit.chol.solve(&kx);
        let sigma = (1.0 + NOISE - kx.dot(&v)).max(1e-12).sqrt();
        let best = (best - fit.mean) / fit.scale;
        let z = (best - mu) / sigma;
        (best - mu) * normal_cdf(z) + sigma * normal_pdf(z)
    }
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

const BATCH: usize = 8;
const PROPOSALS: usize = 256;

/// Searches logical-to-physical mappings minimizing mean makespan.
///
/// Identity is scored first and is returned unless something strictly
/// better is found. When `D!` fits in the budget every permutation is
/// scored; otherwise half the budget goes to surrogate-guided proposals over
/// random keys and the rest to pairwise-swap hill climbing.
pub fn search_mapping(
    evaluator: &MappingEvaluator,
    eval_budget: usize,
    seed: u64,
) -> Result<MappingResult> {
    if eval_budget == 0 {
        return Err(Error::InvalidConfig(
            "evaluation budget must be at least 1".into(),
        ));
    }
    let d = evaluator.num_nodes();
    let identity: Vec<usize> = (0..d).collect();
    let identity_makespan_s = evaluator.evaluate(&NodeMapping {
        perm: identity.clone(),
    });
    let mut best = (identity_makespan_s, identity.clone());
    let mut evaluations = 1;
    let score = |perms: &[Vec<usize>]| -> Vec<f64> {
        perms
            .par_iter()
            .map(|p| evaluator.evaluate(&NodeMapping { perm: p.clone() }))
            .collect()
    };
    let consider = |best: &mut (f64, Vec<usize>), perms: &[Vec<usize>], scores: &[f64]| {
        for (p, &s) in perms.iter().zip(scores) {
            if s < best.0 {
                *best = (s, p.clone());
            }
        }
    };

    let exhaustive = factorial_at_most(d, eval_budget).is_some();
    if exhaustive {
        let mut perms = Vec::new();
        let mut p = identity.clone();
        while next_permutation(&mut p) {
            perms.push(p.clone());
        }
        let scores = score(&perms);
        evaluations += perms.len();
        consider(&mut best, &perms, &scores);
    } else if eval_budget > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut surrogate = Surrogate {
            cols: evaluator.mesh.cols,
            rows: evaluator.mesh.rows,
            xs: Vec::new(),
            ys: Vec::new(),
        };
        surrogate.xs.push(surrogate.features(&identity));
        surrogate.ys.push(identity_makespan_s);
        let mut seen = std::collections::HashSet::from([identity.clone()]);

        let surrogate_budget = (eval_budget - 1) / 2;
        let initial = surrogate_budget.min(2 * BATCH);
        let mut spent = 0;
        while spent < surrogate_budget {
            let want = BATCH.min(surrogate_budget - spent);
            let mut picks: Vec<Vec<usize>> = Vec::new();
            if spent < initial {
                while picks.len() < want {
                    let mut p = identity.clone();
                    p.shuffle(&mut rng);
                    if seen.insert(p.clone()) {
                        picks.push(p);
                    }
                }
            } else {
                let fit = surrogate.fit();
                let best_keys = encode(&best.1);
                let mut proposals: Vec<(f64, Vec<usize>)> = Vec::with_capacity(PROPOSALS);
                for k in 0..PROPOSALS {
                    let keys: Vec<f64> = if k % 2 == 0 {
                        (0..d).map(|_| rng.gen::<f64>()).collect()
                    } else {
                        let sigma = 0.5 / d as f64 * (1 + k % 7) as f64;
                        best_keys
                            .iter()
                            .map(|&x| x + sigma * (rng.gen::<f64>() * 2.0 - 1.0))
                            .collect()
                    };
                    let perm = decode(&keys);
                    if seen.contains(&perm) {
                        continue;
                    }
                    let ei = fit.as_ref().map_or(0.0, |f| {
                        surrogate.expected_improvement(f, &surrogate.features(&perm), best.0)
                    });
                    proposals.push((ei, perm));
                }
                proposals.sort_by(|a, b| b.0.total_cmp(&a.0));
                for (_, p) in proposals {
                    if picks.len() == want {
                        break;
                    }
                    if seen.insert(p.clone()) {
                        picks.push(p);
                    }
                }
                while picks.len() < want {
                    let mut p = identity.clone();
                    p.shuffle(&mut rng);
                    if seen.insert(p.clone()) {
                        picks.push(p);
                    }
                }
            }
            let scores = score(&picks);
            for (p, &s) in picks.iter().zip(&scores) {
                surrogate.xs.push(surrogate.features(p));
                surrogate.ys.push(s);
            }
            consider(&mut best, &picks, &scores);
            spent += picks.len();
        }
        evaluations += spent;

        // Swaps of physically close clusters first.
        let mut pairs: Vec<(usize, usize)> = (0..d)
            .flat_map(|a| (a + 1..d).map(move |b| (a, b)))
            .collect();
        let dist = |a: usize, b: usize| {
            let (pa, pb) = (evaluator.mesh.coord(a), evaluator.mesh.coord(b));
            pa.0.abs_diff(pb.0) + pa.1.abs_diff(pb.1)
        };
        while evaluations < eval_budget {
            let current = best.1.clone();
            pairs.sort_by_key(|&(a, b)| (dist(current[a], current[b]), a, b));
            let mut improved = false;
            for window in pairs.chunks(BATCH) {
                let take = window.len().min(eval_budget - evaluations);
                if take == 0 {
                    break;
                }
                let perms: Vec<Vec<usize>> = window[..take]
                    .iter()
                    .map(|&(a, b)| {
                        let mut p = current.clone();
                        p.swap(a, b);
                        p
                    })
                    .collect();
                let scores = score(&perms);
                evaluations += take;
                let before = best.0;
                consider(&mut best, &perms, &scores);
                if best.0 < before {
                    improved = true;
                    break;
                }
            }
            if !improved {
                break;
            }
        }
    }

    let mapping = NodeMapping::new(best.1)?;
    let report = evaluator.representative_report(&mapping);
    Ok(MappingResult {
        mapping,
        mean_makespan_s: best.0,
        identity_makespan_s,
        evaluations,
        exhaustive,
        report,
    })
}

/// Link-balance stage: searches a physical mapping for `placement` whose
/// per-layer traffic comes from `tokens`.
pub fn optimize_mapping(
    placement: &Placement,
    tokens: &[LayerActivations],
    mesh: &MeshSpec,
    model: &ModelSpec,
    eval_budget: usize,
    seed: u64,
) -> Result<MappingResult> {
    let evaluator =
        MappingEvaluator::from_tokens(placement, tokens, mesh, model, DEFAULT_DST_SAMPLES, seed)?;
    search_mapping(&evaluator, eval_budget, seed)
}
