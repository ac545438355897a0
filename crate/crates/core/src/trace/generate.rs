use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{ActivationTrace, Iteration, LayerActivations};
use crate::error::{Error, Result};
use crate::model::ModelSpec;

const STREAM_STRUCTURE: u64 = 0;
const STREAM_DRIFT: u64 = 1 << 40;
const STREAM_TOKENS: u64 = 2 << 40;

/// Knobs for the synthetic router.
///
/// Each layer ranks its experts by a seeded permutation and draws experts
/// from a Zipf law over that ranking (`skew` is the exponent). Experts drag
/// along a planted partner with probability `affinity_strength`; a token
/// reuses experts from its previous-layer set with probability
/// `layer_locality`; and with probability `drift` an iteration rotates the
/// ranking so that different experts become hot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceGenConfig {
    pub model: ModelSpec,
    pub batch: usize,
    pub iterations: usize,
    pub skew: f64,
    pub affinity_strength: f64,
    pub layer_locality: f64,
    pub drift: f64,
    pub seed: u64,
}

impl TraceGenConfig {
    pub fn new(model: ModelSpec, batch: usize, iterations: usize, seed: u64) -> Self {
        Self {
            model,
            batch,
            iterations,
            skew: 0.0,
            affinity_strength: 0.0,
            layer_locality: 0.0,
            drift: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch == 0 || self.iterations == 0 {
            return Err(Error::InvalidConfig(
                "batch and iteration count must be positive".into(),
            ));
        }
        if !(self.skew >= 0.0 && self.skew.is_finite()) {
            return Err(Error::InvalidConfig(
                "skew must be a non-negative number".into(),
            ));
        }
        for (name, p) in [
            ("affinity_strength", self.affinity_strength),
            ("layer_locality", self.layer_locality),
            ("drift", self.drift),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in [0,1], got {p}"
                )));
            }
        }
        if self.model.num_experts > u16::MAX as usize + 1 {
            return Err(Error::InvalidConfig(
                "at most 65536 experts are supported".into(),
            ));
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

struct LayerTables {
    /// `ranking[r]` is the expert holding popularity rank `r`.
    ranking: Vec<usize>,
    partner: Vec<usize>,
}

/// Generates a trace; the output depends only on `cfg`.
pub fn generate_trace(cfg: &TraceGenConfig) -> Result<ActivationTrace> {
    cfg.validate()?;
    let m = cfg.model;
    let n_exp = m.num_experts;

    let mut rng = stream(cfg.seed, STREAM_STRUCTURE);
    let tables: Vec<LayerTables> = (0..m.num_layers)
        .map(|_| {
            let mut ranking: Vec<usize> = (0..n_exp).collect();
            ranking.shuffle(&mut rng);
            let mut order: Vec<usize> = (0..n_exp).collect();
            order.shuffle(&mut rng);
            let mut partner: Vec<usize> = (0..n_exp).collect();
            for pair in order.chunks_exact(2) {
                partner[pair[0]] = pair[1];
                partner[pair[1]] = pair[0];
            }
            LayerTables { ranking, partner }
        })
        .collect();

    // Rotation offsets are cumulative but each step only reads its own stream.
    let mut offsets = Vec::with_capacity(cfg.iterations);
    let mut offset = 0usize;
    for it in 0..cfg.iterations {
        if it > 0 && n_exp > 1 {
            let mut r = stream(cfg.seed, STREAM_DRIFT + it as u64);
            if r.gen::<f64>() < cfg.drift {
                offset = (offset + r.gen_range(1..n_exp)) % n_exp;
            }
        }
        offsets.push(offset);
    }

    let weights: Vec<f64> = (0..n_exp)
        .map(|r| (r as f64 + 1.0).powf(-cfg.skew))
        .collect();
    let zipf = WeightedIndex::new(&weights).map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let iterations = (0..cfg.iterations)
        .into_par_iter()
        .map(|it| {
            let mut rng = stream(cfg.seed, STREAM_TOKENS + it as u64);
            let sampler = TokenSampler {
                cfg,
                zipf: &zipf,
                weights: &weights,
            };
            let mut layers: Vec<LayerActivations> = Vec::with_capacity(m.num_layers);
            let mut chosen = Vec::with_capacity(m.experts_per_token);
            for tables in &tables {
                let mut layer = LayerActivations::with_capacity(m.experts_per_token, cfg.batch);
                for t in 0..cfg.batch {
                    let prev = layers.last().map(|p: &LayerActivations| p.token(t));
                    sampler.sample(&mut rng, tables, offsets[it], prev, &mut chosen);
                    layer.push(&chosen);
                }
                layers.push(layer);
            }
            Iteration { layers }
        })
        .collect();

    Ok(ActivationTrace {
        num_experts: n_exp,
        experts_per_token: m.experts_per_token,
        iterations,
    })
}

struct TokenSampler<'a> {
    cfg: &'a TraceGenConfig,
    zipf: &'a WeightedIndex<f64>,
    weights: &'a [f64],
}

impl TokenSampler<'_> {
    fn sample(
        &self,
        rng: &mut ChaCha8Rng,
        tables: &LayerTables,
        offset: usize,
        prev: Option<&[u16]>,
        chosen: &mut Vec<usize>,
    ) {
        let n_exp = self.cfg.model.num_experts;
        let e = self.cfg.model.experts_per_token;
        let expert_at = |rank: usize| tables.ranking[(rank + offset) % n_exp];
        chosen.clear();
        while chosen.len() < e {
            if let Some(prev) = prev {
                if rng.gen::<f64>() < self.cfg.layer_locality {
                    let free = prev
                        .iter()
                        .filter(|&&x| !chosen.contains(&(x as usize)))
                        .count();
                    if free > 0 {
                        let k = rng.gen_range(0..free);
                        let pick = prev
                            .iter()
                            .filter(|&&x| !chosen.contains(&(x as usize)))
                            .nth(k)
                            .unwrap();
                        chosen.push(*pick as usize);
                        continue;
                    }
                }
            }
            if let Some(&last) = chosen.last() {
                if rng.gen::<f64>() < self.cfg.affinity_strength {
                    let partner = tables.partner[last];
                    if !chosen.contains(&partner) {
                        chosen.push(partner);
                        continue;
                    }
                }
            }
            chosen.push(self.draw_fresh(rng, chosen, expert_at));
        }
    }

    /// Zipf draw over ranks, excluding experts already chosen.
    fn draw_fresh(
        &self,
        rng: &mut ChaCha8Rng,
        chosen: &[usize],
        expert_at: impl Fn(usize) -> usize,
    ) -> usize {
        for _ in 0..64 {
            let x = expert_at(self.zipf.sample(rng));
            if !chosen.contains(&x) {
                return x;
            }
        }
        // Rejection keeps failing when the remaining mass is tiny; sample the
        // renormalised remainder exactly.
        let free: Vec<(usize, f64)> = (0..self.weights.len())
            .map(|r| (expert_at(r), self.weights[r]))
            .filter(|(x, _)| !chosen.contains(x))
            .collect();
        let total: f64 = free.iter().map(|f| f.1).sum();
        let mut u = rng.gen::<f64>() * total;
        for &(x, w) in &free {
            if u < w {
                return x;
            }
            u -= w;
        }
        free.last().expect("fewer experts than experts per token").0
    }
}
