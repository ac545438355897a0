//! Per-token expert routing decisions.

use crate::error::{Error, Result};

/// Expert ids activated by each token of one layer, stored flat with a fixed
/// stride of `experts_per_token`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerActivations {
    experts_per_token: usize,
    flat: Vec<u16>,
}

impl LayerActivations {
    pub fn new(experts_per_token: usize) -> Self {
        Self {
            experts_per_token,
            flat: Vec::new(),
        }
    }

    pub fn with_capacity(experts_per_token: usize, tokens: usize) -> Self {
        Self {
            experts_per_token,
            flat: Vec::with_capacity(tokens * experts_per_token),
        }
    }

    /// Builds a layer from explicit per-token sets; does not validate ids.
    pub fn from_sets<S: AsRef<[usize]>>(experts_per_token: usize, sets: &[S]) -> Self {
        let mut layer = Self::with_capacity(experts_per_token, sets.len());
        for s in sets {
            layer.push(s.as_ref());
        }
        layer
    }

    pub fn push(&mut self, experts: &[usize]) {
        assert_eq!(
            experts.len(),
            self.experts_per_token,
            "wrong expert-set size"
        );
        self.flat.extend(experts.iter().map(|&x| x as u16));
    }

    /// The first `n` tokens.
    pub fn prefix(&self, n: usize) -> Self {
        let n = n.min(self.num_tokens());
        Self {
            experts_per_token: self.experts_per_token,
            flat: self.flat[..n * self.experts_per_token].to_vec(),
        }
    }

    pub fn experts_per_token(&self) -> usize {
        self.experts_per_token
    }

    pub fn num_tokens(&self) -> usize {
        self.flat.len() / self.experts_per_token.max(1)
    }

    pub fn token(&self, t: usize) -> &[u16] {
        let e = self.experts_per_token;
        &self.flat[t * e..(t + 1) * e]
    }

    pub fn tokens(&self) -> impl ExactSizeIterator<Item = &[u16]> + '_ {
        self.flat.chunks_exact(self.experts_per_token)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Iteration {
    pub layers: Vec<LayerActivations>,
}

/// Expert routing decisions for a sequence of decode iterations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationTrace {
    pub num_experts: usize,
    pub experts_per_token: usize,
    pub iterations: Vec<Iteration>,
}

impl ActivationTrace {
    pub fn num_layers(&self) -> usize {
        self.iterations.first().map_or(0, |it| it.layers.len())
    }

    pub fn batch_size(&self) -> usize {
        self.iterations
            .first()
            .and_then(|it| it.layers.first())
            .map_or(0, LayerActivations::num_tokens)
    }

    /// All tokens of one layer across every iteration.
    pub fn layer_tokens(&self, layer: usize) -> impl Iterator<Item = &[u16]> + '_ {
        self.iterations
            .iter()
            .flat_map(move |it| it.layers[layer].tokens())
    }

    pub fn validate(&self) -> Result<()> {
        let (e_total, e) = (self.num_experts, self.experts_per_token);
        if e == 0 || e > e_total {
            return Err(Error::InvalidTrace(format!(
                "experts per token {e} not in [1, {e_total}]"
            )));
        }
        if e_total > u16::MAX as usize + 1 {
            return Err(Error::InvalidTrace("more than 65536 experts".into()));
        }
        let (layers, batch) = (self.num_layers(), self.batch_size());
        for (i, it) in self.iterations.iter().enumerate() {
            if it.layers.len() != layers {
                return Err(Error::InvalidTrace(format!(
                    "iteration {i} has {} layers, expected {layers}",
                    it.layers.len()
                )));
            }
            for (l, layer) in it.layers.iter().enumerate() {
                if layer.experts_per_token != e {
                    return Err(Error::InvalidTrace(format!(
                        "iteration {i} layer {l}: wrong expert-set size"
                    )));
                }
                if layer.num_tokens() != batch {
                    return Err(Error::InvalidTrace(format!(
                        "iteration {i} layer {l} has {} tokens, expected {batch}",
                        layer.num_tokens()
                    )));
                }
                for (t, set) in layer.tokens().enumerate() {
                    check_expert_set(set, e_total).map_err(|m| {
                        Error::InvalidTrace(format!("iteration {i} layer {l} token {t}: {m}"))
                    })?;
                }
            }
        }
        Ok(())
    }
}

/// Returns a message describing the first problem with one token's expert set.
pub(crate) fn check_expert_set(set: &[u16], num_experts: usize) -> std::result::Result<(), String> {
    for (k, &x) in set.iter().enumerate() {
        if x as usize >= num_experts {
            return Err(format!("expert id out of range: {x} >= {num_experts}"));
        }
        if set[..k].contains(&x) {
            return Err(format!("duplicate expert id {x}"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(sets: &[[usize; 2]]) -> ActivationTrace {
        ActivationTrace {
            num_experts: 4,
            experts_per_token: 2,
            iterations: vec![Iteration {
                layers: vec![LayerActivations::from_sets(2, sets)],
            }],
        }
    }

    #[test]
    fn shape_accessors() {
        let t = trace(&[[0, 1], [2, 3], [1, 3]]);
        assert_eq!(t.num_layers(), 1);
        assert_eq!(t.batch_size(), 3);
        assert_eq!(t.iterations[0].layers[0].token(2), &[1, 3]);
        t.validate().unwrap();
    }

    #[test]
    fn rejects_duplicates_and_out_of_range() {
        let err = trace(&[[1, 1]]).validate().unwrap_err().to_string();
        assert!(err.contains("duplicate expert id"), "{err}");
        let err = trace(&[[0, 4]]).validate().unwrap_err().to_string();
        assert!(err.contains("expert id out of range"), "{err}");
    }
}
