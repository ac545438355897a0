//! Static descriptions of the accelerator mesh and the MoE model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2D mesh of compute nodes connected by directed links to their four
/// neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshSpec {
    pub rows: usize,
    pub cols: usize,
    /// Bytes per second on one directed link.
    pub link_bandwidth_bps: f64,
    /// Seconds added per hop.
    pub per_hop_latency_s: f64,
    /// FLOP/s of a single node.
    pub node_compute_flops: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_memory_bytes: Option<u64>,
}

impl MeshSpec {
    pub fn new(rows: usize, cols: usize, hw: HardwareProfile) -> Self {
        Self {
            rows,
            cols,
            link_bandwidth_bps: hw.link_bandwidth_bps,
            per_hop_latency_s: hw.per_hop_latency_s,
            node_compute_flops: hw.node_compute_flops,
            node_memory_bytes: None,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.rows * self.cols
    }

    /// Node id of the column `x`, row `y` coordinate (row-major ids).
    pub fn node_at(&self, x: usize, y: usize) -> usize {
        y * self.cols + x
    }

    /// `(x, y)` = `(col, row)` of a node id.
    pub fn coord(&self, node: usize) -> (usize, usize) {
        (node % self.cols, node / self.cols)
    }

    pub fn hardware(&self) -> HardwareProfile {
        HardwareProfile {
            node_compute_flops: self.node_compute_flops,
            link_bandwidth_bps: self.link_bandwidth_bps,
            per_hop_latency_s: self.per_hop_latency_s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidConfig(
                "mesh needs at least one row and one column".into(),
            ));
        }
        let positive = |v: f64| v > 0.0 && !v.is_nan();
        if !positive(self.link_bandwidth_bps) || !positive(self.node_compute_flops) {
            return Err(Error::InvalidConfig(
                "bandwidth and compute throughput must be positive".into(),
            ));
        }
        if self.per_hop_latency_s.is_nan() || self.per_hop_latency_s < 0.0 {
            return Err(Error::InvalidConfig(
                "per-hop latency must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Compute throughput, link bandwidth and hop latency of one node type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    pub node_compute_flops: f64,
    pub link_bandwidth_bps: f64,
    pub per_hop_latency_s: f64,
}

impl HardwareProfile {
    /// The three compute/bandwidth trade-off points used in the evaluation.
    pub const PRESETS: [HardwareProfile; 3] = [
        HardwareProfile::new(2.5e12, 75e9, 0.0),
        HardwareProfile::new(5e12, 50e9, 0.0),
        HardwareProfile::new(10e12, 25e9, 0.0),
    ];

    pub const fn new(
        node_compute_flops: f64,
        link_bandwidth_bps: f64,
        per_hop_latency_s: f64,
    ) -> Self {
        Self {
            node_compute_flops,
            link_bandwidth_bps,
            per_hop_latency_s,
        }
    }

    /// Parses `<tflops>TF:<GBps>GBps[:<alpha_ns>ns]`, e.g. `5TF:50GBps:10ns`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || {
            Error::InvalidConfig(format!(
                "hardware profile `{s}` is not <tflops>TF:<GBps>GBps[:<ns>ns]"
            ))
        };
        let mut parts = s.split(':');
        let num = |part: Option<&str>, suffix: &str| -> Result<f64> {
            let part = part.ok_or_else(bad)?;
            let v: f64 = part
                .strip_suffix(suffix)
                .ok_or_else(bad)?
                .parse()
                .map_err(|_| bad())?;
            if v.is_finite() && v >= 0.0 {
                Ok(v)
            } else {
                Err(bad())
            }
        };
        let tf = num(parts.next(), "TF")?;
        let gb = num(parts.next(), "GBps")?;
        let alpha_ns = match parts.next() {
            Some(p) => num(Some(p), "ns")?,
            None => 0.0,
        };
        if parts.next().is_some() || tf == 0.0 || gb == 0.0 {
            return Err(bad());
        }
        Ok(Self::new(tf * 1e12, gb * 1e9, alpha_ns * 1e-9))
    }
}

/// Dimensions of the MoE layers of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_experts: usize,
    pub experts_per_token: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_layers: usize,
    #[serde(default = "default_bytes")]
    pub bytes_per_activation: usize,
}

fn default_bytes() -> usize {
    4
}

impl ModelSpec {
    pub const MIXTRAL: ModelSpec = ModelSpec::preset(8, 2, 32, 4096, 14336);
    pub const DEEPSEEK: ModelSpec = ModelSpec::preset(64, 6, 27, 2048, 1408);
    pub const QWEN: ModelSpec = ModelSpec::preset(64, 8, 28, 3584, 2560);

    const fn preset(e_total: usize, e: usize, layers: usize, h: usize, is: usize) -> Self {
        Self {
            num_experts: e_total,
            experts_per_token: e,
            hidden_size: h,
            intermediate_size: is,
            num_layers: layers,
            bytes_per_activation: 4,
        }
    }

    pub fn preset_by_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "mixtral" => Some(Self::MIXTRAL),
            "deepseek" => Some(Self::DEEPSEEK),
            "qwen" => Some(Self::QWEN),
            _ => None,
        }
    }

    /// FLOPs of one token through one expert (`2·h·IS`).
    pub fn flops_per_token_expert(&self) -> f64 {
        2.0 * self.hidden_size as f64 * self.intermediate_size as f64
    }

    /// Parameter bytes of one expert: gate, up and down projections.
    pub fn expert_bytes(&self) -> u64 {
        3 * (self.hidden_size * self.intermediate_size * self.bytes_per_activation) as u64
    }

    /// Bytes of one hidden-state vector.
    pub fn activation_bytes(&self) -> u64 {
        (self.hidden_size * self.bytes_per_activation) as u64
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.num_experts,
            self.experts_per_token,
            self.hidden_size,
            self.intermediate_size,
            self.num_layers,
            self.bytes_per_activation,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig(
                "model dimensions must be positive".into(),
            ));
        }
        if self.experts_per_token > self.num_experts {
            return Err(Error::InvalidConfig(format!(
                "experts per token ({}) exceeds number of experts ({})",
                self.experts_per_token, self.num_experts
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_published_dimensions() {
        let m = ModelSpec::MIXTRAL;
        assert_eq!(
            (
                m.num_experts,
                m.experts_per_token,
                m.num_layers,
                m.hidden_size,
                m.intermediate_size
            ),
            (8, 2, 32, 4096, 14336)
        );
        let d = ModelSpec::DEEPSEEK;
        assert_eq!(
            (
                d.num_experts,
                d.experts_per_token,
                d.num_layers,
                d.hidden_size,
                d.intermediate_size
            ),
            (64, 6, 27, 2048, 1408)
        );
        let q = ModelSpec::QWEN;
        assert_eq!(
            (
                q.num_experts,
                q.experts_per_token,
                q.num_layers,
                q.hidden_size,
                q.intermediate_size
            ),
            (64, 8, 28, 3584, 2560)
        );
        assert_eq!(ModelSpec::preset_by_name("DeepSeek"), Some(d));
    }

    #[test]
    fn hardware_profile_syntax() {
        let hw = HardwareProfile::parse("2.5TF:75GBps").unwrap();
        assert_eq!(hw, HardwareProfile::new(2.5e12, 75e9, 0.0));
        let hw = HardwareProfile::parse("5TF:50GBps:100ns").unwrap();
        assert!((hw.per_hop_latency_s - 1e-7).abs() < 1e-20);
        assert!(HardwareProfile::parse("5TF").is_err());
        assert!(HardwareProfile::parse("5TF:50GB").is_err());
        assert!(HardwareProfile::parse("0TF:50GBps").is_err());
    }

    #[test]
    fn rejects_too_many_active_experts() {
        let mut m = ModelSpec::MIXTRAL;
        m.experts_per_token = 9;
        assert!(m.validate().is_err());
    }

    #[test]
    fn mesh_coordinates_are_column_row() {
        let mesh = MeshSpec::new(2, 3, HardwareProfile::PRESETS[0]);
        assert_eq!(mesh.num_nodes(), 6);
        assert_eq!(mesh.coord(4), (1, 1));
        assert_eq!(mesh.node_at(2, 1), 5);
    }
}
