//! Expert placements (the `E×D` fraction matrix per layer) and logical to
//! physical node mappings.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MeshSpec, ModelSpec};

/// Entries at or below this value count as "not placed".
pub const EPS_PLACE: f64 = 1e-9;

const SCHEMA: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    Tp,
    Ep,
    HybridCb,
    NodeBalance,
    NodeLinkBalance,
    Custom,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Strategy::Tp => "TP",
            Strategy::Ep => "EP",
            Strategy::HybridCb => "HYBRID_CB",
            Strategy::NodeBalance => "NODE_BALANCE",
            Strategy::NodeLinkBalance => "NODE_LINK_BALANCE",
            Strategy::Custom => "CUSTOM",
        };
        f.write_str(s)
    }
}

/// Fractions `P[i][c]` of expert `i`'s work assigned to node (or logical
/// cluster) `c`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlacement {
    num_experts: usize,
    num_nodes: usize,
    p: Vec<f64>,
}

impl LayerPlacement {
    pub fn zeros(num_experts: usize, num_nodes: usize) -> Self {
        Self {
            num_experts,
            num_nodes,
            p: vec![0.0; num_experts * num_nodes],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let num_experts = rows.len();
        let num_nodes = rows.first().map_or(0, Vec::len);
        assert!(
            rows.iter().all(|r| r.len() == num_nodes),
            "ragged placement rows"
        );
        Self {
            num_experts,
            num_nodes,
            p: rows.into_iter().flatten().collect(),
        }
    }

    pub fn from_flat(num_experts: usize, num_nodes: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != num_experts * num_nodes {
            return Err(Error::InvalidConfig(format!(
                "placement has {} entries, expected {num_experts}x{num_nodes}",
                p.len()
            )));
        }
        Ok(Self {
            num_experts,
            num_nodes,
            p,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn get(&self, expert: usize, node: usize) -> f64 {
        self.p[expert * self.num_nodes + node]
    }

    pub fn set(&mut self, expert: usize, node: usize, value: f64) {
        self.p[expert * self.num_nodes + node] = value;
    }

    pub fn row(&self, expert: usize) -> &[f64] {
        &self.p[expert * self.num_nodes..(expert + 1) * self.num_nodes]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.p
    }

    /// Activity indicator `Z[i][c]`.
    pub fn is_active(&self, expert: usize, node: usize) -> bool {
        self.get(expert, node) > EPS_PLACE
    }

    /// True when node `c` holds the whole of expert `i`.
    pub fn is_whole(&self, expert: usize, node: usize) -> bool {
        self.get(expert, node) >= 1.0 - EPS_PLACE
    }

    /// Nodes holding part of `expert`.
    pub fn holders(&self, expert: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_nodes).filter(move |&c| self.is_active(expert, c))
    }

    /// `Σ_i P[i][c]·w[i]` for every node.
    pub fn weighted_node_sums(&self, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_nodes];
        for (i, &w) in weights.iter().enumerate().take(self.num_experts) {
            for (c, &p) in self.row(i).iter().enumerate() {
                out[c] += p * w;
            }
        }
        out
    }

    /// Applies a node relabelling: entry `(i, c)` moves to `(i, perm[c])`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(self.num_experts, self.num_nodes);
        for i in 0..self.num_experts {
            for (c, &to) in perm.iter().enumerate() {
                out.set(i, to, self.get(i, c));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub strategy: Strategy,
    pub layers: Vec<LayerPlacement>,
}

impl Placement {
    /// The same layer placement repeated for `num_layers` layers.
    pub fn uniform(strategy: Strategy, layer: LayerPlacement, num_layers: usize) -> Self {
        Self {
            strategy,
            layers: vec![layer; num_layers],
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(&PlacementFile::from(self))?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: PlacementFile = serde_json::from_slice(&std::fs::read(path)?)?;
        file.try_into()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    EntryOutOfRange,
    RowSum,
    UnplacedExpert,
    Memory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub layer: usize,
    pub kind: ViolationKind,
    pub message: String,
}

/// Checks every placement invariant and returns the violations found (empty
/// when valid). Mismatched dimensions are an error rather than a violation.
pub fn validate_placement(
    placement: &Placement,
    model: &ModelSpec,
    mesh: &MeshSpec,
) -> Result<Vec<Violation>> {
    let (e_total, d) = (model.num_experts, mesh.num_nodes());
    let mut out = Vec::new();
    for (l, layer) in placement.layers.iter().enumerate() {
        if layer.num_experts != e_total || layer.num_nodes != d {
            return Err(Error::DimensionMismatch {
                layer: l,
                message: format!(
                    "placement is {}x{}, expected {e_total}x{d}",
                    layer.num_experts, layer.num_nodes
                ),
            });
        }
        for i in 0..e_total {
            let row = layer.row(i);
            for (c, &p) in row.iter().enumerate() {
                if !(-EPS_PLACE..=1.0 + EPS_PLACE).contains(&p) {
                    out.push(Violation {
                        layer: l,
                        kind: ViolationKind::EntryOutOfRange,
                        message: format!("entry out of [0,1] for expert {i} on node {c}: {p}"),
                    });
                }
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                let kind = if sum.abs() <= EPS_PLACE {
                    ViolationKind::UnplacedExpert
                } else {
                    ViolationKind::RowSum
                };
                out.push(Violation {
                    layer: l,
                    kind,
                    message: format!("row sum ≠ 1 for expert {i}: {sum}"),
                });
            }
        }
        if let Some(cap) = mesh.node_memory_bytes {
            for c in 0..d {
                let held = (0..e_total).filter(|&i| layer.is_active(i, c)).count() as u64;
                if held * model.expert_bytes() > cap {
                    out.push(Violation {
                        layer: l,
                        kind: ViolationKind::Memory,
                        message: format!("node {c} holds {held} experts, exceeding {cap} bytes"),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Bijection from logical cluster index to physical node id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeMapping {
    pub perm: Vec<usize>,
}

impl NodeMapping {
    pub fn identity(num_nodes: usize) -> Self {
        Self {
            perm: (0..num_nodes).collect(),
        }
    }

    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidConfig(format!(
                    "mapping {perm:?} is not a permutation"
                )));
            }
        }
        Ok(Self { perm })
    }

    pub fn physical(&self, cluster: usize) -> usize {
        self.perm[cluster]
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn save(&self, mesh: &MeshSpec, path: &Path) -> Result<()> {
        let file = MappingFile {
            schema: SCHEMA,
            rows: mesh.rows,
            cols: mesh.cols,
            perm: self.perm.clone(),
        };
        std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: MappingFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if file.schema != SCHEMA {
            return Err(Error::Schema(file.schema));
        }
        if file.rows * file.cols != file.perm.len() {
            return Err(Error::InvalidConfig(
                "mapping length does not match mesh shape".into(),
            ));
        }
        Self::new(file.perm)
    }
}

#[derive(Serialize, Deserialize)]
struct MappingFile {
    schema: u64,
    rows: usize,
    cols: usize,
    perm: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct PlacementFile {
    schema: u64,
    strategy: Strategy,
    num_experts: usize,
    num_nodes: usize,
    layers: Vec<PlacementLayerFile>,
}

#[derive(Serialize, Deserialize)]
struct PlacementLayerFile {
    layer: usize,
    p: Vec<f64>,
}

impl From<&Placement> for PlacementFile {
    fn from(p: &Placement) -> Self {
        let (e, d) = p
            .layers
            .first()
            .map_or((0, 0), |l| (l.num_experts, l.num_nodes));
        Self {
            schema: SCHEMA,
            strategy: p.strategy,
            num_experts: e,
            num_nodes: d,
            layers: p
                .layers
                .iter()
                .enumerate()
                .map(|(layer, l)| PlacementLayerFile {
                    layer,
                    p: l.p.clone(),
                })
                .collect(),
        }
    }
}

impl TryFrom<PlacementFile> for Placement {
    type Error = Error;

    fn try_from(f: PlacementFile) -> Result<Self> {
        if f.schema != SCHEMA {
            return Err(Error::Schema(f.schema));
        }
        let mut layers = Vec::with_capacity(f.layers.len());
        for (k, l) in f.layers.into_iter().enumerate() {
            if l.layer != k {
                return Err(Error::InvalidConfig(format!(
                    "placement layers out of order at {k}"
                )));
            }
            layers.push(
                LayerPlacement::from_flat(f.num_experts, f.num_nodes, l.p).map_err(|e| {
                    Error::DimensionMismatch {
                        layer: k,
                        message: e.to_string(),
                    }
                })?,
            );
        }
        Ok(Placement {
            strategy: f.strategy,
            layers,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HardwareProfile;

    fn setup(e: usize, rows: usize, cols: usize) -> (ModelSpec, MeshSpec) {
        let mut model = ModelSpec::MIXTRAL;
        model.num_experts = e;
        model.experts_per_token = 1;
        (
            model,
            MeshSpec::new(rows, cols, HardwareProfile::PRESETS[1]),
        )
    }

    #[test]
    fn uniform_split_is_valid() {
        let (model, mesh) = setup(3, 2, 2);
        let layer = LayerPlacement::from_rows(vec![vec![0.25; 4]; 3]);
        let p = Placement::uniform(Strategy::Tp, layer, 2);
        assert!(validate_placement(&p, &model, &mesh).unwrap().is_empty());
    }

    #[test]
    fn reports_row_sum_and_range_violations() {
        let (model, mesh) = setup(2, 1, 2);
        let layer = LayerPlacement::from_rows(vec![vec![0.5, 0.4], vec![1.2, -0.2]]);
        let v = validate_placement(
            &Placement::uniform(Strategy::Custom, layer, 1),
            &model,
            &mesh,
        )
        .unwrap();
        assert_eq!(v.len(), 3);
        assert!(v[0].message.contains("row sum ≠ 1 for expert 0"));
        assert!(v.iter().any(|x| x.message.contains("entry out of [0,1]")));
    }

    #[test]
    fn dimension_mismatch_names_layer() {
        let (model, mesh) = setup(2, 1, 2);
        let good = LayerPlacement::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let bad = LayerPlacement::from_rows(vec![vec![1.0], vec![1.0]]);
        let p = Placement {
            strategy: Strategy::Custom,
            layers: vec![good, bad],
        };
        match validate_placement(&p, &model, &mesh) {
            Err(Error::DimensionMismatch { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn memory_capacity_is_checked() {
        let (model, mut mesh) = setup(2, 1, 2);
        mesh.node_memory_bytes = Some(model.expert_bytes());
        let tp = LayerPlacement::from_rows(vec![vec![0.5, 0.5]; 2]);
        let v =
            validate_placement(&Placement::uniform(Strategy::Tp, tp, 1), &model, &mesh).unwrap();
        assert_eq!(
            v.iter().filter(|x| x.kind == ViolationKind::Memory).count(),
            2
        );
    }

    #[test]
    fn placement_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let layer = LayerPlacement::from_rows(vec![vec![0.125, 0.875], vec![1.0, 0.0]]);
        let p = Placement::uniform(Strategy::NodeBalance, layer, 3);
        p.save(&path).unwrap();
        assert_eq!(Placement::load(&path).unwrap(), p);
    }

    #[test]
    fn mapping_must_be_bijective() {
        assert!(NodeMapping::new(vec![1, 0, 2]).is_ok());
        assert!(NodeMapping::new(vec![1, 1, 2]).is_err());
        assert!(NodeMapping::new(vec![0, 3]).is_err());
    }
}
