use crate::error::{Error, Result};
use crate::model::MeshSpec;
use crate::placement::{LayerPlacement, NodeMapping};

/// Every expert split evenly over all `num_nodes` nodes.
pub fn baseline_tp(num_experts: usize, num_nodes: usize) -> LayerPlacement {
    let mut p = LayerPlacement::zeros(num_experts, num_nodes);
    let share = 1.0 / num_nodes as f64;
    for i in 0..num_experts {
        for c in 0..num_nodes {
            p.set(i, c, share);
        }
    }
    p
}

/// Longest-processing-time assignment of weighted items to `bins`: heaviest
/// first (ties to the lower id), each to the currently lightest bin (ties to
/// the lower bin).
pub(crate) fn lpt(weights: &[f64], bins: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut load = vec![0.0; bins];
    let mut assign = vec![0; weights.len()];
    for i in order {
        let mut best = 0;
        for b in 1..bins {
            if load[b] < load[best] {
                best = b;
            }
        }
        load[best] += weights[i];
        assign[i] = best;
    }
    assign
}

/// Whole experts assigned to nodes by LPT on their frequencies.
pub fn baseline_ep(freq: &[f64], num_nodes: usize) -> LayerPlacement {
    let mut p = LayerPlacement::zeros(freq.len(), num_nodes);
    for (i, c) in lpt(freq, num_nodes).into_iter().enumerate() {
        p.set(i, c, 1.0);
    }
    p
}

/// Rectangular region shape `(region_rows, region_cols)` tiling the mesh with
/// `num_regions` regions, preferring the squarest region.
pub fn region_shape(mesh: &MeshSpec, num_regions: usize) -> Result<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    for along_y in 1..=mesh.rows {
        if !mesh.rows.is_multiple_of(along_y) || !num_regions.is_multiple_of(along_y) {
            continue;
        }
        let along_x = num_regions / along_y;
        if along_x == 0 || !mesh.cols.is_multiple_of(along_x) {
            continue;
        }
        let shape = (mesh.rows / along_y, mesh.cols / along_x);
        let skew = |(r, c): (usize, usize)| r.max(c) as f64 / r.min(c) as f64;
        if best.is_none_or(|b| skew(shape) < skew(b)) {
            best = Some(shape);
        }
    }
    best.ok_or_else(|| {
        Error::InvalidConfig(format!(
            "{num_regions} regions cannot tile a {}x{} mesh with equal rectangles",
            mesh.rows, mesh.cols
        ))
    })
}

/// Hybrid TP-EP compute-balanced placement: experts go whole to regions by
/// LPT and are split evenly over the nodes of their region.
///
/// Logical clusters are numbered region by region; the returned mapping
/// sends each region's clusters onto its rectangle of physical nodes.
pub fn baseline_hybrid_cb(
    freq: &[f64],
    mesh: &MeshSpec,
    num_regions: usize,
) -> Result<(LayerPlacement, NodeMapping)> {
    let (rr, rc) = region_shape(mesh, num_regions)?;
    let size = rr * rc;
    let regions_x = mesh.cols / rc;
    let mut perm = Vec::with_capacity(mesh.num_nodes());
    for region in 0..num_regions {
        let (ox, oy) = ((region % regions_x) * rc, (region / regions_x) * rr);
        for y in 0..rr {
            for x in 0..rc {
                perm.push(mesh.node_at(ox + x, oy + y));
            }
        }
    }
    let mut p = LayerPlacement::zeros(freq.len(), mesh.num_nodes());
    let share = 1.0 / size as f64;
    for (i, region) in lpt(freq, num_regions).into_iter().enumerate() {
        for c in region * size..(region + 1) * size {
            p.set(i, c, share);
        }
    }
    Ok((p, NodeMapping::new(perm)?))
}

/// Region count used for the hybrid baseline: 2 for models with at most 8
/// experts and 8 otherwise, reduced to the largest count that tiles the mesh.
pub fn default_region_count(num_experts: usize, mesh: &MeshSpec) -> usize {
    let target = if num_experts <= 8 { 2 } else { 8 };
    (1..=target.min(mesh.num_nodes()))
        .rev()
        .find(|&n| region_shape(mesh, n).is_ok())
        .unwrap_or(1)
}
