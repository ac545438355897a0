use super::engine::simulate_with_router;
use super::routing::Router;
use super::CommTask;
use crate::model::MeshSpec;

/// Which ring directions carry data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RingDirection {
    /// Classic ring: every step moves `M/D` bytes to the successor.
    Unidirectional,
    /// The message is halved and each half runs the ring algorithm in
    /// opposite directions on the full-duplex links at the same time.
    Bidirectional,
}

/// Node visiting order of a ring embedded in the mesh.
///
/// When the mesh has an even side (and both sides ≥ 2) this is a
/// Hamiltonian cycle of single-hop links: along the first row, snaking back
/// over the remaining columns, and returning up column 0. Otherwise it is a
/// row-by-row boustrophedon whose closing edge may span several hops.
pub fn ring_order(mesh: &MeshSpec) -> Vec<usize> {
    let (rows, cols) = (mesh.rows, mesh.cols);
    if rows >= 2 && cols >= 2 && (rows % 2 == 0 || cols % 2 == 0) {
        let transpose = rows % 2 != 0;
        let (r, c) = if transpose {
            (cols, rows)
        } else {
            (rows, cols)
        };
        // Cycle over an r×c grid with r even, in (x, y) coordinates.
        let mut cycle: Vec<(usize, usize)> = (0..c).map(|x| (x, 0)).collect();
        for y in 1..r {
            if y % 2 == 1 {
                cycle.extend((1..c).rev().map(|x| (x, y)));
            } else {
                cycle.extend((1..c).map(|x| (x, y)));
            }
        }
        cycle.extend((1..r).rev().map(|y| (0, y)));
        cycle
            .into_iter()
            .map(|(x, y)| {
                if transpose {
                    mesh.node_at(y, x)
                } else {
                    mesh.node_at(x, y)
                }
            })
            .collect()
    } else {
        (0..rows)
            .flat_map(|y| {
                let xs: Vec<usize> = if y % 2 == 0 {
                    (0..cols).collect()
                } else {
                    (0..cols).rev().collect()
                };
                xs.into_iter().map(move |x| (x, y))
            })
            .map(|(x, y)| mesh.node_at(x, y))
            .collect()
    }
}

/// Ring all-reduce of `message_bytes` on every node, using both ring
/// directions. Returns the simulated completion time.
pub fn simulate_ring_allreduce(mesh: &MeshSpec, message_bytes: u64, chunk_count: usize) -> f64 {
    simulate_ring_allreduce_with(
        mesh,
        message_bytes,
        chunk_count,
        RingDirection::Bidirectional,
    )
}

/// Runs the `2·(D−1)` reduce-scatter and all-gather steps one after another
/// through the event simulator. Each step sends one `M/D` segment (split in
/// halves when bidirectional) from every node to its ring neighbour, cut
/// into `chunk_count` chunks.
pub fn simulate_ring_allreduce_with(
    mesh: &MeshSpec,
    message_bytes: u64,
    chunk_count: usize,
    direction: RingDirection,
) -> f64 {
    let d = mesh.num_nodes();
    if d < 2 || message_bytes == 0 {
        return 0.0;
    }
    let ring = ring_order(mesh);
    let router = Router::new(mesh);
    let segment = message_bytes.div_ceil(d as u64);
    let per_direction = match direction {
        RingDirection::Unidirectional => segment,
        RingDirection::Bidirectional => segment.div_ceil(2),
    };
    let chunk = per_direction.div_ceil(chunk_count.max(1) as u64).max(1);

    let mut step_tasks = Vec::new();
    for k in 0..d {
        let (a, b) = (ring[k], ring[(k + 1) % d]);
        step_tasks.push(CommTask {
            id: step_tasks.len(),
            src: a,
            dst: b,
            bytes: per_direction,
            release_time_s: 0.0,
        });
        if direction == RingDirection::Bidirectional {
            step_tasks.push(CommTask {
                id: step_tasks.len(),
                src: b,
                dst: a,
                bytes: per_direction,
                release_time_s: 0.0,
            });
        }
    }
    // Every step depends on the previous one, so steps run back to back.
    (0..2 * (d - 1))
        .map(|_| simulate_with_router(&step_tasks, mesh, &router, chunk).makespan_s)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HardwareProfile;
    use crate::netsim::xy_path;

    fn mesh(rows: usize, cols: usize, bw: f64) -> MeshSpec {
        MeshSpec::new(rows, cols, HardwareProfile::new(1.0, bw, 0.0))
    }

    #[test]
    fn ring_visits_every_node_once() {
        for (r, c) in [
            (1, 1),
            (1, 4),
            (2, 2),
            (3, 3),
            (4, 4),
            (3, 4),
            (4, 8),
            (8, 8),
            (5, 1),
        ] {
            let m = mesh(r, c, 1.0);
            let mut ring = ring_order(&m);
            assert_eq!(ring.len(), r * c);
            ring.sort_unstable();
            assert_eq!(ring, (0..r * c).collect::<Vec<_>>());
        }
    }

    #[test]
    fn even_meshes_get_single_hop_cycles() {
        for (r, c) in [(2, 2), (4, 4), (3, 4), (4, 3), (4, 8)] {
            let m = mesh(r, c, 1.0);
            let ring = ring_order(&m);
            for k in 0..ring.len() {
                let (a, b) = (m.coord(ring[k]), m.coord(ring[(k + 1) % ring.len()]));
                assert_eq!(xy_path(&m, a, b).unwrap().len(), 1, "{r}x{c} edge {k}");
            }
        }
    }

    #[test]
    fn single_node_is_free() {
        assert_eq!(simulate_ring_allreduce(&mesh(1, 1, 1.0), 1 << 20, 4), 0.0);
    }

    #[test]
    fn four_node_unidirectional_ring() {
        // 6 steps of 4 bytes at 1 B/s on disjoint links.
        let t =
            simulate_ring_allreduce_with(&mesh(2, 2, 1.0), 16, 1, RingDirection::Unidirectional);
        assert_eq!(t, 24.0);
        let analytical = 2.0 * 3.0 * (16.0 / 4.0) / 1.0;
        assert_eq!(t, analytical);
    }

    #[test]
    fn bidirectional_halves_the_time() {
        let t = simulate_ring_allreduce(&mesh(2, 2, 1.0), 16, 1);
        assert_eq!(t, 12.0);
    }
}
