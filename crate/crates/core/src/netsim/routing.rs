use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MeshSpec;

/// Output port of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// Towards larger column index.
    XPlus,
    XMinus,
    /// Towards larger row index.
    YPlus,
    YMinus,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::XPlus,
        Direction::XMinus,
        Direction::YPlus,
        Direction::YMinus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::XPlus => "x+",
            Direction::XMinus => "x-",
            Direction::YPlus => "y+",
            Direction::YMinus => "y-",
        }
    }
}

/// Directed link leaving `node` through port `dir`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LinkId {
    pub node: usize,
    pub dir: Direction,
}

impl LinkId {
    pub fn index(self) -> usize {
        self.node * 4 + self.dir as usize
    }

    pub fn from_index(index: usize) -> Self {
        Self {
            node: index / 4,
            dir: Direction::ALL[index % 4],
        }
    }

    /// Whether the link exists (boundary ports have no neighbour).
    pub fn exists(self, mesh: &MeshSpec) -> bool {
        let (x, y) = mesh.coord(self.node);
        match self.dir {
            Direction::XPlus => x + 1 < mesh.cols,
            Direction::XMinus => x > 0,
            Direction::YPlus => y + 1 < mesh.rows,
            Direction::YMinus => y > 0,
        }
    }
}

/// Dimension-ordered route from `src` to `dst`, both given as `(x, y)` =
/// `(column, row)`: all column hops first, then row hops.
pub fn xy_path(mesh: &MeshSpec, src: (usize, usize), dst: (usize, usize)) -> Result<Vec<LinkId>> {
    for &(x, y) in &[src, dst] {
        if x >= mesh.cols || y >= mesh.rows {
            return Err(Error::OutOfMesh {
                x,
                y,
                cols: mesh.cols,
                rows: mesh.rows,
            });
        }
    }
    let (mut x, mut y) = src;
    let mut path = Vec::with_capacity(x.abs_diff(dst.0) + y.abs_diff(dst.1));
    while x != dst.0 {
        let dir = if dst.0 > x {
            Direction::XPlus
        } else {
            Direction::XMinus
        };
        path.push(LinkId {
            node: mesh.node_at(x, y),
            dir,
        });
        x = if dst.0 > x { x + 1 } else { x - 1 };
    }
    while y != dst.1 {
        let dir = if dst.1 > y {
            Direction::YPlus
        } else {
            Direction::YMinus
        };
        path.push(LinkId {
            node: mesh.node_at(x, y),
            dir,
        });
        y = if dst.1 > y { y + 1 } else { y - 1 };
    }
    Ok(path)
}

/// XY routes for every node pair, computed once per mesh.
#[derive(Debug, Clone)]
pub struct Router {
    num_nodes: usize,
    paths: Vec<Vec<LinkId>>,
}

impl Router {
    pub fn new(mesh: &MeshSpec) -> Self {
        let d = mesh.num_nodes();
        let mut paths = Vec::with_capacity(d * d);
        for src in 0..d {
            for dst in 0..d {
                paths.push(
                    xy_path(mesh, mesh.coord(src), mesh.coord(dst))
                        .expect("node ids are inside the mesh"),
                );
            }
        }
        Self {
            num_nodes: d,
            paths,
        }
    }

    pub fn path(&self, src: usize, dst: usize) -> &[LinkId] {
        &self.paths[src * self.num_nodes + dst]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HardwareProfile;

    fn mesh(rows: usize, cols: usize) -> MeshSpec {
        MeshSpec::new(rows, cols, HardwareProfile::PRESETS[0])
    }

    /// Nodes visited by a path, as `(x, y)` coordinates.
    fn visited(mesh: &MeshSpec, start: (usize, usize), path: &[LinkId]) -> Vec<(usize, usize)> {
        let mut out = vec![start];
        for link in path {
            let (x, y) = mesh.coord(link.node);
            assert_eq!((x, y), *out.last().unwrap());
            out.push(match link.dir {
                Direction::XPlus => (x + 1, y),
                Direction::XMinus => (x - 1, y),
                Direction::YPlus => (x, y + 1),
                Direction::YMinus => (x, y - 1),
            });
        }
        out
    }

    #[test]
    fn x_hops_come_first() {
        let m = mesh(4, 4);
        let p = xy_path(&m, (0, 0), (2, 1)).unwrap();
        assert_eq!(
            visited(&m, (0, 0), &p),
            vec![(0, 0), (1, 0), (2, 0), (2, 1)]
        );
    }

    #[test]
    fn identity_route_is_empty() {
        assert!(xy_path(&mesh(4, 4), (1, 1), (1, 1)).unwrap().is_empty());
    }

    #[test]
    fn hop_count_is_manhattan_distance() {
        let m = mesh(4, 4);
        let router = Router::new(&m);
        for s in 0..16 {
            for d in 0..16 {
                let (sx, sy) = m.coord(s);
                let (dx, dy) = m.coord(d);
                let path = router.path(s, d);
                assert_eq!(path.len(), sx.abs_diff(dx) + sy.abs_diff(dy));
                assert!(path.iter().all(|l| l.exists(&m)));
                assert_eq!(*visited(&m, (sx, sy), path).last().unwrap(), (dx, dy));
            }
        }
        assert_eq!(xy_path(&m, (3, 0), (0, 2)).unwrap().len(), 5);
    }

    #[test]
    fn outside_coordinates_are_rejected() {
        assert!(matches!(
            xy_path(&mesh(2, 2), (0, 0), (2, 0)),
            Err(Error::OutOfMesh { x: 2, .. })
        ));
    }

    #[test]
    fn boundary_links_do_not_exist() {
        let m = mesh(2, 3);
        let present = (0..m.num_nodes() * 4)
            .filter(|&i| LinkId::from_index(i).exists(&m))
            .count();
        // 2 rows × 2 horizontal pairs + 3 columns × 1 vertical pair, both directions.
        assert_eq!(present, 2 * (2 * 2 + 3));
    }
}
