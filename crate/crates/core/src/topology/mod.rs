//! Communication-graph construction from the 3D domain partitioning.

pub mod tree;

pub use tree::{build_spanning_tree, SpanningTree, TreeInfo};

use thiserror::Error;

use crate::transport::Rank;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("cannot place {p} processes on a {nx}x{ny}x{nz} grid")]
    Infeasible { p: usize, nx: usize, ny: usize, nz: usize },
    #[error("graph edge names rank {0} but only {1} processes exist")]
    RankOutOfRange(Rank, usize),
    #[error("duplicate or self-loop neighbor {0}")]
    BadNeighbor(Rank),
    #[error("spanning tree construction failed: {0}")]
    TreeFailure(String),
}

/// Directed neighbor lists per process: the logical network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommGraph {
    pub out_neighbors: Vec<Vec<Rank>>,
    pub in_neighbors: Vec<Vec<Rank>>,
}

impl CommGraph {
    /// Build from undirected edges; each edge yields both directed links.
    pub fn from_undirected(p: usize, edges: &[(Rank, Rank)]) -> Result<Self, TopologyError> {
        let mut out_neighbors = vec![Vec::new(); p];
        let mut in_neighbors = vec![Vec::new(); p];
        for &(a, b) in edges {
            if a >= p || b >= p {
                return Err(TopologyError::RankOutOfRange(a.max(b), p));
            }
            if a == b {
                return Err(TopologyError::BadNeighbor(a));
            }
            for (src, dst) in [(a, b), (b, a)] {
                if out_neighbors[src].contains(&dst) {
                    continue;
                }
                out_neighbors[src].push(dst);
                in_neighbors[dst].push(src);
            }
        }
        for list in out_neighbors.iter_mut().chain(in_neighbors.iter_mut()) {
            list.sort_unstable();
        }
        Ok(CommGraph {
            out_neighbors,
            in_neighbors,
        })
    }

    pub fn processes(&self) -> usize {
        self.out_neighbors.len()
    }

    pub fn validate(&self, p: usize) -> Result<(), TopologyError> {
        for (rank, list) in self.out_neighbors.iter().enumerate() {
            let mut seen = std::collections::HashSet::new();
            for &nb in list {
                if nb >= p {
                    return Err(TopologyError::RankOutOfRange(nb, p));
                }
                if nb == rank || !seen.insert(nb) {
                    return Err(TopologyError::BadNeighbor(nb));
                }
            }
        }
        Ok(())
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.processes()).all(|i| {
            self.out_neighbors[i]
                .iter()
                .all(|&j| self.out_neighbors[j].contains(&i) && self.in_neighbors[i].contains(&j))
                && self.out_neighbors[i] == self.in_neighbors[i]
        })
    }

    pub fn is_connected(&self) -> bool {
        let p = self.processes();
        if p == 0 {
            return true;
        }
        let mut seen = vec![false; p];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &self.out_neighbors[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Owned index box of one rank: half-open ranges over the interior grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexBox {
    pub x0: usize,
    pub y0: usize,
    pub z0: usize,
    pub bx: usize,
    pub by: usize,
    pub bz: usize,
}

impl IndexBox {
    pub fn len(&self) -> usize {
        self.bx * self.by * self.bz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tiling of the global interior grid over a 3D process grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition3D {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub px: usize,
    pub py: usize,
    pub pz: usize,
    pub boxes: Vec<IndexBox>,
}

impl Partition3D {
    pub fn processes(&self) -> usize {
        self.px * self.py * self.pz
    }

    /// Rank at process-grid coordinates (x fastest).
    pub fn rank_at(&self, ix: usize, iy: usize, iz: usize) -> Rank {
        ix + self.px * (iy + self.py * iz)
    }

    pub fn coords_of(&self, rank: Rank) -> (usize, usize, usize) {
        (
            rank % self.px,
            (rank / self.px) % self.py,
            rank / (self.px * self.py),
        )
    }

    /// Face-adjacent neighbor in the given axis/direction, if any.
    pub fn face_neighbor(&self, rank: Rank, axis: usize, positive: bool) -> Option<Rank> {
        let (ix, iy, iz) = self.coords_of(rank);
        let dims = [self.px, self.py, self.pz];
        let mut c = [ix, iy, iz];
        if positive {
            if c[axis] + 1 >= dims[axis] {
                return None;
            }
            c[axis] += 1;
        } else {
            if c[axis] == 0 {
                return None;
            }
            c[axis] -= 1;
        }
        Some(self.rank_at(c[0], c[1], c[2]))
    }
}

/// Balanced 1D split: extents differ by at most one, larger boxes first.
fn split_extents(n: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = n / parts;
    let rem = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < rem);
        out.push((start, len));
        start += len;
    }
    out
}

/// Total cut area of a (px, py, pz) factorization over an nx*ny*nz grid.
fn cut_area(nx: usize, ny: usize, nz: usize, px: usize, py: usize, pz: usize) -> usize {
    (px - 1) * ny * nz + (py - 1) * nx * nz + (pz - 1) * nx * ny
}

/// Tile the global grid over p processes, choosing the process-grid
/// factorization that minimizes total inter-box surface area. Ties prefer a
/// larger factor on x, then on y.
pub fn build_partition(
    nx: usize,
    ny: usize,
    nz: usize,
    p: usize,
) -> Result<Partition3D, TopologyError> {
    if p == 0 || p > nx * ny * nz {
        return Err(TopologyError::Infeasible { p, nx, ny, nz });
    }
    let mut best: Option<(usize, usize, usize, usize)> = None; // (area, px, py, pz)
    for px in 1..=p {
        if !p.is_multiple_of(px) || px > nx {
            continue;
        }
        let q = p / px;
        for py in 1..=q {
            if !q.is_multiple_of(py) || py > ny {
                continue;
            }
            let pz = q / py;
            if pz > nz {
                continue;
            }
            let area = cut_area(nx, ny, nz, px, py, pz);
            let better = match best {
                None => true,
                Some((a, bx, by, _)) => {
                    area < a || (area == a && (px > bx || (px == bx && py > by)))
                }
            };
            if better {
                best = Some((area, px, py, pz));
            }
        }
    }
    let (_, px, py, pz) = best.ok_or(TopologyError::Infeasible { p, nx, ny, nz })?;
    let xs = split_extents(nx, px);
    let ys = split_extents(ny, py);
    let zs = split_extents(nz, pz);
    let mut boxes = Vec::with_capacity(p);
    for &(z0, bz) in &zs {
        for &(y0, by) in &ys {
            for &(x0, bx) in &xs {
                boxes.push(IndexBox {
                    x0,
                    y0,
                    z0,
                    bx,
                    by,
                    bz,
                });
            }
        }
    }
    Ok(Partition3D {
        nx,
        ny,
        nz,
        px,
        py,
        pz,
        boxes,
    })
}

/// Symmetric graph connecting face-adjacent sub-domains (6-neighborhood).
pub fn partition_to_graph(part: &Partition3D) -> CommGraph {
    let p = part.processes();
    let mut edges = Vec::new();
    for rank in 0..p {
        for axis in 0..3 {
            if let Some(nb) = part.face_neighbor(rank, axis, true) {
                edges.push((rank, nb));
            }
        }
    }
    CommGraph::from_undirected(p, &edges).expect("partition adjacency is valid")
}
