//! Workload: 3D convection-diffusion, finite differences, backward Euler,
//! Jacobi relaxation on a block-partitioned cube.
//!
//! The unit cube carries an n^3 interior grid (h = 1/(n+1)) with homogeneous
//! Dirichlet boundaries. Backward Euler turns each time step into a linear
//! solve with a 7-point stencil; convection uses central differences. Each
//! rank owns one box of the tensor partition and exchanges face layers with
//! its six-neighborhood.

pub mod oracle;
pub mod timeloop;

use thiserror::Error;

use crate::topology::{IndexBox, Partition3D};
use crate::transport::Rank;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid problem spec: {0}")]
    BadSpec(String),
    #[error(
        "diagonal dominance violated on axis {axis}: |a|*h/2 = {lhs} >= nu = {nu}; refine the grid (larger n)"
    )]
    NotDominant { axis: usize, lhs: f64, nu: f64 },
    #[error("oracle size guard: n = {0} exceeds the sequential limit {1}")]
    OracleTooLarge(usize, usize),
}

/// Continuous problem parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    /// Diffusion coefficient.
    pub nu: f64,
    /// Convection velocity.
    pub a: [f64; 3],
    /// Time-step size.
    pub dt: f64,
    /// Interior grid points per axis.
    pub n: usize,
    pub time_steps: usize,
    /// Constant source term.
    pub source: f64,
}

impl Default for ProblemSpec {
    fn default() -> Self {
        ProblemSpec {
            nu: 0.5,
            a: [0.1, -0.2, 0.3],
            dt: 0.01,
            n: 10,
            time_steps: 5,
            source: 1.0,
        }
    }
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<(), SolverError> {
        if self.nu.is_nan() || self.nu <= 0.0 {
            return Err(SolverError::BadSpec("nu must be positive".into()));
        }
        if self.dt.is_nan() || self.dt <= 0.0 {
            return Err(SolverError::BadSpec("dt must be positive".into()));
        }
        if self.n < 2 {
            return Err(SolverError::BadSpec("n must be at least 2".into()));
        }
        if !self.a.iter().all(|x| x.is_finite()) || !self.source.is_finite() {
            return Err(SolverError::BadSpec("coefficients must be finite".into()));
        }
        Ok(())
    }

    pub fn unknowns(&self) -> usize {
        self.n * self.n * self.n
    }
}

/// Stencil neighbor direction; also indexes the off-diagonal coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Face {
    XMinus = 0,
    XPlus = 1,
    YMinus = 2,
    YPlus = 3,
    ZMinus = 4,
    ZPlus = 5,
}

pub const FACES: [Face; 6] = [
    Face::XMinus,
    Face::XPlus,
    Face::YMinus,
    Face::YPlus,
    Face::ZMinus,
    Face::ZPlus,
];

impl Face {
    pub fn axis(self) -> usize {
        (self as usize) / 2
    }

    pub fn positive(self) -> bool {
        (self as usize) % 2 == 1
    }

    pub fn opposite(self) -> Face {
        FACES[(self as usize) ^ 1]
    }
}

/// Assembled stencil coefficients for one time step's linear system.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSystem {
    pub n: usize,
    pub h: f64,
    pub dt: f64,
    /// Diagonal coefficient.
    pub d: f64,
    /// Off-diagonal coefficients indexed by [`Face`].
    pub c: [f64; 6],
    pub source: f64,
}

/// Build the 7-point stencil; errors if central convection breaks strict
/// diagonal dominance.
pub fn discretize(spec: &ProblemSpec) -> Result<DiscreteSystem, SolverError> {
    spec.validate()?;
    let h = 1.0 / (spec.n as f64 + 1.0);
    let diff = spec.nu / (h * h);
    let d = 1.0 / spec.dt + 6.0 * diff;
    let mut c = [0.0; 6];
    for axis in 0..3 {
        let conv = spec.a[axis] / (2.0 * h);
        if spec.a[axis].abs() * h / 2.0 >= spec.nu {
            return Err(SolverError::NotDominant {
                axis,
                lhs: spec.a[axis].abs() * h / 2.0,
                nu: spec.nu,
            });
        }
        c[2 * axis] = -diff - conv;
        c[2 * axis + 1] = -diff + conv;
    }
    Ok(DiscreteSystem {
        n: spec.n,
        h,
        dt: spec.dt,
        d,
        c,
        source: spec.source,
    })
}

impl DiscreteSystem {
    /// Strict-dominance margin; equals 1/dt by construction.
    pub fn dominance_margin(&self) -> f64 {
        self.d - self.c.iter().map(|x| x.abs()).sum::<f64>()
    }

    /// Right-hand side for the next time step given the previous solution.
    pub fn rhs_from_previous(&self, u_prev: &[f64], out: &mut [f64]) {
        debug_assert_eq!(u_prev.len(), out.len());
        for (o, &u) in out.iter_mut().zip(u_prev) {
            *o = u / self.dt + self.source;
        }
    }
}

/// One rank's owned sub-box plus its face-neighbor table.
#[derive(Debug, Clone)]
pub struct LocalDomain {
    pub rank: Rank,
    pub boxr: IndexBox,
    /// Neighbor rank per face, where one exists.
    pub neighbors: Vec<(Face, Rank)>,
}

impl LocalDomain {
    pub fn new(part: &Partition3D, rank: Rank) -> Self {
        let mut neighbors = Vec::new();
        for face in FACES {
            if let Some(nb) = part.face_neighbor(rank, face.axis(), face.positive()) {
                neighbors.push((face, nb));
            }
        }
        LocalDomain {
            rank,
            boxr: part.boxes[rank],
            neighbors,
        }
    }

    pub fn len(&self) -> usize {
        self.boxr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxr.is_empty()
    }

    pub fn neighbor_on(&self, face: Face) -> Option<Rank> {
        self.neighbors
            .iter()
            .find(|&&(f, _)| f == face)
            .map(|&(_, r)| r)
    }

    pub fn face_of_neighbor(&self, rank: Rank) -> Option<Face> {
        self.neighbors
            .iter()
            .find(|&&(_, r)| r == rank)
            .map(|&(f, _)| f)
    }

    /// Local linear index, x fastest.
    fn idx(&self, lx: usize, ly: usize, lz: usize) -> usize {
        lx + self.boxr.bx * (ly + self.boxr.by * lz)
    }

    /// Number of values exchanged across `face`.
    pub fn face_len(&self, face: Face) -> usize {
        let b = &self.boxr;
        match face.axis() {
            0 => b.by * b.bz,
            1 => b.bx * b.bz,
            _ => b.bx * b.by,
        }
    }

    /// Copy the boundary layer adjacent to `face` out of `u`. Layout is the
    /// in-plane coordinates with the lower axis fastest, identical on both
    /// sides of the exchange because adjacent boxes share in-plane extents.
    pub fn extract_face(&self, u: &[f64], face: Face, out: &mut [f64]) {
        let b = &self.boxr;
        debug_assert_eq!(out.len(), self.face_len(face));
        let mut k = 0;
        match face {
            Face::XMinus | Face::XPlus => {
                let lx = if face.positive() { b.bx - 1 } else { 0 };
                for lz in 0..b.bz {
                    for ly in 0..b.by {
                        out[k] = u[self.idx(lx, ly, lz)];
                        k += 1;
                    }
                }
            }
            Face::YMinus | Face::YPlus => {
                let ly = if face.positive() { b.by - 1 } else { 0 };
                for lz in 0..b.bz {
                    for lx in 0..b.bx {
                        out[k] = u[self.idx(lx, ly, lz)];
                        k += 1;
                    }
                }
            }
            Face::ZMinus | Face::ZPlus => {
                let lz = if face.positive() { b.bz - 1 } else { 0 };
                for ly in 0..b.by {
                    for lx in 0..b.bx {
                        out[k] = u[self.idx(lx, ly, lz)];
                        k += 1;
                    }
                }
            }
        }
    }

    fn halo_index(&self, face: Face, lx: usize, ly: usize, lz: usize) -> usize {
        let b = &self.boxr;
        match face.axis() {
            0 => ly + b.by * lz,
            1 => lx + b.bx * lz,
            _ => lx + b.bx * ly,
        }
    }

    /// One Jacobi sweep over the owned box. Off-box neighbor values come from
    /// `halos` (indexed by `Face as usize`); physical boundaries contribute
    /// zero. The stencil accumulates in the fixed face order of [`FACES`] so
    /// distributed and sequential sweeps perform identical arithmetic.
    /// Residual entries are `u_new - u_old`.
    pub fn jacobi_step(
        &self,
        sys: &DiscreteSystem,
        b_local: &[f64],
        u_old: &[f64],
        halos: &[Option<&[f64]>; 6],
        u_new: &mut [f64],
        res: &mut [f64],
    ) {
        let b = &self.boxr;
        debug_assert_eq!(b_local.len(), self.len());
        debug_assert_eq!(u_old.len(), self.len());
        for lz in 0..b.bz {
            for ly in 0..b.by {
                for lx in 0..b.bx {
                    let i = self.idx(lx, ly, lz);
                    let mut s = 0.0;
                    for face in FACES {
                        let (delta, coord, extent) = match face.axis() {
                            0 => (b.x0, lx, b.bx),
                            1 => (b.y0, ly, b.by),
                            _ => (b.z0, lz, b.bz),
                        };
                        let v = if face.positive() {
                            if coord + 1 < extent {
                                Some(match face.axis() {
                                    0 => u_old[self.idx(lx + 1, ly, lz)],
                                    1 => u_old[self.idx(lx, ly + 1, lz)],
                                    _ => u_old[self.idx(lx, ly, lz + 1)],
                                })
                            } else if delta + extent < sys.n {
                                Some(
                                    halos[face as usize].expect("halo missing for interior face")
                                        [self.halo_index(face, lx, ly, lz)],
                                )
                            } else {
                                None // physical boundary, u = 0
                            }
                        } else if coord > 0 {
                            Some(match face.axis() {
                                0 => u_old[self.idx(lx - 1, ly, lz)],
                                1 => u_old[self.idx(lx, ly - 1, lz)],
                                _ => u_old[self.idx(lx, ly, lz - 1)],
                            })
                        } else if delta > 0 {
                            Some(
                                halos[face as usize].expect("halo missing for interior face")
                                    [self.halo_index(face, lx, ly, lz)],
                            )
                        } else {
                            None
                        };
                        if let Some(v) = v {
                            s += sys.c[face as usize] * v;
                        }
                    }
                    u_new[i] = (b_local[i] - s) / sys.d;
                    res[i] = u_new[i] - u_old[i];
                }
            }
        }
    }

    /// Scatter this rank's block into a global interior-grid array.
    pub fn scatter_global(&self, u: &[f64], global: &mut [f64], n: usize) {
        let b = &self.boxr;
        for lz in 0..b.bz {
            for ly in 0..b.by {
                for lx in 0..b.bx {
                    let g = (b.x0 + lx) + n * ((b.y0 + ly) + n * (b.z0 + lz));
                    global[g] = u[self.idx(lx, ly, lz)];
                }
            }
        }
    }

    /// Gather this rank's block out of a global interior-grid array.
    pub fn gather_local(&self, global: &[f64], n: usize, u: &mut [f64]) {
        let b = &self.boxr;
        for lz in 0..b.bz {
            for ly in 0..b.by {
                for lx in 0..b.bx {
                    let g = (b.x0 + lx) + n * ((b.y0 + ly) + n * (b.z0 + lz));
                    u[self.idx(lx, ly, lz)] = global[g];
                }
            }
        }
    }
}
