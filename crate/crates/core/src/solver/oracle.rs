//! Sequential reference implementations used as test oracles: a dense matrix
//! assembly, a stand-alone global Jacobi sweep, the algebraic residual
//! audit, and a full sequential time-stepping loop. Written independently of
//! [`super::LocalDomain`] (global triple loops, no partition code) so the
//! distributed path is checked against separate arithmetic.

use crate::convergence::{local_accumulate, NormSpec};

use super::{DiscreteSystem, ProblemSpec, SolverError, FACES};

/// Largest n for which the dense matrix is assembled (m = n^3 rows).
pub const DENSE_LIMIT: usize = 8;
/// Largest n the sequential sweep-based oracles accept.
pub const ORACLE_LIMIT: usize = 20;

fn guard(n: usize, limit: usize) -> Result<(), SolverError> {
    if n > limit {
        return Err(SolverError::OracleTooLarge(n, limit));
    }
    Ok(())
}

fn gidx(n: usize, x: usize, y: usize, z: usize) -> usize {
    x + n * (y + n * z)
}

/// Dense row-major assembly of the stencil matrix, for brute-force checks.
pub fn assemble_dense(sys: &DiscreteSystem) -> Result<Vec<Vec<f64>>, SolverError> {
    guard(sys.n, DENSE_LIMIT)?;
    let n = sys.n;
    let m = n * n * n;
    let mut a = vec![vec![0.0; m]; m];
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let row = gidx(n, x, y, z);
                a[row][row] = sys.d;
                for face in FACES {
                    let mut c = [x as isize, y as isize, z as isize];
                    c[face.axis()] += if face.positive() { 1 } else { -1 };
                    if c.iter().all(|&v| v >= 0 && (v as usize) < n) {
                        let col = gidx(n, c[0] as usize, c[1] as usize, c[2] as usize);
                        a[row][col] = sys.c[face as usize];
                    }
                }
            }
        }
    }
    Ok(a)
}

/// One Jacobi step on an explicit dense system.
pub fn dense_jacobi_step(a: &[Vec<f64>], b: &[f64], u_old: &[f64]) -> Vec<f64> {
    let m = b.len();
    let mut u_new = vec![0.0; m];
    for i in 0..m {
        let mut s = 0.0;
        for j in 0..m {
            if j != i {
                s += a[i][j] * u_old[j];
            }
        }
        u_new[i] = (b[i] - s) / a[i][i];
    }
    u_new
}

/// One global Jacobi sweep over the full interior grid, stencil form.
/// Accumulates neighbor terms in the fixed [`FACES`] order.
pub fn sweep(sys: &DiscreteSystem, b: &[f64], u_old: &[f64], u_new: &mut [f64]) {
    let n = sys.n;
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let i = gidx(n, x, y, z);
                let mut s = 0.0;
                for face in FACES {
                    let mut c = [x as isize, y as isize, z as isize];
                    c[face.axis()] += if face.positive() { 1 } else { -1 };
                    if c.iter().all(|&v| v >= 0 && (v as usize) < n) {
                        let j = gidx(n, c[0] as usize, c[1] as usize, c[2] as usize);
                        s += sys.c[face as usize] * u_old[j];
                    }
                }
                u_new[i] = (b[i] - s) / sys.d;
            }
        }
    }
}

/// The first `iterations` Jacobi iterates x^1 .. x^k starting from `u0`.
pub fn trajectory(
    sys: &DiscreteSystem,
    b: &[f64],
    u0: &[f64],
    iterations: usize,
) -> Result<Vec<Vec<f64>>, SolverError> {
    guard(sys.n, ORACLE_LIMIT)?;
    let mut out = Vec::with_capacity(iterations);
    let mut u = u0.to_vec();
    for _ in 0..iterations {
        let mut next = vec![0.0; u.len()];
        sweep(sys, b, &u, &mut next);
        out.push(next.clone());
        u = next;
    }
    Ok(out)
}

/// Algebraic residual `max_i |(A u - b)_i|` evaluated directly from the
/// stencil (the audit quantity, independent of the iteration path).
pub fn residual_inf(sys: &DiscreteSystem, u: &[f64], b: &[f64]) -> f64 {
    let n = sys.n;
    let mut worst: f64 = 0.0;
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let i = gidx(n, x, y, z);
                let mut au = sys.d * u[i];
                for face in FACES {
                    let mut c = [x as isize, y as isize, z as isize];
                    c[face.axis()] += if face.positive() { 1 } else { -1 };
                    if c.iter().all(|&v| v >= 0 && (v as usize) < n) {
                        let j = gidx(n, c[0] as usize, c[1] as usize, c[2] as usize);
                        au += sys.c[face as usize] * u[j];
                    }
                }
                worst = worst.max((au - b[i]).abs());
            }
        }
    }
    worst
}

/// Jacobi to the scaled update-difference stopping criterion; returns the
/// solution and the iteration count. The monitored residual entries are
/// `d * (u_new - u_old)`, which equal `b - A u_old` exactly, so the returned
/// iterate's algebraic residual is below the threshold by the contraction
/// factor.
pub fn solve(
    sys: &DiscreteSystem,
    b: &[f64],
    u0: &[f64],
    norm: &NormSpec,
    max_iterations: usize,
) -> Result<(Vec<f64>, usize), SolverError> {
    guard(sys.n, ORACLE_LIMIT)?;
    let mut u = u0.to_vec();
    let mut next = vec![0.0; u.len()];
    for k in 1..=max_iterations {
        sweep(sys, b, &u, &mut next);
        let res: Vec<f64> = next.iter().zip(&u).map(|(a, b)| sys.d * (a - b)).collect();
        std::mem::swap(&mut u, &mut next);
        let value = local_accumulate(&res, norm).finalize(norm);
        if value < norm.threshold {
            return Ok((u, k));
        }
    }
    Err(SolverError::BadSpec(format!(
        "sequential solve did not converge in {max_iterations} iterations"
    )))
}

/// Per-time-step metrics of the sequential reference run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub iterations: usize,
    /// Audited residual of the accepted solution.
    pub residual: f64,
}

/// The full sequential time loop: warm-started Jacobi per step, B rolled
/// forward with the converged solution.
pub fn time_loop(
    spec: &ProblemSpec,
    norm: &NormSpec,
    max_iterations: usize,
) -> Result<(Vec<StepMetrics>, Vec<f64>), SolverError> {
    let sys = discretize_for_loop(spec)?;
    let m = spec.unknowns();
    let mut u = vec![0.0; m];
    let mut b = vec![0.0; m];
    let mut metrics = Vec::with_capacity(spec.time_steps);
    for _ in 0..spec.time_steps {
        sys.rhs_from_previous(&u, &mut b);
        let (next, iterations) = solve(&sys, &b, &u, norm, max_iterations)?;
        u = next;
        metrics.push(StepMetrics {
            iterations,
            residual: residual_inf(&sys, &u, &b),
        });
    }
    Ok((metrics, u))
}

fn discretize_for_loop(spec: &ProblemSpec) -> Result<DiscreteSystem, SolverError> {
    guard(spec.n, ORACLE_LIMIT)?;
    super::discretize(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{discretize, LocalDomain, ProblemSpec};
    use crate::topology::build_partition;

    fn small_spec(n: usize) -> ProblemSpec {
        ProblemSpec {
            n,
            ..ProblemSpec::default()
        }
    }

    fn norm_inf() -> NormSpec {
        NormSpec::new(0.5, 1e-6).unwrap()
    }

    #[test]
    fn dense_assembly_matches_stencil_sweep() {
        for n in [2, 3] {
            let sys = discretize(&small_spec(n)).unwrap();
            let a = assemble_dense(&sys).unwrap();
            let m = n * n * n;
            let b: Vec<f64> = (0..m).map(|i| (i % 5) as f64 - 1.0).collect();
            let u0: Vec<f64> = (0..m).map(|i| (i % 3) as f64 * 0.1).collect();
            let dense = dense_jacobi_step(&a, &b, &u0);
            let mut sten = vec![0.0; m];
            sweep(&sys, &b, &u0, &mut sten);
            for i in 0..m {
                assert!((dense[i] - sten[i]).abs() < 1e-12, "n={n} i={i}");
            }
        }
    }

    #[test]
    fn dense_guard_refuses_large_systems() {
        let sys = discretize(&small_spec(12)).unwrap();
        assert!(matches!(
            assemble_dense(&sys),
            Err(SolverError::OracleTooLarge(12, DENSE_LIMIT))
        ));
    }

    #[test]
    fn fixed_point_has_zero_residual_forever() {
        let sys = discretize(&small_spec(3)).unwrap();
        let a = assemble_dense(&sys).unwrap();
        let m = 27;
        // Manufacture b = A * u for a known u.
        let u: Vec<f64> = (0..m).map(|i| (i as f64) * 0.01 - 0.1).collect();
        let b: Vec<f64> = a
            .iter()
            .map(|row| row.iter().zip(&u).map(|(x, y)| x * y).sum())
            .collect();
        assert!(residual_inf(&sys, &u, &b) < 1e-10);
        let traj = trajectory(&sys, &b, &u, 3).unwrap();
        for step in traj {
            for (got, want) in step.iter().zip(&u) {
                assert!((got - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn toy_two_by_two_iterates_match_hand_computation() {
        // A = [[2,1],[1,2]], b = [3,3]: from 0, one step gives (1.5, 1.5),
        // two steps give (0.75, 0.75).
        let a = vec![vec![2.0, 1.0], vec![1.0, 2.0]];
        let b = vec![3.0, 3.0];
        let u1 = dense_jacobi_step(&a, &b, &[0.0, 0.0]);
        assert_eq!(u1, vec![1.5, 1.5]);
        let u2 = dense_jacobi_step(&a, &b, &u1);
        assert_eq!(u2, vec![0.75, 0.75]);
    }

    #[test]
    fn error_contracts_monotonically_in_max_norm() {
        let sys = discretize(&small_spec(6)).unwrap();
        let m = 216;
        let b = vec![1.0; m];
        let (u_star, _) = solve(&sys, &b, &vec![0.0; m], &norm_inf(), 10_000).unwrap();
        let mut u = vec![0.5; m];
        let mut next = vec![0.0; m];
        let mut err: f64 = u
            .iter()
            .zip(&u_star)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        for _ in 0..30 {
            sweep(&sys, &b, &u.clone(), &mut next);
            std::mem::swap(&mut u, &mut next);
            let e: f64 = u
                .iter()
                .zip(&u_star)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(e <= err + 1e-15);
            err = e;
        }
    }

    #[test]
    fn one_distributed_step_equals_one_sequential_step() {
        // n=4 cube on 2 ranks: assemble halos by hand from the exact global
        // state and compare a single sweep elementwise.
        let spec = small_spec(4);
        let sys = discretize(&spec).unwrap();
        let n = 4;
        let m = n * n * n;
        let part = build_partition(n, n, n, 2).unwrap();
        let global_u: Vec<f64> = (0..m).map(|i| ((i * 7) % 11) as f64 * 0.05).collect();
        let global_b: Vec<f64> = (0..m).map(|i| ((i * 3) % 5) as f64 - 1.0).collect();
        let mut seq = vec![0.0; m];
        sweep(&sys, &global_b, &global_u, &mut seq);

        for rank in 0..2 {
            let dom = LocalDomain::new(&part, rank);
            let mut u = vec![0.0; dom.len()];
            let mut b = vec![0.0; dom.len()];
            dom.gather_local(&global_u, n, &mut u);
            dom.gather_local(&global_b, n, &mut b);
            // Halo = the neighbor's boundary layer facing us.
            let mut halo_store: Vec<Option<Vec<f64>>> = vec![None; 6];
            for &(face, nb) in &dom.neighbors {
                let nb_dom = LocalDomain::new(&part, nb);
                let mut nb_u = vec![0.0; nb_dom.len()];
                nb_dom.gather_local(&global_u, n, &mut nb_u);
                let mut layer = vec![0.0; nb_dom.face_len(face.opposite())];
                nb_dom.extract_face(&nb_u, face.opposite(), &mut layer);
                halo_store[face as usize] = Some(layer);
            }
            let halos: [Option<&[f64]>; 6] =
                std::array::from_fn(|i| halo_store[i].as_deref());
            let mut u_new = vec![0.0; dom.len()];
            let mut res = vec![0.0; dom.len()];
            dom.jacobi_step(&sys, &b, &u, &halos, &mut u_new, &mut res);
            let mut seq_block = vec![0.0; dom.len()];
            dom.gather_local(&seq, n, &mut seq_block);
            for i in 0..dom.len() {
                assert!(
                    (u_new[i] - seq_block[i]).abs() <= 1e-12,
                    "rank {rank} cell {i}: {} vs {}",
                    u_new[i],
                    seq_block[i]
                );
            }
        }
    }

    #[test]
    fn time_loop_audits_below_threshold() {
        let spec = ProblemSpec {
            n: 4,
            time_steps: 2,
            ..ProblemSpec::default()
        };
        let (metrics, u) = time_loop(&spec, &norm_inf(), 10_000).unwrap();
        assert_eq!(metrics.len(), 2);
        for step in &metrics {
            assert!(step.residual < 1e-6);
            assert!(step.iterations > 0);
        }
        assert!(u.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn empty_time_loop_yields_no_metrics() {
        let spec = ProblemSpec {
            n: 4,
            time_steps: 0,
            ..ProblemSpec::default()
        };
        let (metrics, u) = time_loop(&spec, &norm_inf(), 100).unwrap();
        assert!(metrics.is_empty());
        assert!(u.iter().all(|&x| x == 0.0));
    }
}
