//! Benchmark fixtures: prebuilt single-rank sweep and norm inputs.

use itercomm_core::convergence::NormSpec;
use itercomm_core::solver::{discretize, DiscreteSystem, LocalDomain, ProblemSpec};
use itercomm_core::topology::build_partition;

/// One rank owning the whole n^3 grid, ready for repeated sweeps.
#[derive(Clone)]
pub struct SweepCase {
    pub dom: LocalDomain,
    pub sys: DiscreteSystem,
    pub b: Vec<f64>,
    pub u_old: Vec<f64>,
    pub u_new: Vec<f64>,
    pub res: Vec<f64>,
}

impl SweepCase {
    pub fn run(&mut self) {
        let halos = [None; 6];
        self.dom.jacobi_step(
            &self.sys,
            &self.b,
            &self.u_old,
            &halos,
            &mut self.u_new,
            &mut self.res,
        );
    }
}

pub fn sweep_case(n: usize) -> SweepCase {
    let spec = ProblemSpec {
        n,
        ..ProblemSpec::default()
    };
    let sys = discretize(&spec).unwrap();
    let part = build_partition(n, n, n, 1).unwrap();
    let dom = LocalDomain::new(&part, 0);
    let m = dom.len();
    let b: Vec<f64> = (0..m).map(|i| 1.0 + (i % 7) as f64 * 0.1).collect();
    let u_old: Vec<f64> = (0..m).map(|i| (i % 13) as f64 * 0.01).collect();
    SweepCase {
        dom,
        sys,
        b,
        u_old,
        u_new: vec![0.0; m],
        res: vec![0.0; m],
    }
}

pub fn norm_accumulate_case(len: usize, q: f64) -> (Vec<f64>, NormSpec) {
    let values: Vec<f64> = (0..len).map(|i| ((i % 17) as f64 - 8.0) * 0.25).collect();
    (values, NormSpec::new(q, 1e-6).unwrap())
}
