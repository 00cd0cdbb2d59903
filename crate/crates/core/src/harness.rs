//! Experiment runner: configuration parsing, process wiring, and report
//! emission for the convection-diffusion workload.
//!
//! Logical processes are threads over the simulated transport by default.
//! The per-rank routine is shared with the socket backend so an external
//! orchestrator can run the same experiment over OS processes.

use std::collections::BTreeMap;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convergence::NormSpec;
use crate::kernel::{KernelError, Scheme, Stats};
use crate::solver::timeloop::{run_time_loop, setup_communicator, StepOutcome};
use crate::solver::{discretize, LocalDomain, ProblemSpec, SolverError};
use crate::topology::build_partition;
use crate::transport::sim::{DelayModel, SimNet};
use crate::transport::Endpoint;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run error: {0}")]
    Run(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<KernelError> for HarnessError {
    fn from(e: KernelError) -> Self {
        HarnessError::Run(e.to_string())
    }
}

impl From<SolverError> for HarnessError {
    fn from(e: SolverError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

/// Fully validated experiment configuration. Defaults mirror the reference
/// setup: overlapping sync scheme, max-norm stopping at 1e-6, nu = 0.5,
/// a = (0.1, -0.2, 0.3), dt = 0.01, five time steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub p: usize,
    pub n: usize,
    pub scheme: Scheme,
    /// Norm exponent; any value below 1 selects the max norm.
    pub q: f64,
    pub threshold: f64,
    pub max_recv_requests: usize,
    pub seed: u64,
    pub time_steps: usize,
    pub dt: f64,
    pub nu: f64,
    pub a: [f64; 3],
    pub source: f64,
    pub max_iterations: u64,
    pub base_latency: u64,
    pub jitter: u64,
    /// Per-rank compute slowdown factors; missing entries default to 1.
    pub slowdown: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            p: 4,
            n: 10,
            scheme: Scheme::OverlapSync,
            q: 0.5,
            threshold: 1e-6,
            max_recv_requests: 2,
            seed: 0,
            time_steps: 5,
            dt: 0.01,
            nu: 0.5,
            a: [0.1, -0.2, 0.3],
            source: 1.0,
            max_iterations: 200_000,
            base_latency: 5,
            jitter: 2,
            slowdown: Vec::new(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value
        .parse()
        .map_err(|_| HarnessError::Config(format!("invalid value '{value}' for key '{key}'")))
}

impl RunConfig {
    /// Apply one key=value setting; shared by config files and CLI flags.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        match key {
            "p" => self.p = parse_num(key, value)?,
            "n" => self.n = parse_num(key, value)?,
            "scheme" => {
                self.scheme = value
                    .parse()
                    .map_err(|e: String| HarnessError::Config(e))?
            }
            "q" => self.q = parse_num(key, value)?,
            "threshold" => self.threshold = parse_num(key, value)?,
            "max_recv_requests" => self.max_recv_requests = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "time_steps" => self.time_steps = parse_num(key, value)?,
            "dt" => self.dt = parse_num(key, value)?,
            "nu" => self.nu = parse_num(key, value)?,
            "ax" => self.a[0] = parse_num(key, value)?,
            "ay" => self.a[1] = parse_num(key, value)?,
            "az" => self.a[2] = parse_num(key, value)?,
            "source" => self.source = parse_num(key, value)?,
            "max_iterations" => self.max_iterations = parse_num(key, value)?,
            "base_latency" => self.base_latency = parse_num(key, value)?,
            "jitter" => self.jitter = parse_num(key, value)?,
            "slowdown" => {
                self.slowdown = value
                    .split(',')
                    .map(|s| parse_num::<f64>(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            other => {
                return Err(HarnessError::Config(format!("unknown key '{other}'")))
            }
        }
        Ok(())
    }

    /// Parse a key=value config file body (# starts a comment line).
    pub fn parse_config(text: &str) -> Result<RunConfig, HarnessError> {
        let mut cfg = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.p == 0 {
            return Err(HarnessError::Config("p must be at least 1".into()));
        }
        if self.p > self.n * self.n * self.n {
            return Err(HarnessError::Config(format!(
                "p = {} exceeds the number of unknowns for n = {}",
                self.p, self.n
            )));
        }
        if self.threshold.is_nan() || self.threshold <= 0.0 {
            return Err(HarnessError::Config("threshold must be positive".into()));
        }
        if !self.q.is_finite() {
            return Err(HarnessError::Config("q must be finite".into()));
        }
        if self.max_recv_requests == 0 {
            return Err(HarnessError::Config(
                "max_recv_requests must be at least 1".into(),
            ));
        }
        if self.slowdown.iter().any(|&s| s.is_nan() || s < 1.0) {
            return Err(HarnessError::Config(
                "slowdown factors must be >= 1".into(),
            ));
        }
        self.problem().validate()?;
        discretize(&self.problem())?;
        Ok(())
    }

    pub fn problem(&self) -> ProblemSpec {
        ProblemSpec {
            nu: self.nu,
            a: self.a,
            dt: self.dt,
            n: self.n,
            time_steps: self.time_steps,
            source: self.source,
        }
    }

    pub fn norm(&self) -> Result<NormSpec, HarnessError> {
        NormSpec::new(self.q, self.threshold)
            .map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn delay_model(&self) -> DelayModel {
        let mut slowdown = self.slowdown.clone();
        slowdown.resize(self.p, 1.0);
        DelayModel {
            base_latency: self.base_latency,
            jitter_max: self.jitter,
            seed: self.seed,
            slowdown,
            ..DelayModel::default()
        }
    }
}

/// One rank's share of a finished experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOutcome {
    pub rank: usize,
    pub steps: Vec<StepOutcome>,
    pub stats: Stats,
    /// Set when the iteration cap was hit; `steps` then holds the completed
    /// prefix.
    pub failed: bool,
}

/// Aggregated experiment report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scheme: Scheme,
    pub p: usize,
    pub n: usize,
    pub seed: u64,
    pub failed: bool,
    pub steps: Vec<StepRow>,
    pub ranks: Vec<RankOutcome>,
}

/// One CSV row: Table-shaped metrics per time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    /// Elapsed time for the step: simulated ticks at 1 us per tick on the
    /// simulated backend (machine-independent).
    pub time_s: f64,
    /// Residual norm reported at the tree root.
    pub residual: f64,
    /// Largest per-rank iteration count for the step.
    pub iterations: u64,
    /// Detection rounds concluded at the root during the step.
    pub snapshots: u64,
}

/// The per-rank experiment routine, shared by both backends.
pub fn rank_routine(
    ep: Box<dyn Endpoint>,
    cfg: &RunConfig,
    rank: usize,
) -> Result<RankOutcome, HarnessError> {
    let part = build_partition(cfg.n, cfg.n, cfg.n, cfg.p)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let sys = discretize(&cfg.problem())?;
    let dom = LocalDomain::new(&part, rank);
    let mut comm = setup_communicator(ep, &dom, cfg.norm()?, cfg.scheme, cfg.max_recv_requests)?;
    let mut steps = Vec::new();
    let mut failed = false;
    for _ in 0..cfg.time_steps {
        match run_time_loop(&mut comm, &dom, &sys, 1, cfg.max_iterations) {
            Ok(mut s) => steps.append(&mut s),
            Err(KernelError::NoConvergence(_)) => {
                failed = true;
                break;
            }
            Err(e) => {
                comm.finish();
                return Err(e.into());
            }
        }
    }
    let stats = comm.stats().clone();
    comm.finish();
    Ok(RankOutcome {
        rank,
        steps,
        stats,
        failed,
    })
}

/// Run the experiment over the simulated backend; deterministic per seed.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    let net = SimNet::new(cfg.p, cfg.delay_model());
    let part = build_partition(cfg.n, cfg.n, cfg.n, cfg.p)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut handles = Vec::new();
    for rank in 0..cfg.p {
        let dom = LocalDomain::new(&part, rank);
        let peers: Vec<usize> = dom.neighbors.iter().map(|&(_, r)| r).collect();
        let ep = net
            .open_endpoint(rank, &peers, &peers)
            .map_err(|e| HarnessError::Run(e.to_string()))?;
        let cfg = cfg.clone();
        handles.push(thread::spawn(move || {
            rank_routine(Box::new(ep), &cfg, rank)
        }));
    }
    let mut outcomes = Vec::new();
    for h in handles {
        outcomes.push(
            h.join()
                .map_err(|_| HarnessError::Run("worker thread panicked".into()))??,
        );
    }
    Ok(assemble_report(cfg, outcomes))
}

/// Merge per-rank outcomes into the final report.
pub fn assemble_report(cfg: &RunConfig, mut outcomes: Vec<RankOutcome>) -> RunReport {
    outcomes.sort_by_key(|o| o.rank);
    let failed = outcomes.iter().any(|o| o.failed);
    let completed = outcomes
        .iter()
        .map(|o| o.steps.len())
        .min()
        .unwrap_or(0);
    let mut steps = Vec::with_capacity(completed);
    let mut prev_ticks: BTreeMap<usize, u64> = BTreeMap::new();
    for s in 0..completed {
        let mut time_s: f64 = 0.0;
        let mut iterations = 0;
        for o in &outcomes {
            let start = prev_ticks.get(&o.rank).copied().unwrap_or(0);
            let elapsed = (o.steps[s].ticks - start) as f64 * 1e-6;
            time_s = time_s.max(elapsed);
            iterations = iterations.max(o.steps[s].iterations);
            prev_ticks.insert(o.rank, o.steps[s].ticks);
        }
        let root = &outcomes[0].steps[s];
        steps.push(StepRow {
            step: s,
            time_s,
            residual: root.residual,
            iterations,
            snapshots: root.snapshots,
        });
    }
    RunReport {
        scheme: cfg.scheme,
        p: cfg.p,
        n: cfg.n,
        seed: cfg.seed,
        failed,
        steps,
        ranks: outcomes,
    }
}

impl RunReport {
    /// CSV body with the fixed header; one row per completed time step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,scheme,p,n,time_s,residual,iterations,snapshots\n");
        for row in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:e},{},{}\n",
                row.step,
                self.scheme.name(),
                self.p,
                self.n,
                row.time_s,
                row.residual,
                row.iterations,
                row.snapshots
            ));
        }
        if self.failed {
            out.push_str("# failed: iteration cap reached\n");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<RunReport, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_the_documented_defaults() {
        let cfg = RunConfig::parse_config("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.q, 0.5);
        assert_eq!(cfg.threshold, 1e-6);
        assert_eq!(cfg.scheme, Scheme::OverlapSync);
        assert_eq!(cfg.dt, 0.01);
        assert_eq!(cfg.nu, 0.5);
        assert_eq!(cfg.a, [0.1, -0.2, 0.3]);
        assert_eq!(cfg.time_steps, 5);
    }

    #[test]
    fn keys_parse_and_unknown_keys_name_themselves() {
        let cfg =
            RunConfig::parse_config("scheme=async\nmax_recv_requests=3\np=2\nn=4").unwrap();
        assert_eq!(cfg.scheme, Scheme::Async);
        assert_eq!(cfg.max_recv_requests, 3);
        let err = RunConfig::parse_config("bogus=1").unwrap_err();
        assert!(err.to_string().contains("bogus"));
        let err = RunConfig::parse_config("threshold=-1").unwrap_err();
        assert!(err.to_string().contains("threshold"));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse_config("# a comment\n\nseed=7\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn slowdown_lists_parse_and_validate() {
        let cfg = RunConfig::parse_config("slowdown=1, 10, 1.5\np=2\nn=4").unwrap();
        assert_eq!(cfg.slowdown, vec![1.0, 10.0, 1.5]);
        assert!(RunConfig::parse_config("slowdown=0.5").is_err());
    }
}
