//! Communicator schemes on a generic linear contraction map, checked against
//! a sequential oracle.
//!
//! Every rank holds one scalar and iterates x' = 0.3 x + 0.4 avg(halos) + b.
//! The map is a global contraction, so the synchronous schemes must
//! reproduce the sequential trajectory exactly and the asynchronous scheme
//! must terminate on a certified iterate.

use std::collections::BTreeMap;
use std::thread;

use itercomm_core::convergence::NormSpec;
use itercomm_core::kernel::{Communicator, KernelError, Scheme, Stats};
use itercomm_core::transport::sim::{DelayModel, SimNet};
use itercomm_core::transport::Rank;

const THRESHOLD: f64 = 1e-10;
const MAX_ITERS: u64 = 20_000;

fn contraction_step(x: f64, halos: &[f64], b: f64) -> (f64, f64) {
    let xn = if halos.is_empty() {
        0.3 * x + b
    } else {
        let avg = halos.iter().sum::<f64>() / halos.len() as f64;
        0.3 * x + 0.4 * avg + b
    };
    (xn, xn - x)
}

/// Sequential reference: synchronous Jacobi-style sweeps over all ranks,
/// stopping on the max norm of the update difference.
fn sequential_oracle(adj: &[Vec<Rank>], b: &[f64]) -> (Vec<f64>, u64) {
    let p = adj.len();
    let mut x = vec![0.0; p];
    let mut k = 0;
    loop {
        let mut xn = vec![0.0; p];
        let mut res: f64 = 0.0;
        for i in 0..p {
            let halos: Vec<f64> = adj[i].iter().map(|&j| x[j]).collect();
            let (v, r) = contraction_step(x[i], &halos, b[i]);
            xn[i] = v;
            res = res.max(r.abs());
        }
        x = xn;
        k += 1;
        if res < THRESHOLD {
            return (x, k);
        }
        assert!(k < MAX_ITERS, "oracle failed to converge");
    }
}

struct RankResult {
    sol: f64,
    iterations: u64,
    stats: Stats,
    ticks: u64,
}

fn run_distributed(
    adj: &[Vec<Rank>],
    b: &[f64],
    scheme: Scheme,
    max_recv_requests: usize,
    model: DelayModel,
) -> Vec<RankResult> {
    let p = adj.len();
    let net = SimNet::new(p, model);
    let mut handles = Vec::new();
    for rank in 0..p {
        let peers = adj[rank].clone();
        let bi = b[rank];
        let ep = net.open_endpoint(rank, &peers, &peers).unwrap();
        handles.push(thread::spawn(move || {
            let mut comm = Communicator::init_graph(Box::new(ep), &peers).unwrap();
            let sizes: BTreeMap<Rank, usize> = peers.iter().map(|&q| (q, 1)).collect();
            comm.init_buffers(&sizes, &sizes).unwrap();
            comm.init_residual(1, NormSpec::new(0.5, THRESHOLD).unwrap())
                .unwrap();
            comm.config_async(vec![0.0]).unwrap();
            match scheme {
                Scheme::Async => comm.switch_async(max_recv_requests).unwrap(),
                s => comm.set_sync_scheme(s).unwrap(),
            }
            comm.set_compute_cost(10);
            let update = move |ctx: &mut itercomm_core::kernel::StepCtx| {
                let halos: Vec<f64> = ctx.recv.values().map(|v| v[0]).collect();
                let (xn, r) = contraction_step(ctx.sol[0], &halos, bi);
                ctx.sol[0] = xn;
                ctx.res[0] = r;
                for v in ctx.send.values_mut() {
                    v[0] = xn;
                }
            };
            let iterations = comm.run_scheme(update, MAX_ITERS).unwrap();
            let ticks = comm.endpoint_now();
            let out = RankResult {
                sol: comm.solution()[0],
                iterations,
                stats: comm.stats().clone(),
                ticks,
            };
            comm.finish();
            out
        }));
    }
    handles.into_iter().map(|h| h.join().unwrap()).collect()
}

fn ring(p: usize) -> Vec<Vec<Rank>> {
    (0..p)
        .map(|i| {
            let mut v = vec![(i + p - 1) % p, (i + 1) % p];
            v.sort_unstable();
            v.dedup();
            v
        })
        .collect()
}

fn rhs(p: usize) -> Vec<f64> {
    (0..p).map(|i| 0.1 + 0.05 * i as f64).collect()
}

#[test]
fn sync_schemes_reproduce_the_sequential_trajectory_exactly() {
    for p in [2, 4, 7] {
        let adj = ring(p);
        let b = rhs(p);
        let (expect, expect_k) = sequential_oracle(&adj, &b);
        for scheme in [Scheme::TrivialSync, Scheme::OverlapSync] {
            let out = run_distributed(&adj, &b, scheme, 1, DelayModel::default());
            for (i, r) in out.iter().enumerate() {
                assert_eq!(r.sol, expect[i], "p={p} scheme={scheme:?} rank {i}");
                assert_eq!(r.iterations, expect_k, "p={p} scheme={scheme:?} rank {i}");
                assert_eq!(r.stats.payload_copies, 0);
            }
        }
    }
}

#[test]
fn sync_schemes_are_jitter_invariant() {
    let adj = ring(5);
    let b = rhs(5);
    let (expect, expect_k) = sequential_oracle(&adj, &b);
    let model = DelayModel {
        jitter_max: 4,
        seed: 99,
        slowdown: vec![1.0, 3.0, 1.0, 1.5, 1.0],
        ..DelayModel::default()
    };
    let out = run_distributed(&adj, &b, Scheme::OverlapSync, 1, model);
    for (i, r) in out.iter().enumerate() {
        assert_eq!(r.sol, expect[i], "rank {i}");
        assert_eq!(r.iterations, expect_k);
    }
}

/// Audit an async run: every rank must end on the same certified iterate
/// family, meaning one more application of the map keeps the update
/// difference below the threshold.
fn audit_async(adj: &[Vec<Rank>], b: &[f64], out: &[RankResult]) {
    let x: Vec<f64> = out.iter().map(|r| r.sol).collect();
    let mut res: f64 = 0.0;
    for i in 0..adj.len() {
        let halos: Vec<f64> = adj[i].iter().map(|&j| x[j]).collect();
        let (_, r) = contraction_step(x[i], &halos, b[i]);
        res = res.max(r.abs());
    }
    assert!(
        res < THRESHOLD,
        "returned iterate is not certified: residual {res:e}"
    );
}

#[test]
fn async_terminates_on_a_certified_iterate() {
    let adj = ring(4);
    let b = rhs(4);
    let out = run_distributed(&adj, &b, Scheme::Async, 2, DelayModel::default());
    audit_async(&adj, &b, &out);
    for r in &out {
        assert!(r.stats.snapshot_rounds >= 1);
        assert_eq!(
            r.stats.snapshot_rounds - r.stats.failed_rounds,
            1,
            "exactly one successful round"
        );
    }
}

#[test]
fn async_with_a_slow_rank_respects_request_budgets() {
    let adj = ring(6);
    let b = rhs(6);
    // Latency above the compute cost keeps channels busy long enough for
    // the discard path to fire.
    let model = DelayModel {
        base_latency: 40,
        jitter_max: 2,
        seed: 7,
        slowdown: vec![1.0, 1.0, 8.0, 1.0, 1.0, 1.0],
        ..DelayModel::default()
    };
    let max_reqs = 3;
    let out = run_distributed(&adj, &b, Scheme::Async, max_reqs, model);
    audit_async(&adj, &b, &out);
    let total_discarded: u64 = out.iter().map(|r| r.stats.sends_discarded).sum();
    assert!(
        total_discarded > 0,
        "a slow rank must force discarded sends somewhere"
    );
    for (i, r) in out.iter().enumerate() {
        assert!(r.stats.max_pending_sends <= 1, "rank {i}");
        assert!(r.stats.min_recv_requests >= 1, "rank {i}");
        assert!(r.stats.max_recv_requests_seen <= max_reqs, "rank {i}");
        assert_eq!(r.stats.payload_copies, 0);
    }
    // Iteration counts genuinely diverge across ranks in async mode.
    let counts: Vec<u64> = out.iter().map(|r| r.iterations).collect();
    assert!(counts.iter().any(|&c| c != counts[0]), "counts {counts:?}");
}

#[test]
fn async_runs_are_deterministic_per_seed() {
    let adj = ring(4);
    let b = rhs(4);
    let model = DelayModel {
        jitter_max: 3,
        seed: 21,
        slowdown: vec![1.0, 4.0, 1.0, 1.0],
        ..DelayModel::default()
    };
    let runs: Vec<Vec<RankResult>> = (0..3)
        .map(|_| run_distributed(&adj, &b, Scheme::Async, 2, model.clone()))
        .collect();
    for run in &runs[1..] {
        for (a, c) in runs[0].iter().zip(run) {
            assert_eq!(a.sol, c.sol);
            assert_eq!(a.iterations, c.iterations);
            assert_eq!(a.stats, c.stats);
            assert_eq!(a.ticks, c.ticks);
        }
    }
}

#[test]
fn immediate_stop_predicate_yields_zero_iterations() {
    for scheme in [Scheme::TrivialSync, Scheme::OverlapSync, Scheme::Async] {
        let adj = ring(3);
        let net = SimNet::new(3, DelayModel::default());
        let mut handles = Vec::new();
        for (rank, links) in adj.iter().enumerate() {
            let peers = links.clone();
            let ep = net.open_endpoint(rank, &peers, &peers).unwrap();
            handles.push(thread::spawn(move || {
                let mut comm = Communicator::init_graph(Box::new(ep), &peers).unwrap();
                let sizes: BTreeMap<Rank, usize> = peers.iter().map(|&q| (q, 1)).collect();
                comm.init_buffers(&sizes, &sizes).unwrap();
                comm.init_residual(1, NormSpec::new(0.5, THRESHOLD).unwrap())
                    .unwrap();
                comm.config_async(vec![0.0]).unwrap();
                match scheme {
                    Scheme::Async => comm.switch_async(2).unwrap(),
                    s => comm.set_sync_scheme(s).unwrap(),
                }
                let k = comm
                    .run_scheme_with_stop(|_| unreachable!("no iteration"), 10, |k, _| k == 0)
                    .unwrap();
                let stats = comm.stats().clone();
                comm.finish();
                (k, stats)
            }));
        }
        for h in handles {
            let (k, stats) = h.join().unwrap();
            assert_eq!(k, 0, "scheme {scheme:?}");
            assert_eq!(stats.msgs_received, 0);
            assert_eq!(stats.iterations, 0);
        }
    }
}

#[test]
fn consecutive_solves_reuse_the_channels_cleanly() {
    // Two async solves back to back on the same communicator: the end-of-
    // solve flush must leave no stale traffic for the second one.
    let adj = ring(4);
    let b = rhs(4);
    let model = DelayModel {
        jitter_max: 2,
        seed: 5,
        slowdown: vec![1.0, 5.0, 1.0, 1.0],
        ..DelayModel::default()
    };
    let net = SimNet::new(4, model);
    let mut handles = Vec::new();
    for rank in 0..4 {
        let peers = adj[rank].clone();
        let bi = b[rank];
        let ep = net.open_endpoint(rank, &peers, &peers).unwrap();
        handles.push(thread::spawn(move || {
            let mut comm = Communicator::init_graph(Box::new(ep), &peers).unwrap();
            let sizes: BTreeMap<Rank, usize> = peers.iter().map(|&q| (q, 1)).collect();
            comm.init_buffers(&sizes, &sizes).unwrap();
            comm.init_residual(1, NormSpec::new(0.5, THRESHOLD).unwrap())
                .unwrap();
            comm.config_async(vec![0.0]).unwrap();
            comm.switch_async(2).unwrap();
            comm.set_compute_cost(10);
            let mut sols = Vec::new();
            for step in 0..2 {
                // Shift the fixed point between solves.
                let offset = bi + step as f64 * 0.2;
                let update = move |ctx: &mut itercomm_core::kernel::StepCtx| {
                    let halos: Vec<f64> = ctx.recv.values().map(|v| v[0]).collect();
                    let (xn, r) = contraction_step(ctx.sol[0], &halos, offset);
                    ctx.sol[0] = xn;
                    ctx.res[0] = r;
                    for v in ctx.send.values_mut() {
                        v[0] = xn;
                    }
                };
                comm.run_scheme(update, MAX_ITERS).unwrap();
                sols.push(comm.solution()[0]);
                comm.reset_for_new_solve().unwrap();
            }
            comm.finish();
            sols
        }));
    }
    let sols: Vec<Vec<f64>> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    for step in 0..2 {
        let b_step: Vec<f64> = b.iter().map(|v| v + step as f64 * 0.2).collect();
        let x: Vec<f64> = sols.iter().map(|s| s[step]).collect();
        let mut res: f64 = 0.0;
        for i in 0..4 {
            let halos: Vec<f64> = adj[i].iter().map(|&j| x[j]).collect();
            let (_, r) = contraction_step(x[i], &halos, b_step[i]);
            res = res.max(r.abs());
        }
        assert!(res < THRESHOLD, "step {step} residual {res:e}");
    }
}

#[test]
fn async_drain_keeps_the_newest_of_three_queued_messages() {
    // Scripted trace: the peer posts three data messages back to back and
    // leaves; one recv call must drain the backlog (budget 2) and keep the
    // third payload.
    let net = SimNet::new(2, DelayModel::default());
    let ep0 = net.open_endpoint(0, &[1], &[1]).unwrap();
    let ep1 = net.open_endpoint(1, &[0], &[0]).unwrap();
    let sender = thread::spawn(move || {
        let mut c = Communicator::init_graph(Box::new(ep1), &[0]).unwrap();
        let sizes: BTreeMap<Rank, usize> = [(0, 1)].into();
        c.init_buffers(&sizes, &sizes).unwrap();
        c.init_residual(1, NormSpec::new(0.5, 1e-6).unwrap()).unwrap();
        // Three raw sends, oldest to newest.
        for v in [10.0, 20.0, 30.0] {
            c.send_buf_mut(0).unwrap()[0] = v;
            c.config_async(vec![0.0]).unwrap();
            // Post directly through the sync path so nothing is discarded.
            c.send().unwrap();
            c.wait_completion().unwrap();
        }
        c.finish();
    });
    let mut comm = Communicator::init_graph(Box::new(ep0), &[1]).unwrap();
    let sizes: BTreeMap<Rank, usize> = [(1, 1)].into();
    comm.init_buffers(&sizes, &sizes).unwrap();
    comm.init_residual(1, NormSpec::new(0.5, 1e-6).unwrap())
        .unwrap();
    comm.config_async(vec![0.0]).unwrap();
    comm.switch_async(2).unwrap();
    sender.join().unwrap();
    // Let virtual time pass so the whole backlog is deliverable.
    comm.advance_compute(1_000);
    comm.recv().unwrap();
    assert_eq!(comm.recv_buf(1), Some(&[30.0][..]));
    assert_eq!(comm.stats().msgs_received, 3);
    assert!(comm.stats().max_recv_requests_seen <= 2);
    assert_eq!(comm.stats().payload_copies, 0);
    comm.finish();
}

#[test]
fn mode_switch_usage_errors() {
    let net = SimNet::new(2, DelayModel::default());
    let ep0 = net.open_endpoint(0, &[1], &[1]).unwrap();
    let ep1 = net.open_endpoint(1, &[0], &[0]).unwrap();
    let t = thread::spawn(move || {
        let mut c = Communicator::init_graph(Box::new(ep1), &[0]).unwrap();
        let sizes: BTreeMap<Rank, usize> = [(0, 1)].into();
        c.init_buffers(&sizes, &sizes).unwrap();
        c.init_residual(1, NormSpec::new(0.5, 1e-6).unwrap()).unwrap();
        c.finish();
    });
    let mut comm = Communicator::init_graph(Box::new(ep0), &[1]).unwrap();
    let sizes: BTreeMap<Rank, usize> = [(1, 1)].into();
    comm.init_buffers(&sizes, &sizes).unwrap();
    comm.init_residual(1, NormSpec::new(0.5, 1e-6).unwrap())
        .unwrap();

    // Async before registering the solution block.
    assert!(matches!(comm.switch_async(2), Err(KernelError::Usage(_))));
    comm.config_async(vec![0.0]).unwrap();
    // A zero request budget is a usage error.
    assert!(matches!(comm.switch_async(0), Err(KernelError::Usage(_))));
    comm.switch_async(2).unwrap();
    // Switching again is idempotent.
    comm.switch_async(2).unwrap();
    assert_eq!(comm.scheme(), Scheme::Async);
    // Synchronous-only calls now fail.
    assert!(matches!(
        comm.wait_completion(),
        Err(KernelError::Usage(_))
    ));
    assert!(matches!(
        comm.set_sync_scheme(Scheme::TrivialSync),
        Err(KernelError::Usage(_))
    ));
    comm.finish();
    t.join().unwrap();
}
