//! The communicator front-end: one API for per-iteration data exchange in
//! synchronous (blocking) or asynchronous (non-blocking) mode.
//!
//! Exchange buffers are delivered by reference exchange (no payload element
//! is ever copied on reception), incoming channels keep a bounded pool of
//! posted reception requests in asynchronous mode, and sends to busy
//! channels are discarded rather than queued. Synchronous residual norms run
//! as a convergecast/broadcast over the spanning tree; asynchronous
//! termination runs the snapshot protocol from [`crate::convergence`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convergence::{local_accumulate, Action, Detector, NormAccumulator, NormSpec, RoundRecord};
use crate::topology::{build_spanning_tree, TopologyError, TreeInfo};
use crate::transport::{Body, Endpoint, Rank, Request, Tag, TransportError};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("unexpected {got:?} message from {src} while {context}")]
    Unexpected {
        src: Rank,
        got: Tag,
        context: &'static str,
    },
    #[error("no convergence within {0} iterations")]
    NoConvergence(u64),
}

/// Iteration scheme selected at runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    TrivialSync,
    OverlapSync,
    Async,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::TrivialSync => "trivial",
            Scheme::OverlapSync => "overlap",
            Scheme::Async => "async",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "trivial" => Ok(Scheme::TrivialSync),
            "overlap" => Ok(Scheme::OverlapSync),
            "async" => Ok(Scheme::Async),
            other => Err(format!(
                "unknown scheme '{other}' (expected trivial, overlap, or async)"
            )),
        }
    }
}

/// Instrumentation counters collected over a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub iterations: u64,
    /// Data messages delivered into recv_buf.
    pub msgs_received: u64,
    /// Async sends skipped because the previous request was still pending.
    pub sends_discarded: u64,
    /// Payload elements copied during reception delivery; stays 0 because
    /// delivery moves whole arrays.
    pub payload_copies: u64,
    /// Largest number of uncompleted data sends observed on one out-link.
    pub max_pending_sends: usize,
    /// Smallest / largest posted reception-request pool observed on one
    /// in-link while in async mode.
    pub min_recv_requests: usize,
    pub max_recv_requests_seen: usize,
    /// Detection rounds that reached a verdict / that failed.
    pub snapshot_rounds: u64,
    pub failed_rounds: u64,
    /// Stale protocol messages dropped by round guards.
    pub stale_discarded: u64,
}

/// Per-iteration view handed to the local update function. Reads halos from
/// `recv`, writes the new iterate into `sol`, the residual block into `res`,
/// and outgoing face data into `send`.
pub struct StepCtx<'a> {
    pub rank: Rank,
    pub recv: &'a BTreeMap<Rank, Vec<f64>>,
    pub send: &'a mut BTreeMap<Rank, Vec<f64>>,
    pub sol: &'a mut Vec<f64>,
    pub res: &'a mut Vec<f64>,
}

enum InitStage {
    Graph,
    Buffers,
    Ready,
}

/// One process's communicator. Single-threaded; owns its endpoint.
pub struct Communicator {
    ep: Box<dyn Endpoint>,
    rank: Rank,
    neighbors: Vec<Rank>,
    tree: TreeInfo,
    stage: InitStage,
    scheme: Scheme,
    max_recv_requests: usize,

    send_buf: BTreeMap<Rank, Vec<f64>>,
    /// End-of-solve markers that arrived before this rank started flushing.
    early_marker: BTreeMap<Rank, Option<u32>>,
    recv_buf: BTreeMap<Rank, Vec<f64>>,
    fresh: BTreeMap<Rank, bool>,
    standing: BTreeMap<Rank, Vec<Request>>,
    pending_sync_sends: Vec<Request>,
    async_send: BTreeMap<Rank, Option<Request>>,

    spec: NormSpec,
    res: Vec<f64>,
    res_norm: f64,
    norm_round: u32,
    epoch: u32,

    registered: bool,
    sol: Vec<f64>,
    lconv: bool,
    detector: Option<Detector>,
    ss_sol: Vec<f64>,
    eval_result: Option<(u32, Vec<f64>)>,

    compute_cost: u64,
    stats: Stats,
}

impl Communicator {
    /// Init stage 1: communication graph. Collective: builds the spanning
    /// tree with all other ranks.
    pub fn init_graph(
        mut ep: Box<dyn Endpoint>,
        neighbors: &[Rank],
    ) -> Result<Self, KernelError> {
        let mut sorted = neighbors.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != neighbors.len() || sorted.contains(&ep.rank()) {
            return Err(KernelError::Usage(
                "neighbor list must be duplicate-free and exclude the own rank".into(),
            ));
        }
        let tree = build_spanning_tree(ep.as_mut(), &sorted)?;
        let rank = ep.rank();
        Ok(Communicator {
            ep,
            rank,
            neighbors: sorted,
            tree,
            stage: InitStage::Graph,
            scheme: Scheme::OverlapSync,
            max_recv_requests: 2,
            send_buf: BTreeMap::new(),
            early_marker: BTreeMap::new(),
            recv_buf: BTreeMap::new(),
            fresh: BTreeMap::new(),
            standing: BTreeMap::new(),
            pending_sync_sends: Vec::new(),
            async_send: BTreeMap::new(),
            spec: NormSpec::new(0.5, 1e-6).expect("default norm spec"),
            res: Vec::new(),
            res_norm: f64::INFINITY,
            norm_round: 0,
            epoch: 0,
            registered: false,
            sol: Vec::new(),
            lconv: false,
            detector: None,
            ss_sol: Vec::new(),
            eval_result: None,
            compute_cost: 1,
            stats: Stats::default(),
        })
    }

    /// Init stage 2: fixed exchange-buffer sizes per link; posts the initial
    /// reception request on every in-link.
    pub fn init_buffers(
        &mut self,
        sbuf_sizes: &BTreeMap<Rank, usize>,
        rbuf_sizes: &BTreeMap<Rank, usize>,
    ) -> Result<(), KernelError> {
        if !matches!(self.stage, InitStage::Graph) {
            return Err(KernelError::Usage("buffers already initialized".into()));
        }
        for &nb in &self.neighbors {
            let s = *sbuf_sizes
                .get(&nb)
                .ok_or_else(|| KernelError::Usage(format!("missing send size for link {nb}")))?;
            let r = *rbuf_sizes
                .get(&nb)
                .ok_or_else(|| KernelError::Usage(format!("missing recv size for link {nb}")))?;
            self.ep.declare_send_len(nb, s)?;
            self.ep.declare_recv_len(nb, r)?;
            self.send_buf.insert(nb, vec![0.0; s]);
            self.recv_buf.insert(nb, vec![0.0; r]);
            self.fresh.insert(nb, false);
            self.early_marker.insert(nb, None);
            self.async_send.insert(nb, None);
            let req = self.ep.post_recv(nb)?;
            self.standing.insert(nb, vec![req]);
        }
        self.stage = InitStage::Buffers;
        Ok(())
    }

    /// Init stage 3: residual block size and norm configuration.
    pub fn init_residual(&mut self, res_len: usize, spec: NormSpec) -> Result<(), KernelError> {
        if !matches!(self.stage, InitStage::Buffers) {
            return Err(KernelError::Usage(
                "residual initialization requires buffer initialization first".into(),
            ));
        }
        self.spec = spec;
        self.res = vec![0.0; res_len];
        self.stage = InitStage::Ready;
        Ok(())
    }

    /// Register the local solution block (required before switching to the
    /// asynchronous mode; harmless in synchronous runs).
    pub fn config_async(&mut self, sol: Vec<f64>) -> Result<(), KernelError> {
        self.ensure_ready()?;
        self.sol = sol;
        self.registered = true;
        Ok(())
    }

    /// Switch to asynchronous iterations with the given per-link reception
    /// request budget. Idempotent.
    pub fn switch_async(&mut self, max_recv_requests: usize) -> Result<(), KernelError> {
        self.ensure_ready()?;
        if !self.registered {
            return Err(KernelError::Usage(
                "switch to async requires solution registration first".into(),
            ));
        }
        if max_recv_requests == 0 {
            return Err(KernelError::Usage(
                "at least one reception request per link is required".into(),
            ));
        }
        self.max_recv_requests = max_recv_requests;
        if self.scheme != Scheme::Async {
            self.scheme = Scheme::Async;
            self.detector = Some(Detector::new(
                self.tree.parent,
                self.tree.children.clone(),
                self.neighbors.clone(),
                self.spec,
            ));
        }
        self.replenish_all()?;
        Ok(())
    }

    /// Select a synchronous scheme (the default is overlapping).
    pub fn set_sync_scheme(&mut self, scheme: Scheme) -> Result<(), KernelError> {
        if scheme == Scheme::Async {
            return Err(KernelError::Usage("use switch_async for async mode".into()));
        }
        if self.scheme == Scheme::Async {
            return Err(KernelError::Usage(
                "cannot leave async mode once switched".into(),
            ));
        }
        self.scheme = scheme;
        Ok(())
    }

    fn ensure_ready(&self) -> Result<(), KernelError> {
        if !matches!(self.stage, InitStage::Ready) {
            return Err(KernelError::Usage("communicator not fully initialized".into()));
        }
        Ok(())
    }

    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn tree(&self) -> &TreeInfo {
        &self.tree
    }

    pub fn stats(&self) -> &Stats {
        &self.stats
    }

    pub fn res_norm(&self) -> f64 {
        self.res_norm
    }

    pub fn solution(&self) -> &[f64] {
        &self.sol
    }

    pub fn recv_buf(&self, peer: Rank) -> Option<&[f64]> {
        self.recv_buf.get(&peer).map(|v| v.as_slice())
    }

    pub fn send_buf_mut(&mut self, peer: Rank) -> Option<&mut Vec<f64>> {
        self.send_buf.get_mut(&peer)
    }

    pub fn residual_mut(&mut self) -> &mut Vec<f64> {
        &mut self.res
    }

    pub fn set_local_convergence(&mut self, armed: bool) {
        self.lconv = armed;
    }

    pub fn is_terminated(&self) -> bool {
        self.detector.as_ref().is_some_and(|d| d.is_terminated())
    }

    /// Ticks charged per local update call (scaled by per-rank slowdowns on
    /// the simulated backend).
    pub fn set_compute_cost(&mut self, cost: u64) {
        self.compute_cost = cost;
    }

    pub fn detection_records(&self) -> &[RoundRecord] {
        self.detector.as_ref().map(|d| d.records()).unwrap_or(&[])
    }

    /// Residual norm certified by the detected snapshot round, where known.
    pub fn detected_value(&self) -> Option<f64> {
        self.detector.as_ref().and_then(|d| d.detected_value())
    }

    pub fn endpoint_now(&self) -> u64 {
        self.ep.now()
    }

    /// Charge local work outside of run_scheme (used by drivers and tests).
    pub fn advance_compute(&mut self, cost: u64) {
        self.ep.advance_compute(cost);
    }

    pub fn finish(&mut self) {
        self.ep.finish();
    }

    // ------------------------------------------------------------------
    // Core per-iteration operations
    // ------------------------------------------------------------------

    /// Synchronous: block until one fresh message per in-neighbor arrived and
    /// deliver each by moving the payload into recv_buf. Asynchronous: drain
    /// everything already delivered (newest data wins) and replenish the
    /// request pools; never blocks past the conservative settle point.
    pub fn recv(&mut self) -> Result<(), KernelError> {
        self.ensure_ready()?;
        match self.scheme {
            Scheme::TrivialSync | Scheme::OverlapSync => self.recv_sync(),
            Scheme::Async => self.recv_async(),
        }
    }

    fn recv_sync(&mut self) -> Result<(), KernelError> {
        let links: Vec<Rank> = self.neighbors.clone();
        for peer in links {
            if std::mem::take(self.fresh.get_mut(&peer).unwrap()) {
                continue; // delivered early during the previous norm exchange
            }
            let req = self.pop_standing(peer);
            self.ep.wait_all(&[req])?;
            let body = self.ep.take_payload(req)?;
            match body {
                Body::Data(values) => self.deliver(peer, values),
                other => {
                    return Err(KernelError::Unexpected {
                        src: peer,
                        got: other.tag(),
                        context: "waiting for iteration data",
                    })
                }
            }
            self.repost(peer)?;
        }
        Ok(())
    }

    fn recv_async(&mut self) -> Result<(), KernelError> {
        self.ep.settle()?;
        let links: Vec<Rank> = self.neighbors.clone();
        for peer in links {
            let mut newest: Option<Vec<f64>> = None;
            while let Some(&req) = self.standing.get(&peer).unwrap().first() {
                if !self.ep.test(req)? {
                    break;
                }
                self.standing.get_mut(&peer).unwrap().remove(0);
                let body = self.ep.take_payload(req)?;
                // Reactivate right away so a backlog drains in one call while
                // the posted pool never exceeds the budget.
                self.repost(peer)?;
                match body {
                    Body::Data(values) => {
                        newest = Some(values);
                        self.stats.msgs_received += 1;
                    }
                    other => self.dispatch_protocol(peer, other)?,
                }
            }
            if let Some(values) = newest {
                self.recv_buf.insert(peer, values);
            }
            self.replenish(peer)?;
            let pool = self.standing.get(&peer).unwrap().len();
            if self.stats.min_recv_requests == 0 && self.stats.max_recv_requests_seen == 0 {
                self.stats.min_recv_requests = pool;
            }
            self.stats.min_recv_requests = self.stats.min_recv_requests.min(pool);
            self.stats.max_recv_requests_seen = self.stats.max_recv_requests_seen.max(pool);
        }
        self.flush_actions()?;
        Ok(())
    }

    /// Synchronous: post one data send per out-link, awaited later by
    /// wait_completion. Asynchronous: post only on idle channels; busy ones
    /// discard this iteration's send.
    pub fn send(&mut self) -> Result<(), KernelError> {
        self.ensure_ready()?;
        let links: Vec<Rank> = self.neighbors.clone();
        match self.scheme {
            Scheme::TrivialSync | Scheme::OverlapSync => {
                for peer in links {
                    let payload = self.send_buf.get(&peer).unwrap().clone();
                    let req = self.ep.post_send(peer, Body::Data(payload))?;
                    self.pending_sync_sends.push(req);
                    self.stats.max_pending_sends = self.stats.max_pending_sends.max(1);
                }
            }
            Scheme::Async => {
                for peer in links {
                    let busy = match self.async_send.get(&peer).unwrap() {
                        Some(req) => !self.ep.test(*req)?,
                        None => false,
                    };
                    if busy {
                        self.stats.sends_discarded += 1;
                        self.stats.max_pending_sends = self.stats.max_pending_sends.max(1);
                        continue;
                    }
                    let payload = self.send_buf.get(&peer).unwrap().clone();
                    let req = self.ep.post_send(peer, Body::Data(payload))?;
                    self.async_send.insert(peer, Some(req));
                    self.stats.max_pending_sends = self.stats.max_pending_sends.max(1);
                }
            }
        }
        Ok(())
    }

    /// Synchronous modes only: wait for this iteration's send requests.
    pub fn wait_completion(&mut self) -> Result<(), KernelError> {
        self.ensure_ready()?;
        if self.scheme == Scheme::Async {
            return Err(KernelError::Usage(
                "wait_completion is not part of the asynchronous scheme".into(),
            ));
        }
        let reqs = std::mem::take(&mut self.pending_sync_sends);
        self.ep.wait_all(&reqs)?;
        Ok(())
    }

    /// Synchronous: tree-reduce the residual norm; every rank returns the
    /// identical global value. Asynchronous: feed the local-convergence flag
    /// into the detection protocol and return the local norm.
    pub fn update_residual(&mut self) -> Result<f64, KernelError> {
        self.ensure_ready()?;
        match self.scheme {
            Scheme::TrivialSync | Scheme::OverlapSync => self.update_residual_sync(),
            Scheme::Async => {
                let local = local_accumulate(&self.res, &self.spec).finalize(&self.spec);
                let armed = self.lconv;
                self.detector
                    .as_mut()
                    .expect("async mode implies a detector")
                    .set_armed(armed);
                self.flush_actions()?;
                self.res_norm = local;
                Ok(local)
            }
        }
    }

    fn update_residual_sync(&mut self) -> Result<f64, KernelError> {
        let mut acc = local_accumulate(&self.res, &self.spec);
        let round = self.norm_round;
        for child in self.tree.children.clone() {
            let contribution = self.pump_norm_up(child, round)?;
            acc = acc.combine(contribution);
        }
        let value = match self.tree.parent {
            None => acc.finalize(&self.spec),
            Some(parent) => {
                self.ep.post_send(
                    parent,
                    Body::NormUp {
                        round,
                        acc: acc.to_wire(),
                    },
                )?;
                self.pump_norm_down(parent, round)?
            }
        };
        for child in self.tree.children.clone() {
            self.ep.post_send(
                child,
                Body::NormDown {
                    round,
                    value,
                    detected: false,
                },
            )?;
        }
        self.norm_round += 1;
        self.res_norm = value;
        Ok(value)
    }

    /// Wait on `peer`'s channel until its norm partial for `round` arrives;
    /// iteration data overtaking it is delivered early and flagged fresh.
    fn pump_norm_up(&mut self, peer: Rank, round: u32) -> Result<NormAccumulator, KernelError> {
        match self.pump_tree_message(peer)? {
            Body::NormUp { round: r, acc } if r == round => {
                Ok(NormAccumulator::from_wire(acc))
            }
            other => Err(KernelError::Unexpected {
                src: peer,
                got: other.tag(),
                context: "collecting norm partials",
            }),
        }
    }

    fn pump_norm_down(&mut self, peer: Rank, round: u32) -> Result<f64, KernelError> {
        match self.pump_tree_message(peer)? {
            Body::NormDown { round: r, value, .. } if r == round => Ok(value),
            other => Err(KernelError::Unexpected {
                src: peer,
                got: other.tag(),
                context: "awaiting the reduced norm",
            }),
        }
    }

    /// Next non-data message from `peer`, delivering any data message that
    /// arrives first (FIFO) into recv_buf with the fresh flag set.
    fn pump_tree_message(&mut self, peer: Rank) -> Result<Body, KernelError> {
        loop {
            let req = self.pop_standing(peer);
            self.ep.wait_all(&[req])?;
            let body = self.ep.take_payload(req)?;
            self.repost(peer)?;
            match body {
                Body::Data(values) => {
                    if std::mem::replace(self.fresh.get_mut(&peer).unwrap(), true) {
                        return Err(KernelError::Unexpected {
                            src: peer,
                            got: Tag::Data,
                            context: "two data messages within one norm exchange",
                        });
                    }
                    self.deliver(peer, values);
                }
                other => return Ok(other),
            }
        }
    }

    // ------------------------------------------------------------------
    // Helpers
    // ------------------------------------------------------------------

    /// Move a received payload into the user buffer. No element copies.
    fn deliver(&mut self, peer: Rank, values: Vec<f64>) {
        self.recv_buf.insert(peer, values);
        self.stats.msgs_received += 1;
    }

    fn pop_standing(&mut self, peer: Rank) -> Request {
        self.standing
            .get_mut(&peer)
            .unwrap()
            .drain(..1)
            .next()
            .expect("one standing reception request per link")
    }

    fn repost(&mut self, peer: Rank) -> Result<(), KernelError> {
        let req = self.ep.post_recv(peer)?;
        self.standing.get_mut(&peer).unwrap().push(req);
        Ok(())
    }

    fn replenish(&mut self, peer: Rank) -> Result<(), KernelError> {
        while self.standing.get(&peer).unwrap().len() < self.max_recv_requests {
            self.repost(peer)?;
        }
        Ok(())
    }

    fn replenish_all(&mut self) -> Result<(), KernelError> {
        for peer in self.neighbors.clone() {
            self.replenish(peer)?;
        }
        Ok(())
    }

    fn dispatch_protocol(&mut self, src: Rank, body: Body) -> Result<(), KernelError> {
        let det = match self.detector.as_mut() {
            Some(d) => d,
            None => {
                return Err(KernelError::Unexpected {
                    src,
                    got: body.tag(),
                    context: "protocol message outside async mode",
                })
            }
        };
        match body {
            Body::SnapshotData { round, values } => det.on_snapshot_data(src, round, values),
            Body::LocalConv { round } => det.on_local_conv(src, round),
            Body::NormUp { round, acc } => det.on_norm_up(src, round, acc),
            Body::NormDown {
                round,
                value,
                detected,
            } => det.on_norm_down(round, value, detected),
            Body::Terminate { round } => det.on_terminate(round),
            Body::Data(_) => unreachable!("data handled by the caller"),
            Body::Control(bytes) => {
                // A neighbor finished its solve before this rank did; keep
                // its end-of-solve marker for the upcoming flush.
                if bytes.len() == 4 {
                    let value = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
                    self.early_marker.insert(src, Some(value));
                }
            }
        }
        Ok(())
    }

    /// Execute protocol sends requested by the detector.
    fn flush_actions(&mut self) -> Result<(), KernelError> {
        let det = match self.detector.as_mut() {
            Some(d) => d,
            None => return Ok(()),
        };
        let actions = det.take_actions();
        for action in actions {
            match action {
                Action::NotifyParent { round } => {
                    let parent = self.tree.parent.expect("non-root notifies");
                    self.ep.post_send(parent, Body::LocalConv { round })?;
                }
                Action::FreezeAndSendSnapshots { round } => {
                    self.ss_sol = self.sol.clone();
                    for peer in self.neighbors.clone() {
                        let frozen = self.send_buf.get(&peer).unwrap().clone();
                        self.detector
                            .as_mut()
                            .unwrap()
                            .record_frozen_send(peer, frozen.clone());
                        self.ep.post_send(
                            peer,
                            Body::SnapshotData {
                                round,
                                values: frozen,
                            },
                        )?;
                    }
                }
                Action::SendNormUp { round, acc } => {
                    let parent = self.tree.parent.expect("non-root pushes norms up");
                    self.ep.post_send(parent, Body::NormUp { round, acc })?;
                }
                Action::BroadcastTerminate { round } => {
                    self.stats.snapshot_rounds += 1;
                    for &child in &self.tree.children {
                        self.ep.post_send(child, Body::Terminate { round })?;
                    }
                }
                Action::BroadcastResume { round, value } => {
                    self.stats.failed_rounds += 1;
                    self.stats.snapshot_rounds += 1;
                    for &child in &self.tree.children {
                        self.ep.post_send(
                            child,
                            Body::NormDown {
                                round,
                                value,
                                detected: false,
                            },
                        )?;
                    }
                }
            }
        }
        self.stats.stale_discarded = self
            .detector
            .as_ref()
            .map(|d| d.stale_discarded())
            .unwrap_or(0);
        Ok(())
    }

    // ------------------------------------------------------------------
    // Scheme drivers
    // ------------------------------------------------------------------

    /// Run the selected iteration scheme until convergence (or detection) or
    /// the iteration cap. Returns the local iteration count.
    pub fn run_scheme<F>(&mut self, update: F, max_iterations: u64) -> Result<u64, KernelError>
    where
        F: FnMut(&mut StepCtx),
    {
        self.run_scheme_with_stop(update, max_iterations, |_, _| false)
    }

    /// Like [`run_scheme`], with an extra stop predicate evaluated before
    /// each iteration on (iteration count, last norm).
    pub fn run_scheme_with_stop<F, S>(
        &mut self,
        mut update: F,
        max_iterations: u64,
        mut stop: S,
    ) -> Result<u64, KernelError>
    where
        F: FnMut(&mut StepCtx),
        S: FnMut(u64, f64) -> bool,
    {
        self.ensure_ready()?;
        match self.scheme {
            Scheme::TrivialSync => self.run_trivial(&mut update, max_iterations, &mut stop),
            Scheme::OverlapSync => self.run_overlap(&mut update, max_iterations, &mut stop),
            Scheme::Async => self.run_async(&mut update, max_iterations, &mut stop),
        }
    }

    fn compute_live<F: FnMut(&mut StepCtx)>(&mut self, update: &mut F) {
        let mut ctx = StepCtx {
            rank: self.rank,
            recv: &self.recv_buf,
            send: &mut self.send_buf,
            sol: &mut self.sol,
            res: &mut self.res,
        };
        update(&mut ctx);
        self.ep.advance_compute(self.compute_cost);
        self.stats.iterations += 1;
    }

    fn run_trivial<F, S>(
        &mut self,
        update: &mut F,
        max_iterations: u64,
        stop: &mut S,
    ) -> Result<u64, KernelError>
    where
        F: FnMut(&mut StepCtx),
        S: FnMut(u64, f64) -> bool,
    {
        let mut k = 0;
        loop {
            if stop(k, self.res_norm) {
                return Ok(k);
            }
            if k >= max_iterations {
                return Err(KernelError::NoConvergence(max_iterations));
            }
            self.compute_live(update);
            self.send()?;
            self.recv()?;
            self.wait_completion()?;
            let norm = self.update_residual()?;
            k += 1;
            if norm < self.spec.threshold {
                return Ok(k);
            }
        }
    }

    fn run_overlap<F, S>(
        &mut self,
        update: &mut F,
        max_iterations: u64,
        stop: &mut S,
    ) -> Result<u64, KernelError>
    where
        F: FnMut(&mut StepCtx),
        S: FnMut(u64, f64) -> bool,
    {
        if stop(0, self.res_norm) {
            return Ok(0);
        }
        // Prime the exchange with the initial iterate's faces.
        self.send()?;
        let mut k = 0;
        let converged = loop {
            if k >= max_iterations {
                self.drain_one_data_round()?;
                return Err(KernelError::NoConvergence(max_iterations));
            }
            self.recv()?;
            self.compute_live(update);
            self.send()?;
            self.wait_completion()?;
            let norm = self.update_residual()?;
            k += 1;
            if norm < self.spec.threshold {
                break true;
            }
            if stop(k, norm) {
                break false;
            }
        };
        // One data message per channel is still in flight; consume it so the
        // channels are clean for the next solve.
        self.drain_one_data_round()?;
        let _ = converged;
        Ok(k)
    }

    fn drain_one_data_round(&mut self) -> Result<(), KernelError> {
        self.recv()?;
        self.wait_completion()?;
        Ok(())
    }

    fn run_async<F, S>(
        &mut self,
        update: &mut F,
        max_iterations: u64,
        stop: &mut S,
    ) -> Result<u64, KernelError>
    where
        F: FnMut(&mut StepCtx),
        S: FnMut(u64, f64) -> bool,
    {
        if !self.registered {
            return Err(KernelError::Usage(
                "async scheme requires solution registration".into(),
            ));
        }
        if stop(0, self.res_norm) {
            return Ok(0);
        }
        self.send()?;
        let mut k = 0;
        loop {
            self.recv()?;
            if self.is_terminated() {
                break;
            }
            if k >= max_iterations {
                return Err(KernelError::NoConvergence(max_iterations));
            }
            let eval_round = self
                .detector
                .as_ref()
                .filter(|d| d.eval_pending())
                .map(|d| d.round());
            match eval_round {
                Some(round) => {
                    self.compute_frozen(update, round)?;
                }
                None => self.compute_live(update),
            }
            self.send()?;
            let local = local_accumulate(&self.res, &self.spec).finalize(&self.spec);
            self.lconv = local < self.spec.threshold;
            self.update_residual()?;
            k += 1;
            if self.is_terminated() {
                break;
            }
            if stop(k, local) {
                break;
            }
        }
        // Adopt the verified snapshot iterate as the final solution: the
        // detected round certifies exactly that vector.
        if self.is_terminated() {
            if let Some((round, sol)) = self.eval_result.take() {
                let det_round = self.detector.as_ref().unwrap().round();
                if round == det_round {
                    self.sol = sol;
                }
            }
        }
        self.flush_step_end()?;
        Ok(k)
    }

    /// The one extra application of the local update to the frozen global
    /// vector: halos come from the recorded snapshot payloads and the input
    /// iterate is the frozen local block. The output becomes the next live
    /// iterate (and the candidate final solution of the round).
    fn compute_frozen<F: FnMut(&mut StepCtx)>(
        &mut self,
        update: &mut F,
        round: u32,
    ) -> Result<(), KernelError> {
        let det = self.detector.as_ref().unwrap();
        let mut frozen_recv = BTreeMap::new();
        for &peer in &self.neighbors {
            let payload = det
                .ss_recv(peer)
                .expect("complete snapshot before evaluation");
            frozen_recv.insert(peer, payload.to_vec());
        }
        let mut sol = self.ss_sol.clone();
        let mut ctx = StepCtx {
            rank: self.rank,
            recv: &frozen_recv,
            send: &mut self.send_buf,
            sol: &mut sol,
            res: &mut self.res,
        };
        update(&mut ctx);
        self.ep.advance_compute(self.compute_cost);
        self.stats.iterations += 1;
        self.eval_result = Some((round, sol.clone()));
        self.sol = sol;
        let local = local_accumulate(&self.res, &self.spec);
        self.detector.as_mut().unwrap().submit_eval(local);
        self.flush_actions()?;
        Ok(())
    }

    /// End-of-solve barrier for the asynchronous mode: send a marker on every
    /// out-link and drain every in-link up to the matching marker, so no
    /// stale data leaks into the next solve.
    fn flush_step_end(&mut self) -> Result<(), KernelError> {
        let marker = self.epoch;
        for peer in self.neighbors.clone() {
            self.ep
                .post_send(peer, Body::Control(marker.to_le_bytes().to_vec()))?;
        }
        for peer in self.neighbors.clone() {
            if self.early_marker.get(&peer).copied().flatten() == Some(marker) {
                self.early_marker.insert(peer, None);
                continue;
            }
            loop {
                let req = self.pop_standing(peer);
                self.ep.wait_all(&[req])?;
                let body = self.ep.take_payload(req)?;
                self.repost(peer)?;
                match body {
                    Body::Control(bytes)
                        if bytes.len() == 4
                            && u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
                                == marker =>
                    {
                        break
                    }
                    Body::Data(values) => self.deliver(peer, values),
                    other => self.dispatch_protocol(peer, other)?,
                }
            }
        }
        self.epoch += 1;
        self.flush_actions()?;
        Ok(())
    }

    /// Prepare for the next solve (next time step) without tearing down the
    /// channels.
    pub fn reset_for_new_solve(&mut self) -> Result<(), KernelError> {
        self.ensure_ready()?;
        self.res_norm = f64::INFINITY;
        self.lconv = false;
        self.eval_result = None;
        if let Some(det) = self.detector.as_mut() {
            det.reset_for_new_solve();
        }
        Ok(())
    }
}
