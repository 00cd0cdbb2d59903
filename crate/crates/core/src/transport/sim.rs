//! Deterministic discrete-delay simulated transport.
//!
//! Every logical process owns a virtual clock (integer ticks). A message
//! posted at sender time `t` on a channel with latency `L` and jitter `j`
//! becomes deliverable at `max(previous stamp, t + L + j)`; the max keeps
//! per-channel delivery FIFO even under jitter. Receive-side operations are
//! conservative: an endpoint only concludes "nothing more can arrive by my
//! local time" once every in-neighbor's clock has passed the point where it
//! could still produce such a message. This makes whole runs reproducible
//! for a given seed no matter how the OS schedules the threads.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Body, Endpoint, Rank, ReqKind, Request, TransportError};

/// Per-run delivery-delay configuration. Deterministic given the seed.
#[derive(Debug, Clone)]
pub struct DelayModel {
    /// Base latency in ticks, applied to every link. Must be >= 1.
    pub base_latency: u64,
    /// Uniform jitter in `0..=jitter_max` ticks, drawn per message from a
    /// per-channel stream seeded by `seed`.
    pub jitter_max: u64,
    pub seed: u64,
    /// Per-rank compute-slowdown factors; missing entries default to 1.0.
    pub slowdown: Vec<f64>,
    /// Per-link latency overrides, keyed by (src, dst).
    pub latency_overrides: HashMap<(Rank, Rank), u64>,
    /// Unmatched-message queue capacity per channel.
    pub channel_capacity: usize,
}

impl Default for DelayModel {
    fn default() -> Self {
        DelayModel {
            base_latency: 5,
            jitter_max: 2,
            seed: 0,
            slowdown: Vec::new(),
            latency_overrides: HashMap::new(),
            channel_capacity: 64,
        }
    }
}

impl DelayModel {
    fn latency(&self, src: Rank, dst: Rank) -> u64 {
        *self
            .latency_overrides
            .get(&(src, dst))
            .unwrap_or(&self.base_latency)
    }

    fn slowdown_of(&self, rank: Rank) -> f64 {
        self.slowdown.get(rank).copied().unwrap_or(1.0)
    }
}

const FINISHED: u64 = u64::MAX;

#[derive(Debug)]
struct Msg {
    deliver_at: u64,
    body: Body,
}

struct Channel {
    latency: u64,
    jitter: ChaCha8Rng,
    jitter_max: u64,
    queue: VecDeque<Msg>,
    /// deliver_at of the most recently posted message; later posts never
    /// deliver earlier than this.
    last_stamp: u64,
    /// Receive requests posted by the destination, in post order.
    pending_recvs: VecDeque<u64>,
    declared_send_len: Option<usize>,
    declared_recv_len: Option<usize>,
    capacity: usize,
    // instrumentation
    posted: u64,
    delivered: u64,
    outstanding_send_stamps: Vec<u64>,
    max_concurrent_sends: usize,
}

impl Channel {
    fn new(model: &DelayModel, src: Rank, dst: Rank) -> Self {
        let stream = model
            .seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(((src as u64) << 24) ^ (dst as u64).wrapping_mul(0x100000001b3));
        Channel {
            latency: model.latency(src, dst),
            jitter: ChaCha8Rng::seed_from_u64(stream),
            jitter_max: model.jitter_max,
            queue: VecDeque::new(),
            last_stamp: 0,
            pending_recvs: VecDeque::new(),
            declared_send_len: None,
            declared_recv_len: None,
            capacity: model.channel_capacity,
            posted: 0,
            delivered: 0,
            outstanding_send_stamps: Vec::new(),
            max_concurrent_sends: 0,
        }
    }

    /// Lower bound on the deliver_at of any message not yet posted.
    fn future_bound(&self, sender_clock: u64) -> u64 {
        if sender_clock == FINISHED {
            return FINISHED;
        }
        self.last_stamp.max(sender_clock.saturating_add(self.latency))
    }
}

#[derive(Debug)]
enum ReqState {
    SendPending { deliver_at: u64 },
    RecvPending { peer: Rank },
    RecvDone { body: Body },
    Taken,
}

#[derive(Debug, Clone)]
enum WaitKind {
    /// Hard wait on messages from the given source ranks.
    Hard(Vec<Rank>),
    /// Conservative closure wait over all in-channels.
    Settle,
}

#[derive(Debug, Clone)]
enum Status {
    Running,
    Blocked(WaitKind),
    Finished,
}

struct NetState {
    p: usize,
    model: DelayModel,
    clocks: Vec<u64>,
    status: Vec<Status>,
    forced: Vec<bool>,
    opened: Vec<bool>,
    channels: HashMap<(Rank, Rank), Channel>,
    reqs: Vec<HashMap<u64, ReqState>>,
    next_req_id: u64,
    poisoned: bool,
    /// (deliver_at, src, dst, tag byte) per posted envelope.
    event_log: Vec<(u64, Rank, Rank, u8)>,
}

struct Net {
    state: Mutex<NetState>,
    cv: Condvar,
}

/// Shared simulated network; clone handles are cheap.
#[derive(Clone)]
pub struct SimNet {
    net: Arc<Net>,
}

impl SimNet {
    pub fn new(p: usize, model: DelayModel) -> Self {
        assert!(model.base_latency >= 1, "base latency must be >= 1 tick");
        assert!(
            model.latency_overrides.values().all(|&l| l >= 1),
            "link latencies must be >= 1 tick"
        );
        SimNet {
            net: Arc::new(Net {
                state: Mutex::new(NetState {
                    p,
                    model,
                    clocks: vec![0; p],
                    status: vec![Status::Running; p],
                    forced: vec![false; p],
                    opened: vec![false; p],
                    channels: HashMap::new(),
                    reqs: (0..p).map(|_| HashMap::new()).collect(),
                    next_req_id: 0,
                    poisoned: false,
                    event_log: Vec::new(),
                }),
                cv: Condvar::new(),
            }),
        }
    }

    pub fn processes(&self) -> usize {
        self.net.state.lock().unwrap().p
    }

    /// Open the endpoint for `rank` with the given directed neighbor lists.
    pub fn open_endpoint(
        &self,
        rank: Rank,
        out_peers: &[Rank],
        in_peers: &[Rank],
    ) -> Result<SimEndpoint, TransportError> {
        let mut s = self.net.state.lock().unwrap();
        let p = s.p;
        if rank >= p {
            return Err(TransportError::UnknownNeighbor(rank, p));
        }
        if s.opened[rank] {
            return Err(TransportError::DuplicateOpen(rank));
        }
        for &peer in out_peers.iter().chain(in_peers) {
            if peer >= p || peer == rank {
                return Err(TransportError::UnknownNeighbor(peer, p));
            }
        }
        s.opened[rank] = true;
        for &peer in out_peers {
            ensure_channel(&mut s, rank, peer);
        }
        for &peer in in_peers {
            ensure_channel(&mut s, peer, rank);
        }
        Ok(SimEndpoint {
            net: self.net.clone(),
            rank,
            out_peers: out_peers.to_vec(),
            in_peers: in_peers.to_vec(),
            finished: false,
        })
    }

    /// Posted-envelope log sorted canonically by (deliver_at, src, dst);
    /// identical across runs with the same config and seed.
    pub fn event_log(&self) -> Vec<(u64, Rank, Rank, u8)> {
        let s = self.net.state.lock().unwrap();
        let mut log = s.event_log.clone();
        log.sort_unstable();
        log
    }

    /// (posted, delivered, still queued) totals over all channels.
    pub fn conservation_totals(&self) -> (u64, u64, u64) {
        let s = self.net.state.lock().unwrap();
        let mut posted = 0;
        let mut delivered = 0;
        let mut queued = 0;
        for ch in s.channels.values() {
            posted += ch.posted;
            delivered += ch.delivered;
            queued += ch.queue.len() as u64;
        }
        (posted, delivered, queued)
    }

    /// Largest number of simultaneously uncompleted send requests observed on
    /// any channel (criterion instrumentation for the send-discard contract).
    pub fn max_concurrent_sends(&self) -> usize {
        let s = self.net.state.lock().unwrap();
        s.channels
            .values()
            .map(|c| c.max_concurrent_sends)
            .max()
            .unwrap_or(0)
    }
}

fn ensure_channel(s: &mut NetState, src: Rank, dst: Rank) {
    if !s.channels.contains_key(&(src, dst)) {
        let ch = Channel::new(&s.model, src, dst);
        s.channels.insert((src, dst), ch);
    }
}

/// Match queued messages deliverable at the destination's current clock to
/// pending receive requests, FIFO on both sides.
fn match_channel(s: &mut NetState, src: Rank, dst: Rank) -> Result<(), TransportError> {
    let clock = s.clocks[dst];
    loop {
        let ch = match s.channels.get_mut(&(src, dst)) {
            Some(ch) => ch,
            None => return Ok(()),
        };
        let deliverable = matches!(ch.queue.front(), Some(m) if m.deliver_at <= clock);
        if !deliverable || ch.pending_recvs.is_empty() {
            return Ok(());
        }
        let msg = ch.queue.pop_front().unwrap();
        let req_id = ch.pending_recvs.pop_front().unwrap();
        ch.delivered += 1;
        if let Some(expected) = ch.declared_recv_len {
            if let Some(got) = msg.body.data_len() {
                if got != expected {
                    return Err(TransportError::SizeMismatch {
                        src,
                        dst,
                        expected,
                        got,
                    });
                }
            }
        }
        s.reqs[dst].insert(req_id, ReqState::RecvDone { body: msg.body });
    }
}

/// Endpoint over the simulated network; owned by one logical process.
pub struct SimEndpoint {
    net: Arc<Net>,
    rank: Rank,
    out_peers: Vec<Rank>,
    in_peers: Vec<Rank>,
    finished: bool,
}

impl SimEndpoint {
    pub fn out_peers(&self) -> &[Rank] {
        &self.out_peers
    }

    pub fn in_peers(&self) -> &[Rank] {
        &self.in_peers
    }

    pub fn channel_counts(&self) -> (usize, usize) {
        (self.in_peers.len(), self.out_peers.len())
    }

    fn lock(&self) -> MutexGuard<'_, NetState> {
        self.net.state.lock().unwrap()
    }

    fn check_owned(&self, req: Request) -> Result<(), TransportError> {
        if req.owner != self.rank {
            return Err(TransportError::ForeignRequest);
        }
        Ok(())
    }

    /// If every non-finished process is blocked, either force the most
    /// eligible waiter to act on what is already queued, or declare deadlock.
    fn resolve_all_blocked(&self, s: &mut NetState) {
        let all_blocked = s
            .status
            .iter()
            .all(|st| !matches!(st, Status::Running));
        let any_alive = s.status.iter().any(|st| matches!(st, Status::Blocked(_)));
        if !all_blocked || !any_alive {
            return;
        }
        // Candidate key per blocked rank: earliest actionable virtual time.
        let mut best: Option<(u64, Rank)> = None;
        for rank in 0..s.p {
            let kind = match &s.status[rank] {
                Status::Blocked(k) => k.clone(),
                _ => continue,
            };
            let key = match kind {
                WaitKind::Settle => Some(s.clocks[rank]),
                WaitKind::Hard(srcs) => srcs
                    .iter()
                    .filter_map(|&src| {
                        s.channels
                            .get(&(src, rank))
                            .and_then(|ch| ch.queue.front())
                            .map(|m| m.deliver_at)
                    })
                    .min(),
            };
            if let Some(t) = key {
                if best.is_none_or(|(bt, br)| (t, rank) < (bt, br)) {
                    best = Some((t, rank));
                }
            }
        }
        match best {
            Some((_, rank)) => s.forced[rank] = true,
            None => s.poisoned = true,
        }
        self.net.cv.notify_all();
    }

    /// Shared blocking-loop driver. `attempt` returns Some(result) on
    /// progress; None re-blocks with the given wait kind.
    fn block_on<T>(
        &mut self,
        kind_of: impl Fn(&NetState) -> WaitKind,
        mut attempt: impl FnMut(&mut NetState, bool) -> Result<Option<T>, TransportError>,
    ) -> Result<T, TransportError> {
        let mut s = self.lock();
        loop {
            if s.poisoned {
                s.status[self.rank] = Status::Running;
                return Err(TransportError::ProtocolDeadlock);
            }
            let forced = std::mem::take(&mut s.forced[self.rank]);
            match attempt(&mut s, forced) {
                Ok(Some(v)) => {
                    s.status[self.rank] = Status::Running;
                    self.net.cv.notify_all();
                    return Ok(v);
                }
                Ok(None) => {
                    s.status[self.rank] = Status::Blocked(kind_of(&s));
                    self.resolve_all_blocked(&mut s);
                    s = self.net.cv.wait(s).unwrap();
                }
                Err(e) => {
                    s.status[self.rank] = Status::Running;
                    self.net.cv.notify_all();
                    return Err(e);
                }
            }
        }
    }
}

impl Endpoint for SimEndpoint {
    fn rank(&self) -> Rank {
        self.rank
    }

    fn post_send(&mut self, peer: Rank, body: Body) -> Result<Request, TransportError> {
        let rank = self.rank;
        if !self.out_peers.contains(&peer) {
            return Err(TransportError::NoChannel(rank, peer));
        }
        let mut s = self.lock();
        let clock = s.clocks[rank];
        let id = s.next_req_id;
        s.next_req_id += 1;
        let ch = s.channels.get_mut(&(rank, peer)).unwrap();
        if let (Some(expected), Some(got)) = (ch.declared_send_len, body.data_len()) {
            if got != expected {
                return Err(TransportError::SizeMismatch {
                    src: rank,
                    dst: peer,
                    expected,
                    got,
                });
            }
        }
        if ch.queue.len() >= ch.capacity {
            return Err(TransportError::QueueOverflow(rank, peer, ch.capacity));
        }
        let jitter = if ch.jitter_max == 0 {
            0
        } else {
            ch.jitter.gen_range(0..=ch.jitter_max)
        };
        let deliver_at = ch.last_stamp.max(clock + ch.latency + jitter);
        ch.last_stamp = deliver_at;
        ch.posted += 1;
        ch.outstanding_send_stamps.retain(|&d| d > clock);
        ch.outstanding_send_stamps.push(deliver_at);
        ch.max_concurrent_sends = ch.max_concurrent_sends.max(ch.outstanding_send_stamps.len());
        let tag = body.tag().byte();
        ch.queue.push_back(Msg { deliver_at, body });
        s.event_log.push((deliver_at, rank, peer, tag));
        s.reqs[rank].insert(id, ReqState::SendPending { deliver_at });
        self.net.cv.notify_all();
        Ok(Request {
            owner: rank,
            id,
            kind: ReqKind::Send,
        })
    }

    fn post_recv(&mut self, peer: Rank) -> Result<Request, TransportError> {
        let rank = self.rank;
        if !self.in_peers.contains(&peer) {
            return Err(TransportError::NoChannel(peer, rank));
        }
        let mut s = self.lock();
        let id = s.next_req_id;
        s.next_req_id += 1;
        s.reqs[rank].insert(id, ReqState::RecvPending { peer });
        s.channels
            .get_mut(&(peer, rank))
            .unwrap()
            .pending_recvs
            .push_back(id);
        Ok(Request {
            owner: rank,
            id,
            kind: ReqKind::Recv,
        })
    }

    fn test(&mut self, req: Request) -> Result<bool, TransportError> {
        self.check_owned(req)?;
        let rank = self.rank;
        let mut s = self.lock();
        let state = s.reqs[rank]
            .get(&req.id)
            .ok_or(TransportError::ForeignRequest)?;
        match state {
            ReqState::SendPending { deliver_at } => Ok(*deliver_at <= s.clocks[rank]),
            ReqState::RecvDone { .. } | ReqState::Taken => Ok(true),
            ReqState::RecvPending { peer } => {
                let peer = *peer;
                match_channel(&mut s, peer, rank)?;
                Ok(matches!(
                    s.reqs[rank].get(&req.id),
                    Some(ReqState::RecvDone { .. })
                ))
            }
        }
    }

    fn take_payload(&mut self, req: Request) -> Result<Body, TransportError> {
        self.check_owned(req)?;
        let rank = self.rank;
        let mut s = self.lock();
        match s.reqs[rank].get_mut(&req.id) {
            Some(slot @ ReqState::RecvDone { .. }) => {
                let done = std::mem::replace(slot, ReqState::Taken);
                match done {
                    ReqState::RecvDone { body, .. } => Ok(body),
                    _ => unreachable!(),
                }
            }
            Some(_) => Err(TransportError::NotCompleted),
            None => Err(TransportError::ForeignRequest),
        }
    }

    fn cancel(&mut self, req: Request) -> Result<(), TransportError> {
        self.check_owned(req)?;
        let rank = self.rank;
        let mut s = self.lock();
        if let Some(ReqState::RecvPending { peer }) = s.reqs[rank].get(&req.id) {
            let peer = *peer;
            s.reqs[rank].remove(&req.id);
            s.channels
                .get_mut(&(peer, rank))
                .unwrap()
                .pending_recvs
                .retain(|&id| id != req.id);
        }
        Ok(())
    }

    fn wait_all(&mut self, reqs: &[Request]) -> Result<(), TransportError> {
        for r in reqs {
            self.check_owned(*r)?;
        }
        if reqs.is_empty() {
            return Ok(());
        }
        let rank = self.rank;
        let reqs = reqs.to_vec();
        let kind_reqs = reqs.clone();
        self.block_on(
            move |s| {
                // Waiting only on channels whose queue cannot yet satisfy us.
                let srcs: Vec<Rank> = kind_reqs
                    .iter()
                    .filter_map(|r| match s.reqs[rank].get(&r.id) {
                        Some(ReqState::RecvPending { peer }) => Some(*peer),
                        _ => None,
                    })
                    .collect();
                WaitKind::Hard(srcs)
            },
            move |s, _forced| {
                loop {
                    // Sends complete by advancing the local clock to their stamp.
                    for r in &reqs {
                        if let Some(ReqState::SendPending { deliver_at }) = s.reqs[rank].get(&r.id)
                        {
                            let d = *deliver_at;
                            s.clocks[rank] = s.clocks[rank].max(d);
                        }
                    }
                    let peers: Vec<Rank> = reqs
                        .iter()
                        .filter_map(|r| match s.reqs[rank].get(&r.id) {
                            Some(ReqState::RecvPending { peer }) => Some(*peer),
                            _ => None,
                        })
                        .collect();
                    for peer in &peers {
                        match_channel(s, *peer, rank)?;
                    }
                    // For still-pending recvs, advance the clock to the stamp
                    // of the queued message that would satisfy them, if any.
                    let mut advanced = false;
                    for r in &reqs {
                        let peer = match s.reqs[rank].get(&r.id) {
                            Some(ReqState::RecvPending { peer }) => *peer,
                            _ => continue,
                        };
                        let ch = s.channels.get(&(peer, rank)).unwrap();
                        let pos = ch
                            .pending_recvs
                            .iter()
                            .position(|&id| id == r.id)
                            .expect("pending recv registered");
                        if let Some(msg) = ch.queue.get(pos) {
                            let d = msg.deliver_at;
                            if d > s.clocks[rank] {
                                s.clocks[rank] = d;
                            }
                            advanced = true;
                        }
                    }
                    let all_done = reqs.iter().all(|r| match s.reqs[rank].get(&r.id) {
                        Some(ReqState::SendPending { deliver_at }) => {
                            *deliver_at <= s.clocks[rank]
                        }
                        Some(ReqState::RecvDone { .. } | ReqState::Taken) => true,
                        _ => false,
                    });
                    if all_done {
                        return Ok(Some(()));
                    }
                    if !advanced {
                        return Ok(None);
                    }
                }
            },
        )
    }

    fn wait_any(&mut self, reqs: &[Request]) -> Result<usize, TransportError> {
        for r in reqs {
            self.check_owned(*r)?;
        }
        let rank = self.rank;
        let reqs = reqs.to_vec();
        let kind_reqs = reqs.clone();
        self.block_on(
            move |s| {
                let srcs: Vec<Rank> = kind_reqs
                    .iter()
                    .filter_map(|r| match s.reqs[rank].get(&r.id) {
                        Some(ReqState::RecvPending { peer }) => Some(*peer),
                        _ => None,
                    })
                    .collect();
                WaitKind::Hard(srcs)
            },
            move |s, forced| {
                // Already-completed request wins immediately.
                for (i, r) in reqs.iter().enumerate() {
                    if matches!(s.reqs[rank].get(&r.id), Some(ReqState::RecvDone { .. })) {
                        return Ok(Some(i));
                    }
                }
                // Earliest queued candidate over the waited channels; the
                // request matched must be first in its channel's pending list.
                let mut best: Option<(u64, Rank, usize)> = None;
                for (i, r) in reqs.iter().enumerate() {
                    let peer = match s.reqs[rank].get(&r.id) {
                        Some(ReqState::RecvPending { peer }) => *peer,
                        _ => continue,
                    };
                    let ch = s.channels.get(&(peer, rank)).unwrap();
                    if ch.pending_recvs.front() != Some(&r.id) {
                        continue;
                    }
                    if let Some(m) = ch.queue.front() {
                        let key = (m.deliver_at, peer, i);
                        if best.is_none_or(|b| key < b) {
                            best = Some(key);
                        }
                    }
                }
                let (d_star, peer_star, idx) = match best {
                    Some(b) => b,
                    None => return Ok(None),
                };
                if !forced {
                    // Conservative: another waited channel might still produce
                    // an earlier (or tie-winning lower-rank) message.
                    for r in &reqs {
                        let peer = match s.reqs[rank].get(&r.id) {
                            Some(ReqState::RecvPending { peer }) => *peer,
                            _ => continue,
                        };
                        if peer == peer_star {
                            continue;
                        }
                        let ch = s.channels.get(&(peer, rank)).unwrap();
                        if ch.queue.front().is_some() {
                            continue; // its earliest is its head, already considered
                        }
                        let bound = ch.future_bound(s.clocks[peer]);
                        let unsafe_tie = bound == d_star && peer < peer_star;
                        if bound < d_star || unsafe_tie {
                            return Ok(None);
                        }
                    }
                }
                s.clocks[rank] = s.clocks[rank].max(d_star);
                match_channel(s, peer_star, rank)?;
                Ok(Some(idx))
            },
        )
    }

    fn settle(&mut self) -> Result<(), TransportError> {
        let rank = self.rank;
        let in_peers = self.in_peers.clone();
        if in_peers.is_empty() {
            return Ok(());
        }
        self.block_on(
            |_| WaitKind::Settle,
            move |s, forced| {
                if forced {
                    return Ok(Some(()));
                }
                let t = s.clocks[rank];
                let closed = in_peers.iter().all(|&src| {
                    let ch = s.channels.get(&(src, rank)).unwrap();
                    ch.future_bound(s.clocks[src]) > t
                });
                Ok(if closed { Some(()) } else { None })
            },
        )
    }

    fn advance_compute(&mut self, cost: u64) {
        let mut s = self.lock();
        let scale = s.model.slowdown_of(self.rank);
        let ticks = ((cost as f64) * scale).round().max(0.0) as u64;
        s.clocks[self.rank] = s.clocks[self.rank].saturating_add(ticks);
        self.net.cv.notify_all();
    }

    fn now(&self) -> u64 {
        self.lock().clocks[self.rank]
    }

    fn declare_recv_len(&mut self, peer: Rank, len: usize) -> Result<(), TransportError> {
        if !self.in_peers.contains(&peer) {
            return Err(TransportError::NoChannel(peer, self.rank));
        }
        let mut s = self.lock();
        let rank = self.rank;
        s.channels.get_mut(&(peer, rank)).unwrap().declared_recv_len = Some(len);
        Ok(())
    }

    fn declare_send_len(&mut self, peer: Rank, len: usize) -> Result<(), TransportError> {
        if !self.out_peers.contains(&peer) {
            return Err(TransportError::NoChannel(self.rank, peer));
        }
        let mut s = self.lock();
        let rank = self.rank;
        s.channels.get_mut(&(rank, peer)).unwrap().declared_send_len = Some(len);
        Ok(())
    }

    fn finish(&mut self) {
        if self.finished {
            return;
        }
        self.finished = true;
        let mut s = self.lock();
        s.clocks[self.rank] = FINISHED;
        s.status[self.rank] = Status::Finished;
        self.resolve_all_blocked(&mut s);
        self.net.cv.notify_all();
    }
}

impl Drop for SimEndpoint {
    fn drop(&mut self) {
        self.finish();
    }
}
