//! TCP socket transport backend for multi-process demo runs.
//!
//! One listener per rank; every directed graph edge becomes one TCP stream
//! opened by the sender. Frames follow the wire format in [`super::wire`].
//! There is no virtual time here: `now` is wall microseconds, `settle` is a
//! no-op, and blocking waits carry a timeout instead of deadlock detection.

use std::collections::{HashMap, VecDeque};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use super::wire::{decode_frame, encode_frame};
use super::{Body, Endpoint, Rank, ReqKind, Request, TransportError};

#[derive(Debug, Clone)]
pub struct SocketConfig {
    pub host: String,
    pub base_port: u16,
    pub wait_timeout: Duration,
    /// Microseconds of sleep per compute cost unit (heterogeneity emulation).
    pub compute_scale_us: f64,
    pub slowdown: Vec<f64>,
}

impl Default for SocketConfig {
    fn default() -> Self {
        SocketConfig {
            host: "127.0.0.1".into(),
            base_port: 46500,
            wait_timeout: Duration::from_secs(30),
            compute_scale_us: 1.0,
            slowdown: Vec::new(),
        }
    }
}

impl SocketConfig {
    fn addr(&self, rank: Rank) -> String {
        format!("{}:{}", self.host, self.base_port + rank as u16)
    }
}

struct Inbox {
    queues: HashMap<Rank, VecDeque<Body>>,
    /// Reader threads that hit EOF or an error.
    closed: usize,
}

struct Shared {
    inbox: Mutex<Inbox>,
    cv: Condvar,
}

enum ReqState {
    SendDone,
    RecvPending { peer: Rank },
    RecvDone { body: Body },
    Taken,
}

pub struct SocketEndpoint {
    rank: Rank,
    cfg: SocketConfig,
    out_streams: HashMap<Rank, TcpStream>,
    in_peers: Vec<Rank>,
    out_peers: Vec<Rank>,
    shared: Arc<Shared>,
    reqs: HashMap<u64, ReqState>,
    pending: HashMap<Rank, VecDeque<u64>>,
    next_id: u64,
    recv_lens: HashMap<Rank, usize>,
    send_lens: HashMap<Rank, usize>,
    started: Instant,
    finished: bool,
}

fn read_exact_frame(stream: &mut TcpStream) -> Result<Option<Vec<u8>>, TransportError> {
    let mut len_buf = [0u8; 4];
    match stream.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e)
            if e.kind() == std::io::ErrorKind::UnexpectedEof
                || e.kind() == std::io::ErrorKind::ConnectionReset =>
        {
            return Ok(None)
        }
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len_buf) as usize;
    let mut buf = vec![0u8; len];
    stream.read_exact(&mut buf)?;
    Ok(Some(buf))
}

impl SocketEndpoint {
    /// Open channels for `rank`: listen for in-neighbors, dial out-neighbors.
    /// All ranks must call this concurrently.
    pub fn open(
        rank: Rank,
        p: usize,
        out_peers: &[Rank],
        in_peers: &[Rank],
        cfg: SocketConfig,
    ) -> Result<Self, TransportError> {
        for &peer in out_peers.iter().chain(in_peers) {
            if peer >= p || peer == rank {
                return Err(TransportError::UnknownNeighbor(peer, p));
            }
        }
        let listener = TcpListener::bind(cfg.addr(rank))?;
        let shared = Arc::new(Shared {
            inbox: Mutex::new(Inbox {
                queues: in_peers.iter().map(|&r| (r, VecDeque::new())).collect(),
                closed: 0,
            }),
            cv: Condvar::new(),
        });

        // Accept in-connections on a helper thread while dialing out.
        let n_in = in_peers.len();
        let accept_shared = shared.clone();
        let acceptor = std::thread::spawn(move || -> Result<(), TransportError> {
            for _ in 0..n_in {
                let (mut stream, _) = listener.accept()?;
                let mut hello = [0u8; 4];
                stream.read_exact(&mut hello)?;
                let src = u32::from_le_bytes(hello) as Rank;
                let shared = accept_shared.clone();
                std::thread::spawn(move || {
                    while let Ok(Some(frame)) = read_exact_frame(&mut stream) {
                        match decode_frame(&frame) {
                            Ok((frame_src, body)) if frame_src == src => {
                                let mut inbox = shared.inbox.lock().unwrap();
                                if let Some(q) = inbox.queues.get_mut(&src) {
                                    q.push_back(body);
                                }
                                shared.cv.notify_all();
                            }
                            _ => break,
                        }
                    }
                    let mut inbox = shared.inbox.lock().unwrap();
                    inbox.closed += 1;
                    shared.cv.notify_all();
                });
            }
            Ok(())
        });

        let mut out_streams = HashMap::new();
        for &peer in out_peers {
            let deadline = Instant::now() + cfg.wait_timeout;
            let stream = loop {
                match TcpStream::connect(cfg.addr(peer)) {
                    Ok(s) => break s,
                    Err(e) => {
                        if Instant::now() > deadline {
                            return Err(e.into());
                        }
                        std::thread::sleep(Duration::from_millis(10));
                    }
                }
            };
            let mut stream = stream;
            stream.set_nodelay(true).ok();
            stream.write_all(&(rank as u32).to_le_bytes())?;
            out_streams.insert(peer, stream);
        }
        acceptor
            .join()
            .map_err(|_| TransportError::BadFrame("acceptor thread panicked".into()))??;

        Ok(SocketEndpoint {
            rank,
            pending: in_peers.iter().map(|&r| (r, VecDeque::new())).collect(),
            in_peers: in_peers.to_vec(),
            out_peers: out_peers.to_vec(),
            out_streams,
            shared,
            reqs: HashMap::new(),
            next_id: 0,
            recv_lens: HashMap::new(),
            send_lens: HashMap::new(),
            started: Instant::now(),
            cfg,
            finished: false,
        })
    }

    pub fn channel_counts(&self) -> (usize, usize) {
        (self.in_peers.len(), self.out_peers.len())
    }

    fn check_owned(&self, req: Request) -> Result<(), TransportError> {
        if req.owner != self.rank || !self.reqs.contains_key(&req.id) {
            return Err(TransportError::ForeignRequest);
        }
        Ok(())
    }

    /// Pull arrived messages into pending requests, FIFO per channel.
    fn pump(&mut self) -> Result<(), TransportError> {
        let mut inbox = self.shared.inbox.lock().unwrap();
        for (&peer, pend) in self.pending.iter_mut() {
            let q = inbox.queues.get_mut(&peer).unwrap();
            while !q.is_empty() && !pend.is_empty() {
                let body = q.pop_front().unwrap();
                if let (Some(&expected), Some(got)) = (self.recv_lens.get(&peer), body.data_len())
                {
                    if got != expected {
                        return Err(TransportError::SizeMismatch {
                            src: peer,
                            dst: self.rank,
                            expected,
                            got,
                        });
                    }
                }
                let id = pend.pop_front().unwrap();
                self.reqs.insert(id, ReqState::RecvDone { body });
            }
        }
        Ok(())
    }

    fn done(&self, req: &Request) -> bool {
        matches!(
            self.reqs.get(&req.id),
            Some(ReqState::SendDone | ReqState::RecvDone { .. } | ReqState::Taken)
        )
    }
}

impl Endpoint for SocketEndpoint {
    fn rank(&self) -> Rank {
        self.rank
    }

    fn post_send(&mut self, peer: Rank, body: Body) -> Result<Request, TransportError> {
        if let (Some(&expected), Some(got)) = (self.send_lens.get(&peer), body.data_len()) {
            if got != expected {
                return Err(TransportError::SizeMismatch {
                    src: self.rank,
                    dst: peer,
                    expected,
                    got,
                });
            }
        }
        let frame = encode_frame(self.rank, &body);
        let stream = self
            .out_streams
            .get_mut(&peer)
            .ok_or(TransportError::NoChannel(self.rank, peer))?;
        stream.write_all(&frame)?;
        let id = self.next_id;
        self.next_id += 1;
        self.reqs.insert(id, ReqState::SendDone);
        Ok(Request {
            owner: self.rank,
            id,
            kind: ReqKind::Send,
        })
    }

    fn post_recv(&mut self, peer: Rank) -> Result<Request, TransportError> {
        if !self.in_peers.contains(&peer) {
            return Err(TransportError::NoChannel(peer, self.rank));
        }
        let id = self.next_id;
        self.next_id += 1;
        self.reqs.insert(id, ReqState::RecvPending { peer });
        self.pending.get_mut(&peer).unwrap().push_back(id);
        Ok(Request {
            owner: self.rank,
            id,
            kind: ReqKind::Recv,
        })
    }

    fn test(&mut self, req: Request) -> Result<bool, TransportError> {
        self.check_owned(req)?;
        self.pump()?;
        Ok(self.done(&req))
    }

    fn take_payload(&mut self, req: Request) -> Result<Body, TransportError> {
        self.check_owned(req)?;
        match self.reqs.get_mut(&req.id) {
            Some(slot @ ReqState::RecvDone { .. }) => {
                match std::mem::replace(slot, ReqState::Taken) {
                    ReqState::RecvDone { body } => Ok(body),
                    _ => unreachable!(),
                }
            }
            _ => Err(TransportError::NotCompleted),
        }
    }

    fn cancel(&mut self, req: Request) -> Result<(), TransportError> {
        self.check_owned(req)?;
        if let Some(ReqState::RecvPending { peer }) = self.reqs.get(&req.id) {
            let peer = *peer;
            self.reqs.remove(&req.id);
            self.pending
                .get_mut(&peer)
                .unwrap()
                .retain(|&id| id != req.id);
        }
        Ok(())
    }

    fn wait_all(&mut self, reqs: &[Request]) -> Result<(), TransportError> {
        let deadline = Instant::now() + self.cfg.wait_timeout;
        loop {
            self.pump()?;
            if reqs.iter().all(|r| self.done(r)) {
                return Ok(());
            }
            let inbox = self.shared.inbox.lock().unwrap();
            let (_g, timed_out) = self
                .shared
                .cv
                .wait_timeout(inbox, Duration::from_millis(50))
                .unwrap();
            drop(_g);
            if timed_out.timed_out() && Instant::now() > deadline {
                return Err(TransportError::Timeout(self.cfg.wait_timeout));
            }
        }
    }

    fn wait_any(&mut self, reqs: &[Request]) -> Result<usize, TransportError> {
        let deadline = Instant::now() + self.cfg.wait_timeout;
        loop {
            self.pump()?;
            if let Some(i) = reqs.iter().position(|r| self.done(r)) {
                return Ok(i);
            }
            let inbox = self.shared.inbox.lock().unwrap();
            let (_g, timed_out) = self
                .shared
                .cv
                .wait_timeout(inbox, Duration::from_millis(50))
                .unwrap();
            drop(_g);
            if timed_out.timed_out() && Instant::now() > deadline {
                return Err(TransportError::Timeout(self.cfg.wait_timeout));
            }
        }
    }

    fn settle(&mut self) -> Result<(), TransportError> {
        Ok(())
    }

    fn advance_compute(&mut self, cost: u64) {
        let scale = self.cfg.slowdown.get(self.rank).copied().unwrap_or(1.0);
        let us = (cost as f64) * scale * self.cfg.compute_scale_us;
        if us >= 1.0 {
            std::thread::sleep(Duration::from_micros(us as u64));
        }
    }

    fn now(&self) -> u64 {
        self.started.elapsed().as_micros() as u64
    }

    fn declare_recv_len(&mut self, peer: Rank, len: usize) -> Result<(), TransportError> {
        if !self.in_peers.contains(&peer) {
            return Err(TransportError::NoChannel(peer, self.rank));
        }
        self.recv_lens.insert(peer, len);
        Ok(())
    }

    fn declare_send_len(&mut self, peer: Rank, len: usize) -> Result<(), TransportError> {
        if !self.out_peers.contains(&peer) {
            return Err(TransportError::NoChannel(self.rank, peer));
        }
        self.send_lens.insert(peer, len);
        Ok(())
    }

    fn finish(&mut self) {
        if self.finished {
            return;
        }
        self.finished = true;
        for (_, stream) in self.out_streams.drain() {
            stream.shutdown(std::net::Shutdown::Both).ok();
        }
    }
}

impl Drop for SocketEndpoint {
    fn drop(&mut self) {
        self.finish();
    }
}
