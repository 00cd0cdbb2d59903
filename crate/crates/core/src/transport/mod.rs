//! Point-to-point message transport with non-blocking request semantics.
//!
//! Two backends sit behind the [`Endpoint`] trait: a deterministic
//! discrete-delay simulator ([`sim`]) used by all tests, and a TCP socket
//! backend ([`socket`]) for multi-process demo runs. Channels are FIFO by
//! construction and message sizes on data channels are fixed at init.

mod wire;

pub mod sim;
pub mod socket;

pub use wire::{decode_frame, encode_frame};

use thiserror::Error;

/// Process identifier in `0..p-1`.
pub type Rank = usize;

/// Message kind carried by every envelope. The tag fully determines how the
/// receiver decodes the body.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    Data,
    SnapshotData,
    LocalConv,
    NormUp,
    NormDown,
    Terminate,
    Control,
}

impl Tag {
    pub fn byte(self) -> u8 {
        match self {
            Tag::Data => 0,
            Tag::SnapshotData => 1,
            Tag::LocalConv => 2,
            Tag::NormUp => 3,
            Tag::NormDown => 4,
            Tag::Terminate => 5,
            Tag::Control => 6,
        }
    }

    pub fn from_byte(b: u8) -> Option<Tag> {
        Some(match b {
            0 => Tag::Data,
            1 => Tag::SnapshotData,
            2 => Tag::LocalConv,
            3 => Tag::NormUp,
            4 => Tag::NormDown,
            5 => Tag::Terminate,
            6 => Tag::Control,
            _ => return None,
        })
    }
}

/// Norm accumulator as carried on the wire by `NormUp` messages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WireAcc {
    /// 0 = sum of |x|^q powers, 1 = running max.
    pub kind: u8,
    pub value: f64,
    pub count: u32,
}

/// Typed message body. Protocol bodies carry a round counter; `Data` and
/// `SnapshotData` payloads are owned arrays so delivery can swap references
/// instead of copying elements.
#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Data(Vec<f64>),
    SnapshotData { round: u32, values: Vec<f64> },
    LocalConv { round: u32 },
    NormUp { round: u32, acc: WireAcc },
    NormDown { round: u32, value: f64, detected: bool },
    Terminate { round: u32 },
    Control(Vec<u8>),
}

impl Body {
    pub fn tag(&self) -> Tag {
        match self {
            Body::Data(_) => Tag::Data,
            Body::SnapshotData { .. } => Tag::SnapshotData,
            Body::LocalConv { .. } => Tag::LocalConv,
            Body::NormUp { .. } => Tag::NormUp,
            Body::NormDown { .. } => Tag::NormDown,
            Body::Terminate { .. } => Tag::Terminate,
            Body::Control(_) => Tag::Control,
        }
    }

    /// Number of payload elements for size-checked tags, `None` otherwise.
    pub fn data_len(&self) -> Option<usize> {
        match self {
            Body::Data(v) => Some(v.len()),
            Body::SnapshotData { values, .. } => Some(values.len()),
            _ => None,
        }
    }
}

/// Handle for a posted send or receive. Opaque to callers; only valid on the
/// endpoint that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Request {
    pub(crate) owner: Rank,
    pub(crate) id: u64,
    pub(crate) kind: ReqKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) enum ReqKind {
    Send,
    Recv,
}

impl Request {
    pub fn is_send(&self) -> bool {
        self.kind == ReqKind::Send
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("neighbor rank {0} is out of range for {1} processes")]
    UnknownNeighbor(Rank, usize),
    #[error("endpoint for rank {0} already opened")]
    DuplicateOpen(Rank),
    #[error("no channel {0} -> {1}")]
    NoChannel(Rank, Rank),
    #[error("request does not belong to this endpoint")]
    ForeignRequest,
    #[error("request not completed")]
    NotCompleted,
    #[error("message size mismatch on channel {src} -> {dst}: expected {expected}, got {got}")]
    SizeMismatch {
        src: Rank,
        dst: Rank,
        expected: usize,
        got: usize,
    },
    #[error("channel {0} -> {1} queue overflow (capacity {2})")]
    QueueOverflow(Rank, Rank, usize),
    #[error("protocol deadlock: no pending delivery can complete any outstanding request")]
    ProtocolDeadlock,
    #[error("transport i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed frame: {0}")]
    BadFrame(String),
    #[error("wait timed out after {0:?}")]
    Timeout(std::time::Duration),
}

/// One directed communication endpoint, owned by exactly one logical process.
///
/// Contract shared by both backends (exercised by the conformance suite):
/// FIFO delivery per directed channel, non-blocking `test`, requests complete
/// exactly once, and every posted envelope is delivered at most once.
pub trait Endpoint: Send {
    fn rank(&self) -> Rank;

    /// Non-blocking send; the message is delivered FIFO after the channel delay.
    fn post_send(&mut self, peer: Rank, body: Body) -> Result<Request, TransportError>;

    /// Post a reception request matched to the next undelivered FIFO message
    /// from `peer`.
    fn post_recv(&mut self, peer: Rank) -> Result<Request, TransportError>;

    /// Non-blocking completion check. Stays true once completed.
    fn test(&mut self, req: Request) -> Result<bool, TransportError>;

    /// Move the payload out of a completed receive request.
    fn take_payload(&mut self, req: Request) -> Result<Body, TransportError>;

    /// Cancel a pending receive request so it can never match a message.
    /// Completed requests are left untouched.
    fn cancel(&mut self, req: Request) -> Result<(), TransportError>;

    /// Block until every request completed. On the simulated backend this
    /// advances simulated time as needed.
    fn wait_all(&mut self, reqs: &[Request]) -> Result<(), TransportError>;

    /// Block until some receive request can complete; returns its index.
    fn wait_any(&mut self, reqs: &[Request]) -> Result<usize, TransportError>;

    /// Block until no in-channel can still produce a message deliverable at
    /// the current local time; afterwards `test` answers are final for "now".
    /// No-op on the socket backend.
    fn settle(&mut self) -> Result<(), TransportError>;

    /// Charge local computation time (scaled by the per-rank slowdown on the
    /// simulated backend).
    fn advance_compute(&mut self, cost: u64);

    /// Local time: simulated ticks, or wall microseconds on the socket backend.
    fn now(&self) -> u64;

    /// Declare the fixed payload element count expected on the data channel
    /// from `peer` (receive side).
    fn declare_recv_len(&mut self, peer: Rank, len: usize) -> Result<(), TransportError>;

    /// Declare the fixed payload element count posted on the data channel to
    /// `peer` (send side).
    fn declare_send_len(&mut self, peer: Rank, len: usize) -> Result<(), TransportError>;

    /// Mark this logical process finished; pending messages are discarded.
    fn finish(&mut self);
}
