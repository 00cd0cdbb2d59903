//! Norm accumulators and the tree reduction used for distributed norms.
//!
//! A `q >= 1` selector means the q-norm `(sum |x_i|^q)^(1/q)`; any `q < 1`
//! selects the maximum norm. Partial results combine associatively and
//! commutatively, so the reduction result does not depend on tree shape.

use crate::topology::TreeInfo;
use crate::transport::{Body, Endpoint, TransportError, WireAcc};

/// Norm selector plus stopping tolerance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormSpec {
    pub q: f64,
    pub threshold: f64,
}

impl NormSpec {
    pub fn new(q: f64, threshold: f64) -> Result<Self, String> {
        if !q.is_finite() {
            return Err("norm selector q must be finite".into());
        }
        if threshold.is_nan() || threshold <= 0.0 {
            return Err("threshold must be positive".into());
        }
        Ok(NormSpec { q, threshold })
    }

    pub fn is_max(&self) -> bool {
        self.q < 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccKind {
    SumPowers,
    RunningMax,
}

impl AccKind {
    fn byte(self) -> u8 {
        match self {
            AccKind::SumPowers => 0,
            AccKind::RunningMax => 1,
        }
    }

    fn from_byte(b: u8) -> AccKind {
        if b == 1 {
            AccKind::RunningMax
        } else {
            AccKind::SumPowers
        }
    }
}

/// Partial norm over some subset of a distributed vector's elements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormAccumulator {
    pub kind: AccKind,
    pub value: f64,
    pub count: u32,
}

impl NormAccumulator {
    pub fn neutral(spec: &NormSpec) -> Self {
        NormAccumulator {
            kind: if spec.is_max() {
                AccKind::RunningMax
            } else {
                AccKind::SumPowers
            },
            value: 0.0,
            count: 0,
        }
    }

    /// Associative, commutative merge of two partials of the same kind.
    pub fn combine(self, other: NormAccumulator) -> NormAccumulator {
        debug_assert_eq!(self.kind, other.kind);
        let value = match self.kind {
            AccKind::SumPowers => self.value + other.value,
            AccKind::RunningMax => self.value.max(other.value),
        };
        NormAccumulator {
            kind: self.kind,
            value,
            count: self.count + other.count,
        }
    }

    /// Final scalar: q-th root for sums, identity for the max kind.
    pub fn finalize(&self, spec: &NormSpec) -> f64 {
        match self.kind {
            AccKind::SumPowers => self.value.powf(1.0 / spec.q),
            AccKind::RunningMax => self.value,
        }
    }

    pub fn has_nan(&self) -> bool {
        self.value.is_nan()
    }

    pub fn to_wire(self) -> WireAcc {
        WireAcc {
            kind: self.kind.byte(),
            value: self.value,
            count: self.count,
        }
    }

    pub fn from_wire(w: WireAcc) -> Self {
        NormAccumulator {
            kind: AccKind::from_byte(w.kind),
            value: w.value,
            count: w.count,
        }
    }
}

/// Partial norm of one local block. NaN inputs propagate into the value.
pub fn local_accumulate(block: &[f64], spec: &NormSpec) -> NormAccumulator {
    let mut acc = NormAccumulator::neutral(spec);
    for &x in block {
        let a = x.abs();
        acc.value = match acc.kind {
            AccKind::SumPowers => acc.value + a.powf(spec.q),
            // max(NaN) via total comparison so a NaN is not silently dropped
            AccKind::RunningMax => {
                if a.is_nan() || acc.value.is_nan() {
                    f64::NAN
                } else {
                    acc.value.max(a)
                }
            }
        };
        acc.count += 1;
    }
    acc
}

/// Blocking convergecast-plus-broadcast of a norm over the spanning tree:
/// children push partials up, the root finalizes and pushes the scalar down.
/// Every rank returns the identical global norm. Assumes only norm messages
/// flow on tree channels while it runs.
pub fn tree_norm(
    ep: &mut dyn Endpoint,
    tree: &TreeInfo,
    local: NormAccumulator,
    spec: &NormSpec,
    round: u32,
) -> Result<f64, TransportError> {
    let mut acc = local;
    for &child in &tree.children {
        let r = ep.post_recv(child)?;
        ep.wait_all(&[r])?;
        match ep.take_payload(r)? {
            Body::NormUp { round: rr, acc: w } if rr == round => {
                acc = acc.combine(NormAccumulator::from_wire(w));
            }
            other => {
                return Err(TransportError::BadFrame(format!(
                    "expected norm partial from child {child}, got {:?}",
                    other.tag()
                )))
            }
        }
    }
    let value = match tree.parent {
        None => acc.finalize(spec),
        Some(parent) => {
            let s = ep.post_send(
                parent,
                Body::NormUp {
                    round,
                    acc: acc.to_wire(),
                },
            )?;
            ep.wait_all(&[s])?;
            let r = ep.post_recv(parent)?;
            ep.wait_all(&[r])?;
            match ep.take_payload(r)? {
                Body::NormDown {
                    round: rr, value, ..
                } if rr == round => value,
                other => {
                    return Err(TransportError::BadFrame(format!(
                        "expected norm result from parent {parent}, got {:?}",
                        other.tag()
                    )))
                }
            }
        }
    };
    for &child in &tree.children {
        let s = ep.post_send(
            child,
            Body::NormDown {
                round,
                value,
                detected: false,
            },
        )?;
        ep.wait_all(&[s])?;
    }
    Ok(value)
}
