//! Snapshot-based termination detection for asynchronous iterations.
//!
//! Two phases per detection round. Coordination: local-convergence flags
//! propagate from the leaves to the root of the spanning tree. Snapshot: the
//! root freezes its local state and sends snapshot-tagged data to its graph
//! neighbors; every process freezes on its first snapshot message (once its
//! own flag is armed), forwards, and records incoming snapshot payloads per
//! in-link. Once a process holds a frozen local block plus one frozen payload
//! per in-link, it applies the local update once to that isolated global
//! vector; the tree norm of the resulting residual decides termination.
//!
//! The state machine here is transport-free: the communicator feeds it
//! incoming protocol messages and executes the actions it emits. Round
//! counters ride in every message so leftovers from a failed round are
//! discarded instead of corrupting the next one.

use std::collections::{HashMap, HashSet};

use crate::transport::{Rank, WireAcc};

use super::norm::{NormAccumulator, NormSpec};

/// Outgoing protocol step for the communicator to execute. Every action
/// carries the round it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    /// Send a local-convergence notification to the tree parent.
    NotifyParent { round: u32 },
    /// Freeze sol/send buffers now and send one snapshot-tagged payload to
    /// every out-neighbor.
    FreezeAndSendSnapshots { round: u32 },
    /// Send the combined norm partial to the tree parent.
    SendNormUp { round: u32, acc: WireAcc },
    /// Tell all tree children the run is over.
    BroadcastTerminate { round: u32 },
    /// Tell all tree children the round failed; iterating resumes.
    BroadcastResume { round: u32, value: f64 },
}

/// Per-round audit trail: what this rank froze, received, and concluded.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u32,
    /// Frozen outgoing snapshot payloads, per out-neighbor.
    pub sent: Vec<(Rank, Vec<f64>)>,
    /// Recorded incoming snapshot payloads, per in-neighbor.
    pub received: Vec<(Rank, Vec<f64>)>,
    /// Global residual of the frozen vector (known at the root, and at other
    /// ranks after a failed-round broadcast).
    pub value: Option<f64>,
    pub detected: bool,
    /// True if this rank saw the round through to a verdict.
    pub completed: bool,
}

/// Detection state for one process. Single-threaded; advanced only from the
/// communicator's recv/send/update calls.
pub struct Detector {
    parent: Option<Rank>,
    children: Vec<Rank>,
    in_neighbors: Vec<Rank>,
    spec: NormSpec,

    round: u32,
    armed: bool,
    notified_up: bool,
    frozen: bool,
    children_notified: HashSet<Rank>,
    ss_recv: HashMap<Rank, Vec<f64>>,
    eval_done: bool,
    norm_sent: bool,
    eval_acc: NormAccumulator,
    norm_children: HashSet<Rank>,
    terminated: bool,

    actions: Vec<Action>,
    current: RoundRecord,
    records: Vec<RoundRecord>,
    stale_discarded: u64,
}

fn fresh_record(round: u32) -> RoundRecord {
    RoundRecord {
        round,
        sent: Vec::new(),
        received: Vec::new(),
        value: None,
        detected: false,
        completed: false,
    }
}

impl Detector {
    pub fn new(
        parent: Option<Rank>,
        children: Vec<Rank>,
        in_neighbors: Vec<Rank>,
        spec: NormSpec,
    ) -> Self {
        Detector {
            parent,
            children,
            in_neighbors,
            spec,
            round: 0,
            armed: false,
            notified_up: false,
            frozen: false,
            children_notified: HashSet::new(),
            ss_recv: HashMap::new(),
            eval_done: false,
            norm_sent: false,
            eval_acc: NormAccumulator::neutral(&spec),
            norm_children: HashSet::new(),
            terminated: false,
            actions: Vec::new(),
            current: fresh_record(0),
            records: Vec::new(),
            stale_discarded: 0,
        }
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn is_root(&self) -> bool {
        self.parent.is_none()
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn stale_discarded(&self) -> u64 {
        self.stale_discarded
    }

    /// The frozen local block plus all in-link payloads are present and the
    /// one-shot evaluation has not run yet.
    pub fn eval_pending(&self) -> bool {
        self.frozen
            && !self.eval_done
            && self
                .in_neighbors
                .iter()
                .all(|src| self.ss_recv.contains_key(src))
    }

    /// Frozen payload recorded from `src` in the current round.
    pub fn ss_recv(&self, src: Rank) -> Option<&[f64]> {
        self.ss_recv.get(&src).map(|v| v.as_slice())
    }

    /// Drain the actions queued since the last call, in emit order.
    pub fn take_actions(&mut self) -> Vec<Action> {
        std::mem::take(&mut self.actions)
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    /// Residual norm of the detected round, where this rank learned it (the
    /// root concludes with the value; other ranks only for failed rounds).
    pub fn detected_value(&self) -> Option<f64> {
        if self.current.detected {
            return self.current.value;
        }
        self.records
            .iter()
            .rev()
            .find(|r| r.detected)
            .and_then(|r| r.value)
    }

    pub fn into_records(mut self) -> Vec<RoundRecord> {
        self.finish_current_record();
        self.records
    }

    /// Called by the communicator while executing a freeze action, once per
    /// out-neighbor, with the payload it froze.
    pub fn record_frozen_send(&mut self, to: Rank, payload: Vec<f64>) {
        self.current.sent.push((to, payload));
    }

    /// Update the local-convergence flag for this iteration.
    pub fn set_armed(&mut self, armed: bool) {
        self.armed = armed;
        self.progress();
    }

    pub fn on_local_conv(&mut self, src: Rank, round: u32) {
        if round != self.round || self.terminated {
            self.stale_discarded += 1;
            return;
        }
        self.children_notified.insert(src);
        self.progress();
    }

    pub fn on_snapshot_data(&mut self, src: Rank, round: u32, values: Vec<f64>) {
        if round != self.round || self.terminated {
            self.stale_discarded += 1;
            return;
        }
        self.current.received.push((src, values.clone()));
        self.ss_recv.insert(src, values);
        self.progress();
    }

    /// Feed the local partial of the snapshot-residual norm, produced by the
    /// one extra local update on the frozen vector.
    pub fn submit_eval(&mut self, local: NormAccumulator) {
        debug_assert!(self.eval_pending(), "evaluation submitted out of order");
        self.eval_acc = self.eval_acc.combine(local);
        self.eval_done = true;
        self.progress();
    }

    pub fn on_norm_up(&mut self, src: Rank, round: u32, acc: WireAcc) {
        if round != self.round || self.terminated {
            self.stale_discarded += 1;
            return;
        }
        self.eval_acc = self.eval_acc.combine(NormAccumulator::from_wire(acc));
        self.norm_children.insert(src);
        self.progress();
    }

    pub fn on_norm_down(&mut self, round: u32, value: f64, detected: bool) {
        if round != self.round || self.terminated {
            self.stale_discarded += 1;
            return;
        }
        debug_assert!(!detected, "detected verdicts travel as terminate messages");
        self.actions.push(Action::BroadcastResume {
            round: self.round,
            value,
        });
        self.conclude_round(Some(value), false);
    }

    pub fn on_terminate(&mut self, round: u32) {
        if round != self.round || self.terminated {
            self.stale_discarded += 1;
            return;
        }
        self.terminated = true;
        self.actions.push(Action::BroadcastTerminate { round: self.round });
        self.current.detected = true;
        self.current.completed = true;
    }

    /// Prepare for the next linear solve (next time step): bump the round so
    /// anything left over from the finished solve is discarded as stale.
    pub fn reset_for_new_solve(&mut self) {
        self.finish_current_record();
        self.terminated = false;
        self.armed = false;
        self.advance_round();
    }

    fn finish_current_record(&mut self) {
        let touched = !self.current.sent.is_empty()
            || !self.current.received.is_empty()
            || self.current.completed;
        if touched {
            let round = self.current.round;
            self.records
                .push(std::mem::replace(&mut self.current, fresh_record(round)));
        }
    }

    fn conclude_round(&mut self, value: Option<f64>, detected: bool) {
        self.current.value = value;
        self.current.detected = detected;
        self.current.completed = true;
        if detected {
            self.terminated = true;
        } else {
            self.advance_round();
            // Flags persist across the reset; an armed leaf re-notifies
            // immediately in the new round.
            self.progress();
        }
    }

    fn advance_round(&mut self) {
        self.finish_current_record();
        self.round += 1;
        self.current = fresh_record(self.round);
        self.notified_up = false;
        self.frozen = false;
        self.children_notified.clear();
        self.ss_recv.clear();
        self.eval_done = false;
        self.norm_sent = false;
        self.eval_acc = NormAccumulator::neutral(&self.spec);
        self.norm_children.clear();
    }

    /// Fire every enabled transition. All conditions are monotone within a
    /// round, so one pass per event suffices.
    fn progress(&mut self) {
        if self.terminated {
            return;
        }
        // Coordination phase: leaves-to-root notification; the root turns a
        // fully notified tree into a snapshot trigger.
        if self.armed
            && !self.notified_up
            && self
                .children
                .iter()
                .all(|c| self.children_notified.contains(c))
        {
            self.notified_up = true;
            match self.parent {
                Some(_) => self.actions.push(Action::NotifyParent { round: self.round }),
                None => self.freeze(),
            }
        }
        // Snapshot phase: a non-root freezes on the first snapshot message
        // once armed; a recorded payload waits for arming (deferred freeze).
        if self.armed && !self.frozen && self.parent.is_some() && !self.ss_recv.is_empty() {
            self.freeze();
        }
        // Evaluation: the subtree's partials plus the local partial combine;
        // the root finalizes, everyone else pushes upward once.
        if self.eval_done
            && !self.norm_sent
            && self
                .children
                .iter()
                .all(|c| self.norm_children.contains(c))
        {
            self.norm_sent = true;
            match self.parent {
                Some(_) => self.actions.push(Action::SendNormUp {
                    round: self.round,
                    acc: self.eval_acc.to_wire(),
                }),
                None => {
                    let value = self.eval_acc.finalize(&self.spec);
                    let detected = value < self.spec.threshold;
                    if detected {
                        self.actions
                            .push(Action::BroadcastTerminate { round: self.round });
                    } else {
                        self.actions.push(Action::BroadcastResume {
                            round: self.round,
                            value,
                        });
                    }
                    self.conclude_round(Some(value), detected);
                }
            }
        }
    }

    fn freeze(&mut self) {
        debug_assert!(!self.frozen);
        self.frozen = true;
        self.actions
            .push(Action::FreezeAndSendSnapshots { round: self.round });
    }
}
