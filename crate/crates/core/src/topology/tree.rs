//! Distributed spanning-tree construction over the logical network.
//!
//! Flooding from root rank 0: every process adopts the sender of the first
//! invitation it receives as parent (lowest sender rank among simultaneously
//! delivered invitations), acknowledges, and forwards. Each rank ends with
//! local (parent, children) knowledge.

use std::collections::HashMap;

use crate::transport::{Body, Endpoint, Rank, Request, TransportError};

use super::TopologyError;

const INVITE: u8 = 0;
const ACCEPT: u8 = 1;
const REJECT: u8 = 2;

/// Local tree knowledge of one rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeInfo {
    pub parent: Option<Rank>,
    pub children: Vec<Rank>,
}

impl TreeInfo {
    pub fn is_root(&self) -> bool {
        self.parent.is_none()
    }

    /// Degenerate single-process tree.
    pub fn solo() -> Self {
        TreeInfo {
            parent: None,
            children: Vec::new(),
        }
    }
}

/// Global spanning tree, assembled from per-rank [`TreeInfo`] (test support).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanningTree {
    pub root: Rank,
    pub parent: Vec<Option<Rank>>,
    pub children: Vec<Vec<Rank>>,
}

impl SpanningTree {
    pub fn from_local(infos: &[TreeInfo]) -> Self {
        SpanningTree {
            root: infos
                .iter()
                .position(|i| i.parent.is_none())
                .expect("some rank has no parent"),
            parent: infos.iter().map(|i| i.parent).collect(),
            children: infos.iter().map(|i| i.children.clone()).collect(),
        }
    }

    /// Connected, acyclic, p-1 edges, consistent parent/children records.
    pub fn validate(&self) -> Result<(), String> {
        let p = self.parent.len();
        let roots = self.parent.iter().filter(|x| x.is_none()).count();
        if roots != 1 {
            return Err(format!("{roots} roots"));
        }
        let mut edge_count = 0;
        for (rank, &parent) in self.parent.iter().enumerate() {
            if let Some(par) = parent {
                edge_count += 1;
                if !self.children[par].contains(&rank) {
                    return Err(format!("{par} does not list child {rank}"));
                }
            }
        }
        if edge_count != p - 1 {
            return Err(format!("{edge_count} edges for {p} ranks"));
        }
        // Reaching the root from every rank without revisits proves acyclicity.
        for mut v in 0..p {
            let mut steps = 0;
            while let Some(par) = self.parent[v] {
                v = par;
                steps += 1;
                if steps > p {
                    return Err("parent cycle".into());
                }
            }
            if v != self.root {
                return Err(format!("rank does not reach root {}", self.root));
            }
        }
        Ok(())
    }

    pub fn edges(&self) -> Vec<(Rank, Rank)> {
        self.parent
            .iter()
            .enumerate()
            .filter_map(|(r, p)| p.map(|p| (p, r)))
            .collect()
    }
}

fn control(byte: u8) -> Body {
    Body::Control(vec![byte])
}

/// Run the distributed construction for this rank. `neighbors` is the rank's
/// (symmetric) neighbor list; all ranks must call this concurrently.
pub fn build_spanning_tree(
    ep: &mut dyn Endpoint,
    neighbors: &[Rank],
) -> Result<TreeInfo, TopologyError> {
    build_inner(ep, neighbors).map_err(|e| TopologyError::TreeFailure(e.to_string()))
}

fn build_inner(ep: &mut dyn Endpoint, neighbors: &[Rank]) -> Result<TreeInfo, TransportError> {
    let rank = ep.rank();
    if neighbors.is_empty() {
        return Ok(TreeInfo::solo());
    }
    let mut parent: Option<Rank> = None;
    let mut children: Vec<Rank> = Vec::new();
    let mut awaiting_reply: HashMap<Rank, bool> =
        neighbors.iter().map(|&n| (n, false)).collect();
    let mut active: Vec<(Rank, Request)> = Vec::new();
    for &peer in neighbors {
        active.push((peer, ep.post_recv(peer)?));
    }
    let adopted_root = rank == 0;
    let mut adopted = adopted_root;
    if adopted_root {
        for &peer in neighbors {
            ep.post_send(peer, control(INVITE))?;
            awaiting_reply.insert(peer, true);
        }
    }

    while !adopted || awaiting_reply.values().any(|&w| w) {
        let reqs: Vec<Request> = active.iter().map(|&(_, r)| r).collect();
        let idx = ep.wait_any(&reqs)?;
        let (peer, req) = active.remove(idx);
        let body = ep.take_payload(req)?;
        let byte = match body {
            Body::Control(bytes) if bytes.len() == 1 => bytes[0],
            other => {
                return Err(TransportError::BadFrame(format!(
                    "unexpected {:?} during tree construction",
                    other.tag()
                )))
            }
        };
        match byte {
            INVITE => {
                if !adopted {
                    adopted = true;
                    parent = Some(peer);
                    for &nb in neighbors {
                        if nb != peer {
                            ep.post_send(nb, control(INVITE))?;
                            awaiting_reply.insert(nb, true);
                        }
                    }
                } else {
                    ep.post_send(peer, control(REJECT))?;
                }
            }
            ACCEPT => {
                children.push(peer);
                awaiting_reply.insert(peer, false);
            }
            REJECT => {
                awaiting_reply.insert(peer, false);
            }
            other => {
                return Err(TransportError::BadFrame(format!(
                    "unknown tree control byte {other}"
                )))
            }
        }
        // Keep listening only where another message is still owed: the reply
        // to our invitation (the peer's own invitation FIFO-precedes it).
        if awaiting_reply[&peer] {
            active.push((peer, ep.post_recv(peer)?));
        }
    }
    for (_, req) in active {
        ep.cancel(req)?;
    }
    if let Some(par) = parent {
        ep.post_send(par, control(ACCEPT))?;
    }
    children.sort_unstable();
    Ok(TreeInfo { parent, children })
}

/// Sequential BFS oracle with the same lowest-rank tie-break (test support).
pub fn bfs_tree(out_neighbors: &[Vec<Rank>], root: Rank) -> SpanningTree {
    let p = out_neighbors.len();
    let mut parent = vec![None; p];
    let mut children = vec![Vec::new(); p];
    let mut visited = vec![false; p];
    visited[root] = true;
    let mut frontier = vec![root];
    while !frontier.is_empty() {
        frontier.sort_unstable();
        let mut next = Vec::new();
        for &v in &frontier {
            let mut nbrs = out_neighbors[v].clone();
            nbrs.sort_unstable();
            for nb in nbrs {
                if !visited[nb] {
                    visited[nb] = true;
                    parent[nb] = Some(v);
                    children[v].push(nb);
                    next.push(nb);
                }
            }
        }
        frontier = next;
    }
    for list in &mut children {
        list.sort_unstable();
    }
    SpanningTree {
        root,
        parent,
        children,
    }
}
