//! Exhaustive small-model exploration of one owner, one receiver and one
//! dossier. Every interleaving of up to `max_ops` operations per actor is
//! tried, forking the whole system at each step. States are memoized on an
//! abstraction that keeps only phases and the relative order of key versions.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::protocol::{Cause, Client, ClientConfig, ClientError, RevokePolicy};
use crate::rowstore::Row;
use crate::service::wire::ServiceClient;
use crate::service::{PairState, ServiceConfig, Synchronizer};
use crate::transport::{shared, LocalTransport, Shared};

type Local = ServiceClient<LocalTransport<Synchronizer>>;

const OWNER: &str = "alice";
const RECEIVER: &str = "bob";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Grant,
    Send,
    Update,
    Revoke,
    Receive,
    Use,
    Restart,
}

impl Op {
    pub const OWNER_OPS: [Op; 4] = [Op::Grant, Op::Send, Op::Update, Op::Revoke];
    pub const RECEIVER_OPS: [Op; 3] = [Op::Receive, Op::Use, Op::Restart];
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Op::Grant => "grant",
            Op::Send => "send",
            Op::Update => "update",
            Op::Revoke => "revoke",
            Op::Receive => "receive",
            Op::Use => "use",
            Op::Restart => "restart",
        };
        f.write_str(s)
    }
}

/// A synchronizer transition: (operation, from, to) with states numbered 1-3.
pub type SyncEdge = (Op, u8, u8);
/// A receiver transition: (from, to, cause) with phases numbered 1-4.
pub type ReceiverEdge = (u8, u8, Cause);

/// Synchronizer transitions the model permits.
pub fn allowed_sync_edges() -> BTreeSet<SyncEdge> {
    let mut s = BTreeSet::from([
        (Op::Grant, 1, 2),
        (Op::Grant, 2, 2),
        (Op::Grant, 3, 3),
        (Op::Send, 2, 3),
        (Op::Send, 3, 3),
        (Op::Receive, 3, 2),
        (Op::Revoke, 2, 1),
        (Op::Revoke, 3, 1),
    ]);
    // Anything may leave the state as it was.
    for op in Op::OWNER_OPS.iter().chain(&Op::RECEIVER_OPS) {
        for n in 1..=3 {
            s.insert((*op, n, n));
        }
    }
    s
}

/// Receiver transitions the model permits under a revoke policy.
pub fn allowed_receiver_edges(policy: RevokePolicy) -> BTreeSet<ReceiverEdge> {
    let mut s = BTreeSet::from([
        (1, 2, Cause::Receive),
        (2, 2, Cause::Receive),
        (4, 2, Cause::Receive),
        (2, 3, Cause::Use),
        (3, 4, Cause::Use),
        (3, 2, Cause::Use),
        (2, 2, Cause::Use),
        (4, 2, Cause::Use),
        (4, 2, Cause::Restart),
    ]);
    if policy == RevokePolicy::DeleteLocal {
        s.insert((2, 1, Cause::Use));
        s.insert((4, 1, Cause::Use));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub history: Vec<Op>,
    pub what: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExploreReport {
    pub policy: RevokePolicy,
    pub max_ops: usize,
    pub states: usize,
    pub transitions: usize,
    pub sync_edges: BTreeSet<SyncEdge>,
    pub receiver_edges: BTreeSet<ReceiverEdge>,
    /// Permitted edges that were never taken.
    pub sync_unreached: BTreeSet<SyncEdge>,
    pub receiver_unreached: BTreeSet<ReceiverEdge>,
    pub violations: Vec<Violation>,
}

impl ExploreReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

struct Node {
    service: Shared<Synchronizer>,
    owner: Client<Local>,
    receiver: Client<Local>,
    dossier: u64,
    version: u32,
}

impl Node {
    fn fork(&self) -> Result<Node, ClientError> {
        let copy = self.service.lock().expect("single threaded").clone();
        let service = shared(copy);
        let owner = self.owner.fork(self.owner.backend().rebind(LocalTransport::new(service.clone())))?;
        let receiver = self.receiver.fork(self.receiver.backend().rebind(LocalTransport::new(service.clone())))?;
        Ok(Node { service, owner, receiver, dossier: self.dossier, version: self.version })
    }

    fn pair(&self) -> PairState {
        self.service.lock().expect("single threaded").pair_state(self.dossier, RECEIVER)
    }

    fn digest(&self) -> [u8; 32] {
        self.service.lock().expect("single threaded").storage_digest()
    }

    fn row(&self) -> Row {
        Row::new("dossiers", [("id", "d1".to_string()), ("note", format!("v{}", self.version))])
            .expect("valid row")
    }

    /// Phases plus the relative order of every key version in play.
    fn abstraction(&self, owner_left: usize, receiver_left: usize) -> String {
        let d = self.dossier;
        let (stored, pending) = {
            let s = self.service.lock().expect("single threaded");
            let t = s.tables();
            let stored = t.keys.get(&d).and_then(|m| m.get(RECEIVER)).map(|k| k.key_version);
            let pending = t.pending.values().find(|p| p.row.dossier_id == d).map(|p| p.row.key_version);
            (stored, pending)
        };
        let granted = self.owner.grants(d).next().map(|g| g.key_version);
        let sent = self.owner.sent_version(d, RECEIVER);
        let delivered = self.receiver.deliveries().find(|(_, x)| x.dossier_id == d).map(|(_, x)| x.key_version);
        let cached = self.receiver.cached_version(d);
        let versions = [stored, pending, granted, sent, delivered, cached];
        let distinct: BTreeSet<u64> = versions.iter().flatten().copied().collect();
        let rank: Vec<Option<usize>> =
            versions.iter().map(|v| v.map(|v| distinct.iter().position(|x| *x == v).expect("present"))).collect();
        format!(
            "{owner_left}/{receiver_left} {:?} {:?} {rank:?} {}",
            self.pair(),
            self.receiver.phase(d),
            self.owner.outbox_len() + self.receiver.outbox_len()
        )
    }

    fn apply(&mut self, op: Op) -> Result<(), ClientError> {
        let d = self.dossier;
        match op {
            Op::Grant => self.owner.grant(d, RECEIVER, &["id", "note"]).map(drop),
            Op::Send => self.owner.send(d).map(drop),
            Op::Update => {
                self.version += 1;
                let row = self.row();
                self.owner.update(d, row)
            }
            Op::Revoke => self.owner.revoke(d, RECEIVER).map(drop),
            Op::Receive => self.receiver.receive().map(drop),
            Op::Use => self.receiver.use_dossier(d).map(drop),
            Op::Restart => self.receiver.restart(false).map(drop),
        }
    }
}

struct Explorer {
    max_ops: usize,
    allowed_sync: BTreeSet<SyncEdge>,
    allowed_receiver: BTreeSet<ReceiverEdge>,
    seen: HashSet<String>,
    transitions: usize,
    sync_edges: BTreeSet<SyncEdge>,
    receiver_edges: BTreeSet<ReceiverEdge>,
    violations: Vec<Violation>,
}

impl Explorer {
    fn visit(&mut self, node: &Node, history: &mut Vec<Op>, owner_left: usize, receiver_left: usize) -> Result<(), ClientError> {
        if !self.seen.insert(node.abstraction(owner_left, receiver_left)) {
            return Ok(());
        }
        let moves = Op::OWNER_OPS
            .iter()
            .filter(|_| owner_left > 0)
            .chain(Op::RECEIVER_OPS.iter().filter(|_| receiver_left > 0));
        for &op in moves {
            let mut next = node.fork()?;
            next.receiver.clear_trace();
            let before = next.pair();
            let digest = next.digest();
            // Failures such as a missing key are legitimate outcomes here.
            let _ = next.apply(op);
            let after = next.pair();
            history.push(op);
            self.transitions += 1;

            let edge = (op, before.number(), after.number());
            self.sync_edges.insert(edge);
            if !self.allowed_sync.contains(&edge) {
                self.fail(history, format!("synchronizer {} -> {} on {op}", edge.1, edge.2));
            }
            if op == Op::Use && next.digest() != digest {
                self.fail(history, "use changed synchronizer storage".into());
            }
            for c in next.receiver.trace().iter().filter(|c| c.dossier_id == node.dossier) {
                let e = (c.from.number(), c.to.number(), c.cause);
                self.receiver_edges.insert(e);
                if !self.allowed_receiver.contains(&e) {
                    self.fail(history, format!("receiver {} -> {} by {:?}", e.0, e.1, e.2));
                }
            }
            let owner = Op::OWNER_OPS.contains(&op);
            let (ol, rl) = if owner { (owner_left - 1, receiver_left) } else { (owner_left, receiver_left - 1) };
            self.visit(&next, history, ol, rl)?;
            history.pop();
        }
        Ok(())
    }

    fn fail(&mut self, history: &[Op], what: String) {
        self.violations.push(Violation { history: history.to_vec(), what });
    }
}

/// Explores every history with at most `max_ops` operations per actor.
pub fn explore(max_ops: usize, policy: RevokePolicy) -> Result<ExploreReport, ClientError> {
    let clock = Clock::manual(1_000_000);
    let service = shared(Synchronizer::new(clock.clone(), ServiceConfig { pbkdf2_iterations: 1, ..Default::default() }));
    let config = ClientConfig { clock, revoke_policy: policy, ..Default::default() };
    let connect = || ServiceClient::new(LocalTransport::new(service.clone()));
    let mut owner = Client::register_in_memory(OWNER, "pw", connect(), config.clone())?;
    let mut receiver = Client::register_in_memory(RECEIVER, "pw", connect(), config)?;
    owner.peer_key(RECEIVER)?;
    receiver.peer_key(OWNER)?;
    let mut node = Node { service, owner, receiver, dossier: 0, version: 0 };
    node.dossier = node.owner.insert(node.row())?;

    let mut ex = Explorer {
        max_ops,
        allowed_sync: allowed_sync_edges(),
        allowed_receiver: allowed_receiver_edges(policy),
        seen: HashSet::new(),
        transitions: 0,
        sync_edges: BTreeSet::new(),
        receiver_edges: BTreeSet::new(),
        violations: Vec::new(),
    };
    ex.visit(&node, &mut Vec::new(), max_ops, max_ops)?;

    // Only edges that change state count as diagram edges.
    let sync_unreached = ex.allowed_sync.iter().filter(|e| e.1 != e.2 && !ex.sync_edges.contains(e)).copied().collect();
    let receiver_unreached = ex.allowed_receiver.difference(&ex.receiver_edges).copied().collect();
    Ok(ExploreReport {
        policy,
        max_ops: ex.max_ops,
        states: ex.seen.len(),
        transitions: ex.transitions,
        sync_edges: ex.sync_edges,
        receiver_edges: ex.receiver_edges,
        sync_unreached,
        receiver_unreached,
        violations: ex.violations,
    })
}

/// Edge counts per (from, to) pair, for printing.
pub fn sync_summary(r: &ExploreReport) -> BTreeMap<(u8, u8), Vec<Op>> {
    let mut m: BTreeMap<(u8, u8), Vec<Op>> = BTreeMap::new();
    for (op, a, b) in &r.sync_edges {
        m.entry((*a, *b)).or_default().push(*op);
    }
    m
}
