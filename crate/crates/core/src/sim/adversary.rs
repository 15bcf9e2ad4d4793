//! A fake synchronizer that clients get redirected to. It keeps a copy of the
//! real state and tries to read, forge, hide and substitute.

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::net::NetControl;
use super::scan::{scan_bytes, Hit};
use super::scenario::{BackendKind, Outcome, SimError, World};
use crate::crypto::{self, KeyPair};
use crate::protocol::records::{KeyLink, KeyListing, PendingRow, RowSubmission, SyncError, WrappedKeyRecord};
use crate::protocol::{AuditFinding, ClientError};
use crate::service::wire::{Request, Response};
use crate::service::Synchronizer;
use crate::transport::LineService;

pub const EVIL_ENDPOINT: &str = "evil";

/// Interposes on a private copy of a synchronizer.
pub struct FakeSynchronizer {
    inner: Synchronizer,
    attacker: KeyPair,
    rng: ChaCha8Rng,
    /// Dossiers whose keys are withheld.
    pub hide: BTreeSet<u64>,
    /// Users whose public key is swapped for the attacker's.
    pub substitute: BTreeSet<String>,
    pub tamper_next: bool,
    pub fabricate_next: bool,
    next_fake_id: u64,
}

impl FakeSynchronizer {
    pub fn new(inner: Synchronizer, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE71);
        let attacker = loop {
            let secret: [u8; 64] = std::array::from_fn(|_| rng.gen());
            if let Ok(k) = KeyPair::from_secret_bytes(&secret) {
                break k;
            }
        };
        FakeSynchronizer {
            inner,
            attacker,
            rng,
            hide: BTreeSet::new(),
            substitute: BTreeSet::new(),
            tamper_next: false,
            fabricate_next: false,
            next_fake_id: 1 << 40,
        }
    }

    pub fn attacker(&self) -> &KeyPair {
        &self.attacker
    }

    fn user_arg(req: &Request) -> Option<String> {
        req.payload.get("user").and_then(Value::as_str).map(str::to_string)
    }

    fn handle(&mut self, req: Request) -> Result<Value, SyncError> {
        match req.op.as_str() {
            "key_chain" if Self::user_arg(&req).is_some_and(|u| self.substitute.contains(&u)) => {
                let link = KeyLink { key: self.attacker.public(), endorsement: None };
                to_value(vec![link])
            }
            "get_public_key_by_user" if Self::user_arg(&req).is_some_and(|u| self.substitute.contains(&u)) => {
                to_value(self.attacker.public())
            }
            "get_decrypting_key"
                if req.payload.get("dossier_id").and_then(Value::as_u64).is_some_and(|d| self.hide.contains(&d)) =>
            {
                Err(SyncError::KeyNotFound)
            }
            "list_keys" => {
                let all: Vec<KeyListing> = from_value(self.inner.dispatch(req)?)?;
                to_value(all.into_iter().filter(|k| !self.hide.contains(&k.dossier_id)).collect::<Vec<_>>())
            }
            "get_pending_rows" => {
                let caller = match &req.session {
                    Some(t) => self.inner.authenticate(t)?,
                    None => return Err(SyncError::SessionExpired),
                };
                let mut rows: Vec<PendingRow> = from_value(self.inner.dispatch(req)?)?;
                if self.tamper_next {
                    if let Some(p) = rows.last_mut() {
                        let n = p.row.encrypted_row.len();
                        p.row.encrypted_row[n / 2] ^= 0x01;
                        self.tamper_next = false;
                    }
                }
                if self.fabricate_next {
                    if let Some(sender) = rows.first().map(|p| p.row.sender.clone()) {
                        let junk: Vec<u8> = (0..96).map(|_| self.rng.gen()).collect();
                        let sub = RowSubmission::signed(7, 1, &sender, &caller, junk, &self.attacker);
                        rows.push(PendingRow { id: self.next_fake_id, submitted_at_ms: 0, row: sub });
                        self.next_fake_id += 1;
                        self.fabricate_next = false;
                    }
                }
                to_value(rows)
            }
            _ => self.inner.dispatch(req),
        }
    }
}

fn to_value<T: Serialize>(v: T) -> Result<Value, SyncError> {
    serde_json::to_value(v).map_err(|e| SyncError::Internal(e.to_string()))
}

fn from_value<T: serde::de::DeserializeOwned>(v: Value) -> Result<T, SyncError> {
    serde_json::from_value(v).map_err(|e| SyncError::Internal(e.to_string()))
}

impl LineService for FakeSynchronizer {
    fn handle_line(&mut self, line: &str) -> String {
        let result = serde_json::from_str::<Request>(line)
            .map_err(|e| SyncError::Protocol(e.to_string()))
            .and_then(|req| self.handle(req));
        serde_json::to_string(&Response::from_result(result)).expect("responses serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryReport {
    pub seed: u64,
    pub exchanges_captured: usize,
    /// Sentinels visible to the fake endpoint.
    pub plaintext_hits: Vec<Hit>,
    pub wrapped_keys_seen: usize,
    pub wrapped_keys_opened: usize,
    pub rows_offered: usize,
    pub rows_stored: usize,
    pub rows_rejected: u64,
    /// Outcome of using the dossier whose key was hidden.
    pub hidden_key_use: Outcome,
    /// Missing keys the owner's audit reported.
    pub audit_missing: usize,
    pub substitution_refused: bool,
    /// Dossiers that still open with keys the fake did not hide.
    pub honest_opens: usize,
    pub passed: bool,
}

/// Wrapped keys carried by an exchange, in either direction.
fn wrapped_keys(line: &str, out: &mut Vec<Vec<u8>>) {
    let Ok(v) = serde_json::from_str::<Value>(line) else { return };
    for candidate in [v.get("payload"), v.get("payload").and_then(|p| p.get("payload"))].into_iter().flatten() {
        if let Ok(rec) = serde_json::from_value::<WrappedKeyRecord>(candidate.clone()) {
            out.push(rec.wrapped_key);
        }
    }
}

/// Alice shares three dossiers with Bob, then both get redirected to a fake
/// synchronizer holding a copy of the real state.
pub fn run_redirection_attack(seed: u64) -> Result<AdversaryReport, SimError> {
    let mut w = World::new(BackendKind::Service, seed, None)?;
    w.add_clients(&["alice".into(), "bob".into(), "carol".into()])?;
    let setup = |reason: String| SimError::Setup { line: 0, reason };
    for _ in 0..3 {
        w.act("alice", &super::scenario::Action::Insert(1)).map_err(setup)?;
    }
    let ids = w.dossiers["alice"].clone();
    let alice = w.client("alice").map_err(setup)?;
    for d in &ids {
        alice.grant(*d, "bob", &["id", "note", "filler"]).map_err(ClientError::from)?;
        alice.send(*d)?;
    }
    w.act("alice", &super::scenario::Action::Insert(1)).map_err(setup)?;
    let extra = w.dossiers["alice"][3];
    for u in ["alice", "bob", "carol"] {
        w.sentinels.iter_mut().filter(|s| s.owner == u).for_each(|s| s.shared = true);
    }

    let copy = w.service.as_ref().expect("service world").lock().unwrap_or_else(|p| p.into_inner()).clone();
    let mut fake = FakeSynchronizer::new(copy, seed);
    fake.hide.insert(ids[0]);
    fake.substitute.insert("carol".into());
    fake.tamper_next = true;
    fake.fabricate_next = true;
    let attacker = fake.attacker().clone();
    let fake = Arc::new(Mutex::new(fake));
    w.net.add_endpoint(EVIL_ENDPOINT, fake);
    for u in ["alice", "bob", "carol"] {
        w.net.set_control(u, NetControl { redirect_to: Some(EVIL_ENDPOINT.into()), ..Default::default() });
    }

    let bob = w.client("bob").map_err(setup)?;
    let before = bob.stats().rejected_rows;
    let rows_stored = bob.receive()?;
    let rows_rejected = bob.stats().rejected_rows - before;
    let hidden_key_use = Outcome::of(&bob.use_dossier(ids[0]));
    let honest_opens = ids[1..].iter().filter(|d| bob.use_dossier(**d).is_ok()).count();

    let alice = w.client("alice").map_err(setup)?;
    let audit_missing =
        alice.audit()?.iter().filter(|f| matches!(f, AuditFinding::MissingKey { dossier_id, .. } if *dossier_id == ids[0])).count();
    let substitution_refused =
        matches!(alice.grant(extra, "carol", &["id", "note"]), Err(ClientError::KeyMismatch(ref u)) if u == "carol");

    let capture = w.net.capture_of(EVIL_ENDPOINT);
    let mut plaintext_hits = Vec::new();
    let mut keys = Vec::new();
    let mut rows_offered = 0;
    for ex in &capture {
        let bytes = format!("{}\n{}", ex.request, ex.response);
        plaintext_hits.extend(scan_bytes("capture:evil", bytes.as_bytes(), &w.sentinels));
        wrapped_keys(&ex.request, &mut keys);
        wrapped_keys(&ex.response, &mut keys);
        if ex.request.contains("\"get_pending_rows\"") {
            rows_offered += serde_json::from_str::<Value>(&ex.response)
                .ok()
                .and_then(|v| v.get("payload").and_then(Value::as_array).map(Vec::len))
                .unwrap_or(0);
        }
    }
    plaintext_hits.sort();
    plaintext_hits.dedup();
    let wrapped_keys_opened = keys.iter().filter(|k| crypto::unwrap_key(k, &attacker).is_ok()).count();

    let passed = plaintext_hits.is_empty()
        && wrapped_keys_opened == 0
        && rows_stored == ids.len() - 1
        && rows_rejected == 2
        && hidden_key_use == Outcome::KeyNotFound
        && audit_missing == 1
        && substitution_refused
        && honest_opens == 1;
    Ok(AdversaryReport {
        seed,
        exchanges_captured: capture.len(),
        plaintext_hits,
        wrapped_keys_seen: keys.len(),
        wrapped_keys_opened,
        rows_offered,
        rows_stored,
        rows_rejected,
        hidden_key_use,
        audit_missing,
        substitution_refused,
        honest_opens,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fake_endpoint_learns_nothing() {
        let r = run_redirection_attack(5).unwrap();
        assert!(r.passed, "{r:#?}");
        assert!(r.wrapped_keys_seen > 0);
        assert_eq!(r, run_redirection_attack(5).unwrap());
    }
}
