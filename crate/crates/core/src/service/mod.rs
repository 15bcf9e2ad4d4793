//! The synchronizer: an untrusted relay that stores users, wrapped keys and
//! pending rows. It checks signatures and ownership but never holds anything
//! it could decrypt.

mod persist;
pub mod tcp;
pub mod wire;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::debug;

use crate::clock::Clock;
use crate::crypto::{self, hex_bytes, PublicKey};
use crate::protocol::records::{
    chain_is_valid, KeyLink, KeyListing, PendingRow, ResendRequest, RevokeRequest, RowSubmission,
    SyncError, UserEntry, UserId, WrappedKeyRecord,
};
pub use persist::{PersistError, HEADER};
use persist::Journal;

pub type Result<T> = std::result::Result<T, SyncError>;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub session_idle_ms: u64,
    pub pbkdf2_iterations: u32,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { session_idle_ms: 30 * 60 * 1000, pbkdf2_iterations: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: UserId,
    pub keys: Vec<KeyLink>,
    #[serde(with = "hex_bytes")]
    pub salt: Vec<u8>,
    #[serde(with = "hex_bytes")]
    pub password_digest: Vec<u8>,
    pub iterations: u32,
}

impl UserRecord {
    pub fn public_key(&self) -> PublicKey {
        self.keys.last().expect("registered users have a key").key
    }
}

/// Abstract per-(dossier, receiver) state of the synchronizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PairState {
    /// Nothing stored.
    Empty,
    /// A wrapped key is stored.
    Keyed,
    /// A wrapped key and a pending row are stored.
    KeyedPending,
}

impl PairState {
    pub fn number(self) -> u8 {
        match self {
            PairState::Empty => 1,
            PairState::Keyed => 2,
            PairState::KeyedPending => 3,
        }
    }
}

/// Everything the service persists.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tables {
    pub users: BTreeMap<UserId, UserRecord>,
    /// Current key per (dossier, receiver).
    pub keys: BTreeMap<u64, BTreeMap<UserId, WrappedKeyRecord>>,
    pub owners: BTreeMap<u64, UserId>,
    pub pending: BTreeMap<u64, PendingRow>,
    /// Latest row per (dossier, receiver): (key_version, id). Makes retries
    /// idempotent.
    pub row_index: BTreeMap<u64, BTreeMap<UserId, (u64, u64)>>,
    pub resend: BTreeMap<UserId, Vec<ResendRequest>>,
    pub next_id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) enum Event {
    Snapshot(Tables),
    Register(UserRecord),
    Rotate { user: UserId, link: KeyLink },
    DepositKey(WrappedKeyRecord),
    Row { row: PendingRow, replaced: Option<u64> },
    Ack { ids: Vec<u64> },
    Revoke { dossier_id: u64, receiver: UserId },
    ResendQueued { owner: UserId, request: ResendRequest },
    ResendDrained { owner: UserId },
}

impl Tables {
    fn apply(&mut self, event: Event) {
        match event {
            Event::Snapshot(t) => *self = t,
            Event::Register(rec) => {
                self.users.insert(rec.user_id.clone(), rec);
            }
            Event::Rotate { user, link } => {
                if let Some(u) = self.users.get_mut(&user) {
                    u.keys.push(link);
                }
            }
            Event::DepositKey(rec) => {
                self.owners.entry(rec.dossier_id).or_insert_with(|| rec.sender.clone());
                self.keys.entry(rec.dossier_id).or_default().insert(rec.receiver.clone(), rec);
            }
            Event::Row { row, replaced } => {
                if let Some(old) = replaced {
                    self.pending.remove(&old);
                }
                self.next_id = self.next_id.max(row.id + 1);
                self.row_index
                    .entry(row.row.dossier_id)
                    .or_default()
                    .insert(row.row.receiver.clone(), (row.row.key_version, row.id));
                self.pending.insert(row.id, row);
            }
            Event::Ack { ids } => {
                for id in ids {
                    self.pending.remove(&id);
                }
            }
            Event::Revoke { dossier_id, receiver } => {
                if let Some(k) = self.keys.get_mut(&dossier_id) {
                    k.remove(&receiver);
                    if k.is_empty() {
                        self.keys.remove(&dossier_id);
                    }
                }
                if let Some(idx) = self.row_index.get_mut(&dossier_id) {
                    if let Some((_, id)) = idx.remove(&receiver) {
                        self.pending.remove(&id);
                    }
                    if idx.is_empty() {
                        self.row_index.remove(&dossier_id);
                    }
                }
            }
            Event::ResendQueued { owner, request } => {
                let q = self.resend.entry(owner).or_default();
                if !q.contains(&request) {
                    q.push(request);
                }
            }
            Event::ResendDrained { owner } => {
                self.resend.remove(&owner);
            }
        }
    }

    fn key(&self, dossier_id: u64, receiver: &str) -> Option<&WrappedKeyRecord> {
        self.keys.get(&dossier_id).and_then(|m| m.get(receiver))
    }

    fn pending_id(&self, dossier_id: u64, receiver: &str) -> Option<u64> {
        let (_, id) = self.row_index.get(&dossier_id)?.get(receiver)?;
        self.pending.contains_key(id).then_some(*id)
    }
}

#[derive(Debug, Clone)]
struct Session {
    user: UserId,
    last_seen_ms: u64,
}

#[derive(Debug)]
pub struct Synchronizer {
    tables: Tables,
    sessions: HashMap<String, Session>,
    clock: Clock,
    config: ServiceConfig,
    journal: Option<Journal>,
}

impl Clone for Synchronizer {
    /// Clones the in-memory state only; the clone is not file-backed.
    fn clone(&self) -> Self {
        Synchronizer {
            tables: self.tables.clone(),
            sessions: self.sessions.clone(),
            clock: self.clock.clone(),
            config: self.config.clone(),
            journal: None,
        }
    }
}

impl Synchronizer {
    pub fn new(clock: Clock, config: ServiceConfig) -> Self {
        Synchronizer { tables: Tables::default(), sessions: HashMap::new(), clock, config, journal: None }
    }

    /// Opens (or creates) a journaled service database.
    pub fn open(path: impl AsRef<Path>, clock: Clock, config: ServiceConfig) -> std::result::Result<Self, PersistError> {
        let (journal, events) = Journal::open(path.as_ref())?;
        let mut tables = Tables::default();
        for e in events {
            tables.apply(e);
        }
        let mut s = Synchronizer { tables, sessions: HashMap::new(), clock, config, journal: Some(journal) };
        s.compact()?;
        Ok(s)
    }

    /// Rewrites the journal as a single snapshot event.
    pub fn compact(&mut self) -> std::result::Result<(), PersistError> {
        if let Some(j) = &mut self.journal {
            j.rewrite(&Event::Snapshot(self.tables.clone()))?;
        }
        Ok(())
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn tables(&self) -> &Tables {
        &self.tables
    }

    /// Direct access to the stored tables, bypassing every check. Used to
    /// model a misbehaving service.
    pub fn tables_mut(&mut self) -> &mut Tables {
        &mut self.tables
    }

    fn commit(&mut self, event: Event) -> Result<()> {
        if let Some(j) = &mut self.journal {
            j.append(&event).map_err(|e| SyncError::Internal(e.to_string()))?;
        }
        self.tables.apply(event);
        Ok(())
    }

    /// SHA-256 of the canonical persisted state. Read-only operations leave
    /// it unchanged.
    pub fn storage_digest(&self) -> [u8; 32] {
        Sha256::digest(serde_json::to_vec(&self.tables).expect("tables serialize")).into()
    }

    /// The persisted representation as bytes, for inspection.
    pub fn storage_bytes(&self) -> Vec<u8> {
        let mut out = HEADER.as_bytes().to_vec();
        out.push(b'\n');
        out.extend(serde_json::to_vec(&Event::Snapshot(self.tables.clone())).expect("tables serialize"));
        out.push(b'\n');
        out
    }

    pub fn pair_state(&self, dossier_id: u64, receiver: &str) -> PairState {
        match (self.tables.key(dossier_id, receiver).is_some(), self.tables.pending_id(dossier_id, receiver).is_some()) {
            (false, false) => PairState::Empty,
            (true, false) => PairState::Keyed,
            (true, true) => PairState::KeyedPending,
            (false, true) => unreachable!("rows are only accepted next to a key"),
        }
    }

    pub fn pending_count(&self) -> usize {
        self.tables.pending.len()
    }

    pub fn key_count(&self) -> usize {
        self.tables.keys.values().map(BTreeMap::len).sum()
    }

    // ------------------------------------------------------------------
    // Registration
    // ------------------------------------------------------------------

    pub fn register_user(&mut self, user: &str, key: PublicKey, password: &str) -> Result<()> {
        if user.is_empty() {
            return Err(SyncError::Protocol("empty user id".into()));
        }
        if self.tables.users.contains_key(user) {
            return Err(SyncError::DuplicateUser(user.to_string()));
        }
        let salt = crypto::random_bytes::<16>().map_err(|e| SyncError::Internal(e.to_string()))?;
        let iterations = self.config.pbkdf2_iterations;
        let rec = UserRecord {
            user_id: user.to_string(),
            keys: vec![KeyLink { key, endorsement: None }],
            salt: salt.to_vec(),
            password_digest: crypto::password_digest(password, &salt, iterations).to_vec(),
            iterations,
        };
        self.commit(Event::Register(rec))
    }

    /// Checks a password and opens a session.
    pub fn login(&mut self, user: &str, password: &str) -> Result<String> {
        let rec = self.tables.users.get(user).ok_or(SyncError::BadCredentials)?;
        let digest = crypto::password_digest(password, &rec.salt, rec.iterations);
        if digest.as_slice() != rec.password_digest.as_slice() {
            return Err(SyncError::BadCredentials);
        }
        let token = crypto::random_token().map_err(|e| SyncError::Internal(e.to_string()))?;
        let now = self.clock.now_ms();
        self.sessions.retain(|_, s| now.saturating_sub(s.last_seen_ms) <= self.config.session_idle_ms);
        self.sessions.insert(token.clone(), Session { user: user.to_string(), last_seen_ms: now });
        Ok(token)
    }

    /// Resolves a session token to its user, refreshing the idle timer.
    pub fn authenticate(&mut self, token: &str) -> Result<UserId> {
        let now = self.clock.now_ms();
        let idle = self.config.session_idle_ms;
        match self.sessions.get_mut(token) {
            Some(s) if now.saturating_sub(s.last_seen_ms) <= idle => {
                s.last_seen_ms = now;
                Ok(s.user.clone())
            }
            Some(_) => {
                self.sessions.remove(token);
                Err(SyncError::SessionExpired)
            }
            None => Err(SyncError::SessionExpired),
        }
    }

    pub fn select_user(&self, user: &str) -> Result<UserEntry> {
        let rec = self.tables.users.get(user).ok_or_else(|| SyncError::UnknownUser(user.to_string()))?;
        Ok(UserEntry { user_id: rec.user_id.clone(), public_key: rec.public_key() })
    }

    pub fn all_users(&self) -> Vec<UserEntry> {
        self.tables
            .users
            .values()
            .map(|r| UserEntry { user_id: r.user_id.clone(), public_key: r.public_key() })
            .collect()
    }

    pub fn public_key(&self, user: &str) -> Result<PublicKey> {
        Ok(self.select_user(user)?.public_key)
    }

    pub fn key_chain(&self, user: &str) -> Result<Vec<KeyLink>> {
        self.tables
            .users
            .get(user)
            .map(|r| r.keys.clone())
            .ok_or_else(|| SyncError::UnknownUser(user.to_string()))
    }

    /// Replaces the caller's public key. The new key must be endorsed by the
    /// current one.
    pub fn rotate_public_key(&mut self, user: &str, link: KeyLink) -> Result<()> {
        let mut chain = self.key_chain(user)?;
        chain.push(link);
        if !chain_is_valid(user, &chain) {
            return Err(SyncError::BadSignature);
        }
        self.commit(Event::Rotate { user: user.to_string(), link })
    }

    // ------------------------------------------------------------------
    // Keys
    // ------------------------------------------------------------------

    fn sender_key(&self, sender: &str) -> Result<PublicKey> {
        self.tables
            .users
            .get(sender)
            .map(UserRecord::public_key)
            .ok_or_else(|| SyncError::UnknownUser(sender.to_string()))
    }

    fn check_owner(&self, dossier_id: u64, user: &str) -> Result<()> {
        match self.tables.owners.get(&dossier_id) {
            Some(owner) if owner != user => Err(SyncError::NotOwner),
            _ => Ok(()),
        }
    }

    pub fn deposit_key(&mut self, caller: &str, rec: WrappedKeyRecord) -> Result<()> {
        if rec.sender != caller {
            return Err(SyncError::BadSignature);
        }
        if !rec.verify(&self.sender_key(&rec.sender)?) {
            return Err(SyncError::BadSignature);
        }
        if !self.tables.users.contains_key(&rec.receiver) {
            return Err(SyncError::UnknownUser(rec.receiver.clone()));
        }
        self.check_owner(rec.dossier_id, caller)?;
        if let Some(cur) = self.tables.key(rec.dossier_id, &rec.receiver) {
            if cur.key_version > rec.key_version || *cur == rec {
                debug!(dossier = rec.dossier_id, "ignoring stale or repeated key deposit");
                return Ok(());
            }
        }
        self.commit(Event::DepositKey(rec))
    }

    pub fn delete_decrypting_key(&mut self, caller: &str, req: &RevokeRequest) -> Result<()> {
        if req.requester != caller || !req.verify(&self.sender_key(caller)?) {
            return Err(SyncError::BadSignature);
        }
        match self.tables.owners.get(&req.dossier_id) {
            None => return Err(SyncError::NotFound(format!("dossier {}", req.dossier_id))),
            Some(owner) if owner != caller => return Err(SyncError::NotOwner),
            Some(_) => {}
        }
        if self.tables.key(req.dossier_id, &req.receiver).is_none()
            && self.tables.pending_id(req.dossier_id, &req.receiver).is_none()
        {
            return Err(SyncError::NotFound(format!("key for {} on dossier {}", req.receiver, req.dossier_id)));
        }
        self.commit(Event::Revoke { dossier_id: req.dossier_id, receiver: req.receiver.clone() })
    }

    /// Read-only key lookup for the receiver named on the record.
    pub fn get_decrypting_key(&self, caller: &str, dossier_id: u64, key_version: u64) -> Result<WrappedKeyRecord> {
        let rec = self.tables.key(dossier_id, caller).ok_or(SyncError::KeyNotFound)?;
        if let Some(exp) = rec.expiry_ms {
            if self.clock.now_ms() > exp {
                return Err(SyncError::Expired);
            }
        }
        if rec.key_version > key_version {
            return Err(SyncError::Superseded);
        }
        if rec.key_version < key_version {
            return Err(SyncError::KeyNotFound);
        }
        Ok(rec.clone())
    }

    /// Keys the caller has deposited, for auditing.
    pub fn list_keys(&self, caller: &str) -> Vec<KeyListing> {
        self.tables
            .keys
            .values()
            .flat_map(|m| m.values())
            .filter(|r| r.sender == caller)
            .map(|r| KeyListing { dossier_id: r.dossier_id, receiver: r.receiver.clone(), key_version: r.key_version })
            .collect()
    }

    // ------------------------------------------------------------------
    // Rows
    // ------------------------------------------------------------------

    pub fn send_row(&mut self, caller: &str, sub: RowSubmission) -> Result<u64> {
        if sub.sender != caller || !sub.verify(&self.sender_key(caller)?) {
            return Err(SyncError::BadSignature);
        }
        if !self.tables.users.contains_key(&sub.receiver) {
            return Err(SyncError::UnknownUser(sub.receiver.clone()));
        }
        self.check_owner(sub.dossier_id, caller)?;
        match self.tables.key(sub.dossier_id, &sub.receiver) {
            Some(k) if k.key_version == sub.key_version => {}
            _ => return Err(SyncError::Stale),
        }
        let previous = self.tables.row_index.get(&sub.dossier_id).and_then(|m| m.get(&sub.receiver)).copied();
        if let Some((version, id)) = previous {
            if version == sub.key_version {
                return Ok(id);
            }
        }
        let id = self.tables.next_id;
        let replaced = previous.map(|(_, id)| id).filter(|id| self.tables.pending.contains_key(id));
        let row = PendingRow { id, submitted_at_ms: self.clock.now_ms(), row: sub };
        self.commit(Event::Row { row, replaced })?;
        Ok(id)
    }

    /// Deletes acknowledged rows, then returns everything still pending for
    /// the caller in id order.
    pub fn get_pending_rows(&mut self, caller: &str, ack: &[u64]) -> Result<Vec<PendingRow>> {
        let ids: Vec<u64> = ack
            .iter()
            .copied()
            .filter(|id| self.tables.pending.get(id).is_some_and(|p| p.row.receiver == caller))
            .collect();
        if !ids.is_empty() {
            self.commit(Event::Ack { ids })?;
        }
        Ok(self.tables.pending.values().filter(|p| p.row.receiver == caller).cloned().collect())
    }

    /// Queues a request for the owner to send a dossier again.
    pub fn resend_row(&mut self, caller: &str, dossier_id: u64) -> Result<()> {
        let owner = self
            .tables
            .owners
            .get(&dossier_id)
            .cloned()
            .ok_or_else(|| SyncError::NotFound(format!("dossier {dossier_id}")))?;
        let request = ResendRequest { dossier_id, receiver: caller.to_string() };
        self.commit(Event::ResendQueued { owner, request })
    }

    pub fn take_resend_requests(&mut self, caller: &str) -> Result<Vec<ResendRequest>> {
        let out = self.tables.resend.get(caller).cloned().unwrap_or_default();
        if !out.is_empty() {
            self.commit(Event::ResendDrained { owner: caller.to_string() })?;
        }
        Ok(out)
    }

    pub fn shutdown(mut self) -> std::result::Result<(), PersistError> {
        self.compact()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{generate_keypair, wrap_key, generate_row_key, KeyPair};

    fn config() -> ServiceConfig {
        ServiceConfig { pbkdf2_iterations: 10, ..ServiceConfig::default() }
    }

    fn setup() -> (Synchronizer, KeyPair, KeyPair) {
        let mut s = Synchronizer::new(Clock::manual(0), config());
        let a = generate_keypair().unwrap();
        let b = generate_keypair().unwrap();
        s.register_user("alice", a.public(), "pw-a").unwrap();
        s.register_user("bob", b.public(), "pw-b").unwrap();
        (s, a, b)
    }

    fn key_rec(a: &KeyPair, b: &KeyPair, d: u64, v: u64) -> WrappedKeyRecord {
        let blob = wrap_key(&generate_row_key().unwrap(), &b.public()).unwrap();
        WrappedKeyRecord::signed(d, v, "alice", "bob", None, blob, a)
    }

    #[test]
    fn registration_and_login() {
        let (mut s, a, _) = setup();
        assert_eq!(s.register_user("alice", a.public(), "x"), Err(SyncError::DuplicateUser("alice".into())));
        assert_eq!(s.login("alice", "wrong"), Err(SyncError::BadCredentials));
        let t = s.login("alice", "pw-a").unwrap();
        assert_eq!(s.authenticate(&t).unwrap(), "alice");
        assert_eq!(s.all_users().len(), 2);
        assert!(!String::from_utf8_lossy(&s.storage_bytes()).contains("pw-a"));
    }

    #[test]
    fn sessions_expire_when_idle() {
        let (mut s, _, _) = setup();
        let t = s.login("bob", "pw-b").unwrap();
        s.clock().advance(29 * 60 * 1000);
        assert!(s.authenticate(&t).is_ok());
        s.clock().advance(30 * 60 * 1000 + 1);
        assert_eq!(s.authenticate(&t), Err(SyncError::SessionExpired));
    }

    #[test]
    fn pair_states_follow_grant_send_receive_revoke() {
        let (mut s, a, b) = setup();
        assert_eq!(s.pair_state(1, "bob"), PairState::Empty);
        s.deposit_key("alice", key_rec(&a, &b, 1, 1)).unwrap();
        assert_eq!(s.pair_state(1, "bob"), PairState::Keyed);
        let sub = RowSubmission::signed(1, 1, "alice", "bob", vec![1, 2, 3], &a);
        let id = s.send_row("alice", sub.clone()).unwrap();
        assert_eq!(s.send_row("alice", sub).unwrap(), id);
        assert_eq!(s.pair_state(1, "bob"), PairState::KeyedPending);
        let before = s.storage_digest();
        s.get_decrypting_key("bob", 1, 1).unwrap();
        assert_eq!(s.storage_digest(), before);
        let rows = s.get_pending_rows("bob", &[]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(s.get_pending_rows("bob", &[]).unwrap().len(), 1);
        assert!(s.get_pending_rows("bob", &[id]).unwrap().is_empty());
        assert_eq!(s.pair_state(1, "bob"), PairState::Keyed);
        let req = RevokeRequest::signed(1, "bob", "alice", &a);
        s.delete_decrypting_key("alice", &req).unwrap();
        assert_eq!(s.pair_state(1, "bob"), PairState::Empty);
        assert!(matches!(s.delete_decrypting_key("alice", &req), Err(SyncError::NotFound(_))));
        assert_eq!(s.get_decrypting_key("bob", 1, 1), Err(SyncError::KeyNotFound));
    }

    #[test]
    fn forged_and_foreign_requests_are_rejected() {
        let (mut s, a, b) = setup();
        let mut rec = key_rec(&a, &b, 1, 1);
        rec.wrapped_key[0] ^= 1;
        assert_eq!(s.deposit_key("alice", rec), Err(SyncError::BadSignature));
        // Bob claims to be Alice.
        let forged = WrappedKeyRecord::signed(1, 1, "alice", "bob", None, vec![0; 92], &b);
        assert_eq!(s.deposit_key("alice", forged), Err(SyncError::BadSignature));
        s.deposit_key("alice", key_rec(&a, &b, 1, 1)).unwrap();
        let req = RevokeRequest::signed(1, "bob", "bob", &b);
        assert_eq!(s.delete_decrypting_key("bob", &req), Err(SyncError::NotOwner));
        let bob_row = RowSubmission::signed(1, 1, "bob", "alice", vec![1], &b);
        assert_eq!(s.send_row("bob", bob_row), Err(SyncError::NotOwner));
    }

    #[test]
    fn newer_versions_supersede() {
        let (mut s, a, b) = setup();
        s.deposit_key("alice", key_rec(&a, &b, 1, 1)).unwrap();
        s.deposit_key("alice", key_rec(&a, &b, 1, 2)).unwrap();
        assert_eq!(s.get_decrypting_key("bob", 1, 1), Err(SyncError::Superseded));
        assert_eq!(s.get_decrypting_key("bob", 1, 2).unwrap().key_version, 2);
        // An older retry does not roll back.
        s.deposit_key("alice", key_rec(&a, &b, 1, 1)).unwrap();
        assert_eq!(s.get_decrypting_key("bob", 1, 2).unwrap().key_version, 2);
        let old = RowSubmission::signed(1, 1, "alice", "bob", vec![1], &a);
        assert_eq!(s.send_row("alice", old), Err(SyncError::Stale));
        let r2 = s.send_row("alice", RowSubmission::signed(1, 2, "alice", "bob", vec![2], &a)).unwrap();
        s.deposit_key("alice", key_rec(&a, &b, 1, 3)).unwrap();
        let r3 = s.send_row("alice", RowSubmission::signed(1, 3, "alice", "bob", vec![3], &a)).unwrap();
        let rows = s.get_pending_rows("bob", &[]).unwrap();
        assert_eq!(rows.iter().map(|r| r.id).collect::<Vec<_>>(), vec![r3]);
        assert_ne!(r2, r3);
    }

    #[test]
    fn expiry_uses_service_clock() {
        let (mut s, a, b) = setup();
        let blob = wrap_key(&generate_row_key().unwrap(), &b.public()).unwrap();
        let rec = WrappedKeyRecord::signed(1, 1, "alice", "bob", Some(1_000), blob, &a);
        s.deposit_key("alice", rec).unwrap();
        assert!(s.get_decrypting_key("bob", 1, 1).is_ok());
        s.clock().set(1_001);
        assert_eq!(s.get_decrypting_key("bob", 1, 1), Err(SyncError::Expired));
    }

    #[test]
    fn resend_requests_reach_owner() {
        let (mut s, a, b) = setup();
        assert!(matches!(s.resend_row("bob", 1), Err(SyncError::NotFound(_))));
        s.deposit_key("alice", key_rec(&a, &b, 1, 1)).unwrap();
        s.resend_row("bob", 1).unwrap();
        s.resend_row("bob", 1).unwrap();
        let q = s.take_resend_requests("alice").unwrap();
        assert_eq!(q, vec![ResendRequest { dossier_id: 1, receiver: "bob".into() }]);
        assert!(s.take_resend_requests("alice").unwrap().is_empty());
    }

    #[test]
    fn key_rotation_requires_endorsement() {
        let (mut s, _, b) = setup();
        let b2 = generate_keypair().unwrap();
        let stranger = generate_keypair().unwrap();
        let bad = KeyLink::endorse("bob", b2.public(), &stranger);
        assert_eq!(s.rotate_public_key("bob", bad), Err(SyncError::BadSignature));
        s.rotate_public_key("bob", KeyLink::endorse("bob", b2.public(), &b)).unwrap();
        assert_eq!(s.public_key("bob").unwrap(), b2.public());
        assert_eq!(s.key_chain("bob").unwrap().len(), 2);
    }

    #[test]
    fn journal_replays_after_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sync.db");
        let a = generate_keypair().unwrap();
        let b = generate_keypair().unwrap();
        let digest;
        {
            let mut s = Synchronizer::open(&path, Clock::manual(0), config()).unwrap();
            s.register_user("alice", a.public(), "pw").unwrap();
            s.register_user("bob", b.public(), "pw").unwrap();
            s.deposit_key("alice", key_rec(&a, &b, 4, 1)).unwrap();
            s.send_row("alice", RowSubmission::signed(4, 1, "alice", "bob", vec![9], &a)).unwrap();
            digest = s.storage_digest();
            // dropped without shutdown
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(HEADER));
        let s = Synchronizer::open(&path, Clock::manual(0), config()).unwrap();
        assert_eq!(s.storage_digest(), digest);
        assert_eq!(s.pair_state(4, "bob"), PairState::KeyedPending);
    }
}
