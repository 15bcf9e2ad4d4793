//! Mailbox-backed [`Backend`]. Peers exchange three kinds of messages:
//!
//! - `PK`: the sender's public-key chain.
//! - `DK<dossier>`: a row key wrapped for the recipient. Kept on the server.
//! - `PR<dossier>`: an encrypted row. Deleted once the recipient has stored it.
//!
//! Bodies are uppercase hex of fixed binary layouts:
//!
//! ```text
//! PK  key(64) [key(64) endorsement(64)]*
//! DK  version(8) has_expiry(1) expiry(8) signature(64) wrapped_key(92)
//! PR  version(8) signature(64) ciphertext
//! ```
//!
//! Sender, receiver and dossier come from the message headers and are covered
//! by the signatures.

use std::collections::{BTreeMap, BTreeSet};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use crate::clock::Clock;
use crate::crypto::{
    self, Ciphertext, KeyPair, PublicKey, Signature, SymmetricKey, PUBLIC_KEY_LEN, SIGNATURE_LEN,
};
use crate::protocol::{
    records::chain_is_valid, Backend, KeyLink, KeyListing, PendingRow, ResendRequest, RevokeRequest, RowSubmission,
    SyncError, SyncResult, WrappedKeyRecord,
};
use crate::rowstore::{deserialize_row, parse_script_line, render_encrypted_line, Row, ScriptLine};
use crate::service::wire::{Request, Response};
use crate::transport::{Transport, TransportError};

use super::server::MailMessage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subject {
    PublicKey,
    Key(u64),
    Row(u64),
}

impl Subject {
    pub fn parse(s: &str) -> Option<Subject> {
        if s == "PK" {
            return Some(Subject::PublicKey);
        }
        let (tag, rest) = s.split_at_checked(2)?;
        if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let d = rest.parse().ok()?;
        match tag {
            "DK" => Some(Subject::Key(d)),
            "PR" => Some(Subject::Row(d)),
            _ => None,
        }
    }

    pub fn render(&self) -> String {
        match self {
            Subject::PublicKey => "PK".into(),
            Subject::Key(d) => format!("DK{d}"),
            Subject::Row(d) => format!("PR{d}"),
        }
    }
}

pub fn encode_chain(chain: &[KeyLink]) -> String {
    let mut out = Vec::new();
    for (i, link) in chain.iter().enumerate() {
        out.extend_from_slice(&link.key.to_bytes());
        if i > 0 {
            let sig = link.endorsement.map(|s| s.to_bytes()).unwrap_or([0; SIGNATURE_LEN]);
            out.extend_from_slice(&sig);
        }
    }
    crypto::hex_encode(&out)
}

pub fn decode_chain(body: &str) -> Option<Vec<KeyLink>> {
    let bytes = crypto::hex_decode(body).ok()?;
    if bytes.len() < PUBLIC_KEY_LEN || (bytes.len() - PUBLIC_KEY_LEN) % (PUBLIC_KEY_LEN + SIGNATURE_LEN) != 0 {
        return None;
    }
    let mut chain = vec![KeyLink { key: PublicKey::from_bytes(&bytes[..PUBLIC_KEY_LEN]).ok()?, endorsement: None }];
    for c in bytes[PUBLIC_KEY_LEN..].chunks(PUBLIC_KEY_LEN + SIGNATURE_LEN) {
        chain.push(KeyLink {
            key: PublicKey::from_bytes(&c[..PUBLIC_KEY_LEN]).ok()?,
            endorsement: Some(Signature::from_bytes(&c[PUBLIC_KEY_LEN..]).ok()?),
        });
    }
    Some(chain)
}

pub fn encode_key_body(rec: &WrappedKeyRecord) -> String {
    let mut out = Vec::with_capacity(17 + SIGNATURE_LEN + rec.wrapped_key.len());
    out.extend_from_slice(&rec.key_version.to_be_bytes());
    out.push(u8::from(rec.expiry_ms.is_some()));
    out.extend_from_slice(&rec.expiry_ms.unwrap_or(0).to_be_bytes());
    out.extend_from_slice(&rec.signature.to_bytes());
    out.extend_from_slice(&rec.wrapped_key);
    crypto::hex_encode(&out)
}

/// Rebuilds the signed key record from a `DK` message.
pub fn decode_key_message(m: &MailMessage) -> Option<WrappedKeyRecord> {
    let Some(Subject::Key(dossier_id)) = Subject::parse(&m.subject) else { return None };
    let b = crypto::hex_decode(&m.body).ok()?;
    if b.len() <= 17 + SIGNATURE_LEN {
        return None;
    }
    let key_version = u64::from_be_bytes(b[..8].try_into().ok()?);
    let expiry_ms = match b[8] {
        0 => None,
        1 => Some(u64::from_be_bytes(b[9..17].try_into().ok()?)),
        _ => return None,
    };
    Some(WrappedKeyRecord {
        dossier_id,
        key_version,
        sender: m.from.clone(),
        receiver: m.to.clone(),
        expiry_ms,
        signature: Signature::from_bytes(&b[17..17 + SIGNATURE_LEN]).ok()?,
        wrapped_key: b[17 + SIGNATURE_LEN..].to_vec(),
    })
}

pub fn encode_row_body(sub: &RowSubmission) -> String {
    let mut out = Vec::with_capacity(8 + SIGNATURE_LEN + sub.encrypted_row.len());
    out.extend_from_slice(&sub.key_version.to_be_bytes());
    out.extend_from_slice(&sub.signature.to_bytes());
    out.extend_from_slice(&sub.encrypted_row);
    crypto::hex_encode(&out)
}

pub fn decode_row_message(m: &MailMessage) -> Option<RowSubmission> {
    let Some(Subject::Row(dossier_id)) = Subject::parse(&m.subject) else { return None };
    let b = crypto::hex_decode(&m.body).ok()?;
    if b.len() <= 8 + SIGNATURE_LEN {
        return None;
    }
    Some(RowSubmission {
        dossier_id,
        key_version: u64::from_be_bytes(b[..8].try_into().ok()?),
        sender: m.from.clone(),
        receiver: m.to.clone(),
        signature: Signature::from_bytes(&b[8..8 + SIGNATURE_LEN]).ok()?,
        encrypted_row: b[8 + SIGNATURE_LEN..].to_vec(),
    })
}

/// How many messages each handler took during receive passes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandlerCounts {
    pub public_keys: u64,
    pub keys: u64,
    pub rows: u64,
    /// Well-formed subjects whose body could not be used.
    pub failed: u64,
    /// Messages with an unknown subject, left unread.
    pub skipped: u64,
}

#[derive(Debug, Clone)]
pub struct DkEntry {
    pub owner: String,
    pub key_version: u64,
    pub key: SymmetricKey,
}

/// Durable part of a mailbox client. The key map and row list are rebuilt
/// from the mailbox after a restart.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MailboxSnapshot {
    pub own_chain: Vec<KeyLink>,
    pub pk_map: BTreeMap<String, Vec<KeyLink>>,
    pub pk_sent: BTreeSet<String>,
    pub collaborators: BTreeSet<String>,
    pub sent_versions: BTreeMap<String, BTreeMap<u64, u64>>,
}

pub struct MailboxBackend<T> {
    transport: T,
    clock: Clock,
    session: Option<String>,
    credentials: Option<(String, String)>,
    user: String,
    keys: Vec<KeyPair>,
    state: MailboxSnapshot,
    dk_map: BTreeMap<u64, DkEntry>,
    pr_list: Vec<String>,
    pr_seen: BTreeSet<u64>,
    skipped: BTreeSet<u64>,
    fresh: bool,
    counts: HandlerCounts,
}

impl<T: Transport> MailboxBackend<T> {
    pub fn new(transport: T, clock: Clock) -> Self {
        MailboxBackend {
            transport,
            clock,
            session: None,
            credentials: None,
            user: String::new(),
            keys: Vec::new(),
            state: MailboxSnapshot::default(),
            dk_map: BTreeMap::new(),
            pr_list: Vec::new(),
            pr_seen: BTreeSet::new(),
            skipped: BTreeSet::new(),
            fresh: true,
            counts: HandlerCounts::default(),
        }
    }

    pub fn with_snapshot(mut self, snapshot: MailboxSnapshot) -> Self {
        self.state = snapshot;
        self
    }

    pub fn snapshot(&self) -> &MailboxSnapshot {
        &self.state
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    pub fn counts(&self) -> HandlerCounts {
        self.counts
    }

    pub fn dk_map(&self) -> &BTreeMap<u64, DkEntry> {
        &self.dk_map
    }

    pub fn pr_list(&self) -> &[String] {
        &self.pr_list
    }

    pub fn known_peers(&self) -> impl Iterator<Item = &str> {
        self.state.pk_map.keys().map(String::as_str)
    }

    pub fn add_collaborator(&mut self, user: &str) {
        self.state.collaborators.insert(user.to_string());
    }

    /// Forgets the volatile maps, as after a process restart. The next receive
    /// pass reads the whole mailbox again.
    pub fn restart(&mut self) {
        self.dk_map.clear();
        self.pr_list.clear();
        self.pr_seen.clear();
        self.fresh = true;
    }

    fn raw_call(&mut self, op: &str, payload: Value) -> SyncResult<Value> {
        let req = Request { op: op.to_string(), session: self.session.clone(), payload };
        let line = serde_json::to_string(&req).expect("requests serialize");
        let reply = self.transport.call(&line).map_err(|e| match e {
            TransportError::Unreachable(m) | TransportError::Lost(m) => SyncError::Unreachable(m),
        })?;
        let resp: Response = serde_json::from_str(&reply).map_err(|e| SyncError::Protocol(e.to_string()))?;
        if resp.ok {
            Ok(resp.payload)
        } else {
            Err(resp.error.unwrap_or_else(|| SyncError::Protocol("error without detail".into())))
        }
    }

    fn call<R: DeserializeOwned>(&mut self, op: &str, payload: Value) -> SyncResult<R> {
        let v = match self.raw_call(op, payload.clone()) {
            Err(SyncError::SessionExpired) if self.credentials.is_some() => {
                self.relogin()?;
                self.raw_call(op, payload)?
            }
            other => other?,
        };
        serde_json::from_value(v).map_err(|e| SyncError::Protocol(e.to_string()))
    }

    fn relogin(&mut self) -> SyncResult<()> {
        let (user, password) = self.credentials.clone().ok_or(SyncError::SessionExpired)?;
        let v = self.raw_call("login", json!({"user": user, "password": password}))?;
        self.session = Some(serde_json::from_value(v).map_err(|e| SyncError::Protocol(e.to_string()))?);
        Ok(())
    }

    fn append(&mut self, to: &str, subject: &Subject, body: &str) -> SyncResult<u64> {
        self.call("append", json!({"to": to, "subject": subject.render(), "body": body}))
    }

    fn delete_sent(&mut self, to: &str, subject: &Subject) -> SyncResult<usize> {
        self.call("delete_sent", json!({"to": to, "subject": subject.render()}))
    }

    fn list(&mut self, prefix: &str, unread_only: bool) -> SyncResult<Vec<MailMessage>> {
        self.call("list", json!({"prefix": prefix, "unread_only": unread_only}))
    }

    fn delete(&mut self, id: u64) -> SyncResult<()> {
        match self.call::<Value>("delete", json!({ "id": id })) {
            Ok(_) | Err(SyncError::NotFound(_)) => Ok(()),
            Err(e) => Err(e),
        }
    }

    fn mark_read(&mut self, id: u64) -> SyncResult<()> {
        self.call::<Value>("mark_read", json!({ "id": id })).map(drop)
    }

    fn send_pk(&mut self, to: &str) -> SyncResult<()> {
        let body = encode_chain(&self.state.own_chain);
        self.append(to, &Subject::PublicKey, &body)?;
        self.state.pk_sent.insert(to.to_string());
        Ok(())
    }

    /// Sends the own public key to every collaborator that has not had it
    /// yet. Collaborators without an account are skipped. Returns how many
    /// were sent.
    pub fn announce(&mut self) -> SyncResult<usize> {
        let pending: Vec<String> =
            self.state.collaborators.iter().filter(|c| !self.state.pk_sent.contains(*c)).cloned().collect();
        let mut sent = 0;
        for peer in pending {
            match self.send_pk(&peer) {
                Ok(()) => sent += 1,
                Err(SyncError::UnknownUser(_)) => debug!(peer, "collaborator has no mailbox yet"),
                Err(e) => return Err(e),
            }
        }
        Ok(sent)
    }

    fn ensure_pk_sent(&mut self, to: &str) -> SyncResult<()> {
        self.state.collaborators.insert(to.to_string());
        if !self.state.pk_sent.contains(to) {
            self.send_pk(to)?;
        }
        Ok(())
    }

    /// Public keys first, then every key, then every row.
    pub fn send_updates(&mut self, batch: &[(WrappedKeyRecord, RowSubmission)]) -> SyncResult<Vec<u64>> {
        for (key, _) in batch {
            self.ensure_pk_sent(&key.receiver)?;
        }
        for (key, _) in batch {
            self.deposit_key(key)?;
        }
        batch.iter().map(|(_, row)| self.send_row(row)).collect()
    }

    fn manage_pk(&mut self, m: &MailMessage) -> SyncResult<()> {
        match decode_chain(&m.body).filter(|c| chain_is_valid(&m.from, c)) {
            Some(chain) => {
                self.state.pk_map.insert(m.from.clone(), chain);
                self.counts.public_keys += 1;
                self.delete(m.id)
            }
            None => {
                warn!(id = m.id, from = %m.from, "unusable public-key message kept");
                self.counts.failed += 1;
                self.mark_read(m.id)
            }
        }
    }

    fn manage_dk(&mut self, m: &MailMessage) -> SyncResult<()> {
        let unwrapped = decode_key_message(m).and_then(|rec| {
            self.keys
                .iter()
                .find_map(|k| crypto::unwrap_key(&rec.wrapped_key, k).ok())
                .map(|key| (rec, key))
        });
        match unwrapped {
            Some((rec, key)) => {
                let newer = self.dk_map.get(&rec.dossier_id).is_none_or(|e| e.key_version <= rec.key_version);
                if newer {
                    self.dk_map
                        .insert(rec.dossier_id, DkEntry { owner: rec.sender.clone(), key_version: rec.key_version, key });
                }
                self.counts.keys += 1;
            }
            None => {
                warn!(id = m.id, subject = %m.subject, "key message not usable here");
                self.counts.failed += 1;
            }
        }
        self.mark_read(m.id)
    }

    fn manage_pr(&mut self, m: &MailMessage) -> SyncResult<Option<PendingRow>> {
        let Some(row) = decode_row_message(m) else {
            warn!(id = m.id, "malformed row message kept");
            self.counts.failed += 1;
            self.mark_read(m.id)?;
            return Ok(None);
        };
        if self.pr_seen.insert(m.id) {
            if let Ok(ct) = Ciphertext::from_bytes(&row.encrypted_row) {
                self.pr_list.push(render_encrypted_line(row.dossier_id, &ct));
            }
            self.counts.rows += 1;
            self.mark_read(m.id)?;
        }
        Ok(Some(PendingRow { id: m.id, submitted_at_ms: m.arrived_ms, row }))
    }

    /// Reads the mailbox and dispatches every message by subject. The first
    /// pass after a start reads everything, later passes only unread mail.
    /// Row messages stay until acknowledged.
    pub fn receive_update(&mut self) -> SyncResult<Vec<PendingRow>> {
        let mut messages = self.list("", !self.fresh)?;
        // Rows handed out earlier but not acknowledged yet.
        if !self.fresh {
            let known: BTreeSet<u64> = messages.iter().map(|m| m.id).collect();
            for m in self.list("PR", false)? {
                if self.pr_seen.contains(&m.id) && !known.contains(&m.id) {
                    messages.push(m);
                }
            }
            messages.sort_by_key(|m| m.id);
        }
        self.fresh = false;
        let mut rows = Vec::new();
        for m in messages {
            match Subject::parse(&m.subject) {
                Some(Subject::PublicKey) => self.manage_pk(&m)?,
                Some(Subject::Key(_)) => self.manage_dk(&m)?,
                Some(Subject::Row(_)) => rows.extend(self.manage_pr(&m)?),
                None => {
                    if self.skipped.insert(m.id) {
                        warn!(id = m.id, subject = %m.subject, "unknown subject, left unread");
                        self.counts.skipped += 1;
                    }
                }
            }
        }
        Ok(rows)
    }

    /// Deletes row messages whose rows are stored.
    pub fn acknowledge(&mut self, ids: &[u64]) -> SyncResult<()> {
        for &id in ids {
            self.delete(id)?;
            self.pr_seen.remove(&id);
        }
        Ok(())
    }

    /// Decrypts every row list entry whose key is in the key map. Entries
    /// without a key stay encrypted in the list.
    pub fn decrypt_pr_list(&mut self) -> Vec<(u64, Row)> {
        let mut out = Vec::new();
        let mut keep = Vec::new();
        for line in std::mem::take(&mut self.pr_list) {
            let opened = match parse_script_line(&line) {
                Ok(ScriptLine::EncryptedRow { id, hex_payload }) => self.dk_map.get(&id).and_then(|e| {
                    let ct = Ciphertext::from_hex(&hex_payload).ok()?;
                    let plain = crypto::decrypt_row(&ct, &e.key).ok()?;
                    deserialize_row(&plain).ok().map(|r| (id, r))
                }),
                _ => None,
            };
            match opened {
                Some(r) => out.push(r),
                None => keep.push(line),
            }
        }
        self.pr_list = keep;
        out
    }

    fn process_public_keys(&mut self) -> SyncResult<()> {
        for m in self.list("PK", false)? {
            if m.subject == "PK" {
                self.manage_pk(&m)?;
            }
        }
        Ok(())
    }
}

impl<T: Transport> Backend for MailboxBackend<T> {
    fn register(&mut self, user: &str, keys: &KeyPair, password: &str) -> SyncResult<()> {
        self.call::<Value>("register", json!({"user": user, "password": password}))?;
        self.state.own_chain = vec![KeyLink { key: keys.public(), endorsement: None }];
        self.login(user, keys, password)
    }

    fn login(&mut self, user: &str, keys: &KeyPair, password: &str) -> SyncResult<()> {
        self.credentials = Some((user.to_string(), password.to_string()));
        self.relogin()?;
        self.user = user.to_string();
        if self.keys.first().map(|k| k.public()) != Some(keys.public()) {
            self.keys.insert(0, keys.clone());
        }
        if self.state.own_chain.is_empty() {
            self.state.own_chain.push(KeyLink { key: keys.public(), endorsement: None });
        }
        Ok(())
    }

    fn key_chain(&mut self, user: &str) -> SyncResult<Vec<KeyLink>> {
        if user == self.user {
            return Ok(self.state.own_chain.clone());
        }
        if !self.state.pk_map.contains_key(user) {
            self.process_public_keys()?;
        }
        self.state.pk_map.get(user).cloned().ok_or_else(|| SyncError::UnknownUser(user.to_string()))
    }

    fn rotate_key(&mut self, link: KeyLink, new_keys: &KeyPair) -> SyncResult<()> {
        self.state.own_chain.push(link);
        self.keys.insert(0, new_keys.clone());
        let peers: Vec<String> = self.state.pk_sent.iter().cloned().collect();
        for peer in peers {
            self.send_pk(&peer)?;
        }
        Ok(())
    }

    fn deposit_key(&mut self, rec: &WrappedKeyRecord) -> SyncResult<()> {
        let held = self.state.sent_versions.get(&rec.receiver).and_then(|m| m.get(&rec.dossier_id)).copied();
        if held.is_some_and(|v| v > rec.key_version) {
            return Ok(());
        }
        self.ensure_pk_sent(&rec.receiver)?;
        let subject = Subject::Key(rec.dossier_id);
        self.delete_sent(&rec.receiver, &subject)?;
        self.append(&rec.receiver, &subject, &encode_key_body(rec))?;
        self.state.sent_versions.entry(rec.receiver.clone()).or_default().insert(rec.dossier_id, rec.key_version);
        Ok(())
    }

    fn send_row(&mut self, sub: &RowSubmission) -> SyncResult<u64> {
        let subject = Subject::Row(sub.dossier_id);
        self.delete_sent(&sub.receiver, &subject)?;
        self.append(&sub.receiver, &subject, &encode_row_body(sub))
    }

    fn publish(&mut self, batch: &[(WrappedKeyRecord, RowSubmission)]) -> SyncResult<Vec<u64>> {
        self.send_updates(batch)
    }

    fn fetch_pending(&mut self, ack: &[u64]) -> SyncResult<Vec<PendingRow>> {
        self.acknowledge(ack)?;
        self.receive_update()
    }

    fn header_id(&self, row: &PendingRow) -> u64 {
        row.row.dossier_id
    }

    fn fetch_key(&mut self, owner: &str, dossier_id: u64, key_version: u64) -> SyncResult<WrappedKeyRecord> {
        let subject = Subject::Key(dossier_id).render();
        let newest = self
            .list(&subject, false)?
            .iter()
            .filter(|m| m.subject == subject && m.from == owner)
            .filter_map(decode_key_message)
            .max_by_key(|r| r.key_version);
        let Some(rec) = newest else {
            self.dk_map.remove(&dossier_id);
            return Err(SyncError::KeyNotFound);
        };
        if rec.key_version > key_version {
            return Err(SyncError::Superseded);
        }
        if rec.key_version < key_version {
            return Err(SyncError::KeyNotFound);
        }
        if rec.expiry_ms.is_some_and(|t| t <= self.clock.now_ms()) {
            return Err(SyncError::Expired);
        }
        Ok(rec)
    }

    fn revoke(&mut self, req: &RevokeRequest) -> SyncResult<()> {
        let keys = self.delete_sent(&req.receiver, &Subject::Key(req.dossier_id))?;
        let rows = self.delete_sent(&req.receiver, &Subject::Row(req.dossier_id))?;
        if let Some(m) = self.state.sent_versions.get_mut(&req.receiver) {
            m.remove(&req.dossier_id);
        }
        if keys + rows == 0 {
            return Err(SyncError::NotFound(format!("key for {} on dossier {}", req.receiver, req.dossier_id)));
        }
        Ok(())
    }

    fn request_resend(&mut self, _owner: &str, _dossier_id: u64) -> SyncResult<()> {
        Err(SyncError::Unsupported("resend over a mailbox".into()))
    }

    fn resend_requests(&mut self) -> SyncResult<Vec<ResendRequest>> {
        Ok(Vec::new())
    }

    fn list_keys(&mut self) -> SyncResult<Vec<KeyListing>> {
        let sent: Vec<MailMessage> = self.call("list_sent", json!({"prefix": "DK"}))?;
        let mut out: Vec<KeyListing> = sent
            .iter()
            .filter_map(decode_key_message)
            .map(|r| KeyListing { dossier_id: r.dossier_id, receiver: r.receiver, key_version: r.key_version })
            .collect();
        out.sort();
        Ok(out)
    }

    fn introduce(&mut self, peers: &[String]) -> SyncResult<()> {
        for p in peers {
            if *p != self.user {
                self.state.collaborators.insert(p.clone());
            }
        }
        self.announce().map(drop)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subjects() {
        assert_eq!(Subject::parse("PK"), Some(Subject::PublicKey));
        assert_eq!(Subject::parse("DK42"), Some(Subject::Key(42)));
        assert_eq!(Subject::parse("PR7"), Some(Subject::Row(7)));
        for bad in ["", "PK1", "DK", "DK-1", "DKx", "XX3", "pr3", "DK 3"] {
            assert_eq!(Subject::parse(bad), None, "{bad}");
        }
        assert_eq!(Subject::Key(9).render(), "DK9");
    }

    #[test]
    fn chain_body_round_trip() {
        let a = crypto::generate_keypair().unwrap();
        let b = crypto::generate_keypair().unwrap();
        let chain = vec![KeyLink { key: a.public(), endorsement: None }, KeyLink::endorse("u", b.public(), &a)];
        let body = encode_chain(&chain[..1]);
        assert_eq!(body, a.public().to_hex());
        assert_eq!(decode_chain(&encode_chain(&chain)).unwrap(), chain);
        assert!(decode_chain("ABC").is_none());
    }

    #[test]
    fn key_and_row_bodies_round_trip() {
        let k = crypto::generate_keypair().unwrap();
        let row_key = crypto::generate_row_key().unwrap();
        let wrapped = crypto::wrap_key(&row_key, &k.public()).unwrap();
        let rec = WrappedKeyRecord::signed(5, 2, "a", "b", Some(99), wrapped, &k);
        let m = MailMessage {
            id: 1,
            from: "a".into(),
            to: "b".into(),
            subject: "DK5".into(),
            body: encode_key_body(&rec),
            read: false,
            arrived_ms: 0,
        };
        // 8 + 1 + 8 + 64 + 92 bytes, hex doubled.
        assert_eq!(m.body.len(), 346);
        assert_eq!(decode_key_message(&m).unwrap(), rec);

        let ct = crypto::encrypt_row(b"x", &row_key).unwrap();
        let sub = RowSubmission::signed(5, 2, "a", "b", ct.to_bytes(), &k);
        let m = MailMessage { subject: "PR5".into(), body: encode_row_body(&sub), ..m };
        assert_eq!(decode_row_message(&m).unwrap(), sub);
        assert!(decode_key_message(&m).is_none());
    }
}
