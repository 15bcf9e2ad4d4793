//! The client agent: owner-side grant/send/revoke and receiver-side
//! receive/use over any [`Backend`].
//!
//! Shared rows are stored exactly as delivered (ciphertext) under a header id
//! chosen by the backend. A delivery index maps each header id to the owner,
//! dossier and key version it carries. Decrypting keys live only in the
//! volatile key cache.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{debug, warn};

use super::backend::Backend;
use super::records::{
    chain_is_valid, KeyLink, ResendRequest, RevokeRequest, RowSubmission, SyncError, UserId,
    WrappedKeyRecord,
};
use crate::clock::Clock;
use crate::crypto::{
    self, encrypt_row, generate_keypair, generate_row_key, hex_bytes, unwrap_key, wrap_key,
    Ciphertext, CryptoError, KeyPair, PublicKey, SymmetricKey,
};
use crate::rowstore::{
    serialize_row, KeyLookup, MemoryFiles, OpenReport, Origin, Row, Store, StoreError,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Sync(#[from] SyncError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("unknown dossier {0}")]
    UnknownDossier(u64),
    #[error("dossier {0} already exists")]
    DuplicateDossier(u64),
    #[error("dossier {0} has not been received")]
    NotReceived(u64),
    #[error("no grant for {receiver} on dossier {dossier_id}")]
    NoGrant { dossier_id: u64, receiver: UserId },
    #[error("dossier {0} still has grants")]
    StillShared(u64),
    #[error("grant must include the primary key column {0}")]
    MissingPkColumn(String),
    #[error("unknown column {0}")]
    UnknownColumn(String),
    #[error("public key of {0} does not extend the pinned key")]
    KeyMismatch(UserId),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("key for dossier {0} is not available yet")]
    KeyUnavailable(u64),
    #[error("no held private key opens the key for dossier {0}")]
    KeyUnusable(u64),
    #[error("profile: {0}")]
    Profile(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl ClientError {
    pub fn is_key_not_found(&self) -> bool {
        matches!(self, ClientError::Sync(SyncError::KeyNotFound))
    }

    pub fn is_unreachable(&self) -> bool {
        matches!(self, ClientError::Sync(SyncError::Unreachable(_)))
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

/// What a receiver does with its ciphertext when the key is gone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RevokePolicy {
    DeleteLocal,
    #[default]
    KeepCached,
}

#[derive(Debug, Clone, Default)]
pub struct ClientConfig {
    pub revoke_policy: RevokePolicy,
    /// Keep superseded private keys after a rotation.
    pub retain_old_keys: bool,
    /// Lifetime of deposited keys; `None` means no expiry.
    pub key_ttl_ms: Option<u64>,
    pub clock: Clock,
}

/// Per-dossier receiver phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ReceiverPhase {
    Idle,
    HasCiphertext,
    HasKey,
    Decrypted,
}

impl ReceiverPhase {
    pub fn number(self) -> u8 {
        match self {
            ReceiverPhase::Idle => 1,
            ReceiverPhase::HasCiphertext => 2,
            ReceiverPhase::HasKey => 3,
            ReceiverPhase::Decrypted => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Cause {
    Receive,
    Use,
    Restart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhaseChange {
    pub dossier_id: u64,
    pub from: ReceiverPhase,
    pub to: ReceiverPhase,
    pub cause: Cause,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessGrant {
    pub dossier_id: u64,
    pub receiver: UserId,
    pub allowed_columns: BTreeSet<String>,
    pub key_version: u64,
}

/// Keeps only the granted columns. Restricted columns are dropped, not
/// blanked.
pub fn project(row: &Row, grant: &AccessGrant) -> Result<Row> {
    if !grant.allowed_columns.contains(row.pk_column()) {
        return Err(ClientError::MissingPkColumn(row.pk_column().to_string()));
    }
    Ok(row.retain_columns(|c| grant.allowed_columns.contains(c)))
}

/// Default dossier id for an owned row.
pub fn dossier_id_for(owner: &str, table: &str, pk: &str) -> u64 {
    let mut h = Sha256::new();
    for part in [owner, table, pk] {
        h.update((part.len() as u32).to_be_bytes());
        h.update(part.as_bytes());
    }
    let d = h.finalize();
    u64::from_be_bytes(d[..8].try_into().expect("8 bytes")) >> 1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct DossierEntry {
    table: String,
    pk: String,
    next_version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct SentKey {
    version: u64,
    /// The key wrapped under the owner's own public key.
    #[serde(with = "hex_bytes")]
    self_wrapped: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Delivery {
    pub owner: UserId,
    pub dossier_id: u64,
    pub key_version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
enum OutboxItem {
    Deposit(WrappedKeyRecord),
    Publish(Vec<(WrappedKeyRecord, RowSubmission)>),
    Revoke(RevokeRequest),
    Resend { owner: UserId, dossier_id: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct ClientState {
    dossiers: BTreeMap<u64, DossierEntry>,
    grants: BTreeMap<u64, BTreeMap<UserId, AccessGrant>>,
    sent_keys: BTreeMap<u64, BTreeMap<UserId, SentKey>>,
    deliveries: BTreeMap<u64, Delivery>,
    pinned: BTreeMap<UserId, Vec<KeyLink>>,
    outbox: Vec<OutboxItem>,
    pending_rotation: Option<KeyLink>,
    /// dossier id -> header of its delivery. Rebuilt on load.
    #[serde(skip)]
    by_dossier: BTreeMap<u64, u64>,
}

impl ClientState {
    fn reindex(&mut self) {
        self.by_dossier = self.deliveries.iter().map(|(h, d)| (d.dossier_id, *h)).collect();
    }

    fn add_delivery(&mut self, header: u64, d: Delivery) {
        self.by_dossier.insert(d.dossier_id, header);
        self.deliveries.insert(header, d);
    }

    fn drop_delivery(&mut self, header: u64) {
        if let Some(d) = self.deliveries.remove(&header) {
            if self.by_dossier.get(&d.dossier_id) == Some(&header) {
                self.by_dossier.remove(&d.dossier_id);
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Identity {
    user: UserId,
    password: String,
    #[serde(with = "hex_bytes")]
    secret: Vec<u8>,
    retired: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientStats {
    pub encryptions: u64,
    pub key_fetches: u64,
    pub rejected_rows: u64,
    pub decryptions: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SendOutcome {
    pub receivers: usize,
    pub queued: bool,
    pub row_ids: Vec<u64>,
}

/// A discrepancy between the owner's grants and the keys the synchronizer
/// reports holding.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AuditFinding {
    MissingKey { dossier_id: u64, receiver: UserId, key_version: u64 },
    UnexpectedKey { dossier_id: u64, receiver: UserId, key_version: u64 },
}

/// Backend-independent view of a client's rows, used to compare stores.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RowSource {
    Owned,
    Shared { owner: UserId, dossier_id: u64, key_version: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicalView {
    pub rows: BTreeMap<(String, String), (Vec<(String, String)>, RowSource)>,
    pub sealed: BTreeSet<Delivery>,
}

const IDENTITY_FILE: &str = "identity.json";
const STATE_FILE: &str = "state.json";
const SNAPSHOT_FILE: &str = "store.script";
const JOURNAL_FILE: &str = "store.log";

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

pub struct Client<B> {
    user: UserId,
    password: String,
    keys: KeyPair,
    retired: Vec<KeyPair>,
    backend: B,
    store: Store,
    state: ClientState,
    cache: BTreeMap<u64, (u64, SymmetricKey)>,
    config: ClientConfig,
    dir: Option<PathBuf>,
    stats: ClientStats,
    trace: Vec<PhaseChange>,
}

impl<B: Backend> Client<B> {
    fn assemble(user: &str, password: &str, keys: KeyPair, backend: B, store: Store, config: ClientConfig, dir: Option<PathBuf>) -> Self {
        Client {
            user: user.to_string(),
            password: password.to_string(),
            keys,
            retired: Vec::new(),
            backend,
            store,
            state: ClientState::default(),
            cache: BTreeMap::new(),
            config,
            dir,
            stats: ClientStats::default(),
            trace: Vec::new(),
        }
    }

    /// Registers a new user whose store lives in memory.
    pub fn register_in_memory(user: &str, password: &str, mut backend: B, config: ClientConfig) -> Result<Self> {
        let keys = generate_keypair()?;
        backend.register(user, &keys, password)?;
        let (store, _) = Store::open_memory(MemoryFiles::default(), &mut crate::rowstore::NoKeys)?;
        Ok(Self::assemble(user, password, keys, backend, store, config, None))
    }

    /// Registers a new user with a profile directory.
    pub fn register_profile(dir: impl AsRef<Path>, user: &str, password: &str, mut backend: B, config: ClientConfig) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        if dir.join(IDENTITY_FILE).exists() {
            return Err(ClientError::Profile(format!("{} already holds a profile", dir.display())));
        }
        fs::create_dir_all(&dir)?;
        let keys = generate_keypair()?;
        backend.register(user, &keys, password)?;
        let (store, _) = Store::open(dir.join(SNAPSHOT_FILE), dir.join(JOURNAL_FILE), &mut crate::rowstore::NoKeys)?;
        let c = Self::assemble(user, password, keys, backend, store, config, Some(dir));
        c.save()?;
        Ok(c)
    }

    /// Opens an existing profile. Shared rows stay encrypted until used.
    /// Logging in is attempted but an unreachable backend is tolerated.
    pub fn open_profile(dir: impl AsRef<Path>, mut backend: B, config: ClientConfig) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let id_text = fs::read_to_string(dir.join(IDENTITY_FILE))
            .map_err(|e| ClientError::Profile(format!("{}: {e}", dir.join(IDENTITY_FILE).display())))?;
        let id: Identity = serde_json::from_str(&id_text).map_err(|e| ClientError::Profile(e.to_string()))?;
        let keys = KeyPair::from_secret_bytes(&id.secret)?;
        let retired = id
            .retired
            .iter()
            .map(|h| crypto::hex_decode(h).and_then(|b| KeyPair::from_secret_bytes(&b)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let state: ClientState = match fs::read_to_string(dir.join(STATE_FILE)) {
            Ok(t) => serde_json::from_str(&t).map_err(|e| ClientError::Profile(e.to_string()))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => ClientState::default(),
            Err(e) => return Err(e.into()),
        };
        match backend.login(&id.user, &keys, &id.password) {
            Ok(()) | Err(SyncError::Unreachable(_)) => {}
            Err(e) => return Err(e.into()),
        }
        let (store, _) = Store::open(dir.join(SNAPSHOT_FILE), dir.join(JOURNAL_FILE), &mut crate::rowstore::NoKeys)?;
        let mut c = Self::assemble(&id.user, &id.password, keys, backend, store, config, Some(dir));
        c.retired = retired;
        c.state = state;
        c.state.reindex();
        Ok(c)
    }

    /// Writes identity and protocol state to the profile directory, if any.
    pub fn save(&self) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let id = Identity {
            user: self.user.clone(),
            password: self.password.clone(),
            secret: self.keys.secret_bytes().to_vec(),
            retired: self.retired.iter().map(|k| crypto::hex_encode(&k.secret_bytes())).collect(),
        };
        write_atomic(&dir.join(IDENTITY_FILE), &serde_json::to_vec_pretty(&id).expect("identity serializes"))?;
        write_atomic(&dir.join(STATE_FILE), &serde_json::to_vec(&self.state).expect("state serializes"))?;
        Ok(())
    }

    /// An independent copy of a memory-backed client talking to `backend`.
    pub fn fork<C: Backend>(&self, backend: C) -> Result<Client<C>> {
        Ok(Client {
            user: self.user.clone(),
            password: self.password.clone(),
            keys: self.keys.clone(),
            retired: self.retired.clone(),
            backend,
            store: self.store.fork()?,
            state: self.state.clone(),
            cache: self.cache.clone(),
            config: self.config.clone(),
            dir: None,
            stats: self.stats,
            trace: self.trace.clone(),
        })
    }

    pub fn user(&self) -> &str {
        &self.user
    }

    pub fn public_key(&self) -> PublicKey {
        self.keys.public()
    }

    pub fn keypair(&self) -> &KeyPair {
        &self.keys
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn backend_mut(&mut self) -> &mut B {
        &mut self.backend
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn config_mut(&mut self) -> &mut ClientConfig {
        &mut self.config
    }

    pub fn stats(&self) -> ClientStats {
        ClientStats { decryptions: self.store.stats().decryptions, ..self.stats }
    }

    pub fn trace(&self) -> &[PhaseChange] {
        &self.trace
    }

    pub fn clear_trace(&mut self) {
        self.trace.clear();
    }

    pub fn profile_dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn outbox_len(&self) -> usize {
        self.state.outbox.len()
    }

    pub fn grants(&self, dossier_id: u64) -> impl Iterator<Item = &AccessGrant> {
        self.state.grants.get(&dossier_id).into_iter().flat_map(|m| m.values())
    }

    /// Version of the last key sent to `receiver` for a dossier.
    pub fn sent_version(&self, dossier_id: u64, receiver: &str) -> Option<u64> {
        self.state.sent_keys.get(&dossier_id)?.get(receiver).map(|s| s.version)
    }

    /// Version of the key cached for a received dossier.
    pub fn cached_version(&self, dossier_id: u64) -> Option<u64> {
        self.cache.get(&dossier_id).map(|(v, _)| *v)
    }

    pub fn owned_dossiers(&self) -> impl Iterator<Item = (u64, &str, &str)> {
        self.state.dossiers.iter().map(|(d, e)| (*d, e.table.as_str(), e.pk.as_str()))
    }

    pub fn deliveries(&self) -> impl Iterator<Item = (u64, &Delivery)> {
        self.state.deliveries.iter().map(|(h, d)| (*h, d))
    }

    // ------------------------------------------------------------------
    // Peer keys
    // ------------------------------------------------------------------

    /// Current public key of a peer. The first chain seen is pinned; later
    /// chains must extend it. Offline, the pinned key is used.
    pub fn peer_key(&mut self, user: &str) -> Result<PublicKey> {
        match self.refresh_chain(user) {
            Err(e) if e.is_unreachable() => match self.state.pinned.get(user) {
                Some(p) => Ok(p.last().expect("pinned chains are non-empty").key),
                None => Err(e),
            },
            other => other,
        }
    }

    fn refresh_chain(&mut self, user: &str) -> Result<PublicKey> {
        let chain = self.backend.key_chain(user)?;
        if !chain_is_valid(user, &chain) {
            return Err(ClientError::Integrity(format!("key chain of {user} is not endorsed")));
        }
        if let Some(pinned) = self.state.pinned.get(user) {
            if chain.len() < pinned.len() || chain[..pinned.len()] != pinned[..] {
                return Err(ClientError::KeyMismatch(user.to_string()));
            }
        }
        let key = chain.last().expect("valid chains are non-empty").key;
        self.state.pinned.insert(user.to_string(), chain);
        Ok(key)
    }

    /// Pins a peer key learned out of band.
    pub fn pin_peer(&mut self, user: &str, key: PublicKey) {
        self.state.pinned.insert(user.to_string(), vec![KeyLink { key, endorsement: None }]);
    }

    /// Checks a signature against every pinned key of `sender`, refreshing
    /// the chain once if needed. Fails only when the chain cannot be fetched.
    fn verify_from(&mut self, sender: &str, check: impl Fn(&PublicKey) -> bool) -> Result<bool> {
        let known = |c: &Self| c.state.pinned.get(sender).is_some_and(|ch| ch.iter().any(|l| check(&l.key)));
        if known(self) {
            return Ok(true);
        }
        // Unknown sender or a rotation we have not seen yet.
        match self.refresh_chain(sender) {
            Ok(_) => Ok(known(self)),
            Err(e) if e.is_unreachable() => Err(e),
            Err(e) => {
                warn!(sender, error = %e, "cannot refresh sender key");
                Ok(false)
            }
        }
    }

    // ------------------------------------------------------------------
    // Outbox
    // ------------------------------------------------------------------

    /// Retries queued operations in order. Stops at the first unreachable
    /// failure. Returns the number of items still queued.
    pub fn flush_outbox(&mut self) -> Result<usize> {
        while let Some(item) = self.state.outbox.first().cloned() {
            let r = match &item {
                OutboxItem::Deposit(rec) => self.backend.deposit_key(rec),
                OutboxItem::Publish(batch) => self.backend.publish(batch).map(drop),
                OutboxItem::Revoke(req) => match self.backend.revoke(req) {
                    Err(SyncError::NotFound(_)) => Ok(()),
                    other => other,
                },
                OutboxItem::Resend { owner, dossier_id } => self.backend.request_resend(owner, *dossier_id),
            };
            match r {
                Err(SyncError::Unreachable(_)) => break,
                Err(e) => {
                    warn!(error = %e, ?item, "dropping queued operation");
                    self.state.outbox.remove(0);
                }
                Ok(()) => {
                    self.state.outbox.remove(0);
                }
            }
        }
        Ok(self.state.outbox.len())
    }

    fn queue_or<T>(&mut self, r: std::result::Result<T, SyncError>, item: OutboxItem) -> Result<Option<T>> {
        match r {
            Ok(v) => Ok(Some(v)),
            Err(SyncError::Unreachable(m)) => {
                debug!(reason = %m, "queueing operation");
                self.state.outbox.push(item);
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    }

    fn online_ready(&mut self) -> bool {
        if self.state.outbox.is_empty() {
            return true;
        }
        matches!(self.flush_outbox(), Ok(0))
    }

    // ------------------------------------------------------------------
    // Owner side
    // ------------------------------------------------------------------

    pub fn create_table(&mut self, table: &str, columns: &[&str]) -> Result<()> {
        Ok(self.store.create_table(table, columns)?)
    }

    /// Inserts an owned row as a new dossier with a derived id.
    pub fn insert(&mut self, row: Row) -> Result<u64> {
        let d = dossier_id_for(&self.user, row.table(), row.pk());
        self.insert_with_id(d, row)
    }

    pub fn insert_with_id(&mut self, dossier_id: u64, row: Row) -> Result<u64> {
        if self.state.dossiers.contains_key(&dossier_id) {
            return Err(ClientError::DuplicateDossier(dossier_id));
        }
        let entry = DossierEntry { table: row.table().to_string(), pk: row.pk().to_string(), next_version: 1 };
        self.store.insert(row)?;
        self.state.dossiers.insert(dossier_id, entry);
        Ok(dossier_id)
    }

    pub fn update(&mut self, dossier_id: u64, row: Row) -> Result<()> {
        let e = self.state.dossiers.get(&dossier_id).ok_or(ClientError::UnknownDossier(dossier_id))?;
        if e.table != row.table() || e.pk != row.pk() {
            return Err(ClientError::UnknownDossier(dossier_id));
        }
        Ok(self.store.update(row)?)
    }

    pub fn delete(&mut self, dossier_id: u64) -> Result<Row> {
        if self.state.grants.get(&dossier_id).is_some_and(|g| !g.is_empty()) {
            return Err(ClientError::StillShared(dossier_id));
        }
        let e = self.state.dossiers.get(&dossier_id).ok_or(ClientError::UnknownDossier(dossier_id))?;
        let row = self.store.delete(&e.table.clone(), &e.pk.clone())?;
        self.state.dossiers.remove(&dossier_id);
        self.state.sent_keys.remove(&dossier_id);
        Ok(row)
    }

    pub fn owned_row(&self, dossier_id: u64) -> Result<&Row> {
        let e = self.state.dossiers.get(&dossier_id).ok_or(ClientError::UnknownDossier(dossier_id))?;
        self.store.get(&e.table, &e.pk).ok_or(ClientError::UnknownDossier(dossier_id))
    }

    fn next_version(&mut self, dossier_id: u64) -> u64 {
        let e = self.state.dossiers.get_mut(&dossier_id).expect("dossier checked by caller");
        let v = e.next_version;
        e.next_version += 1;
        v
    }

    fn expiry(&self) -> Option<u64> {
        self.config.key_ttl_ms.map(|ttl| self.config.clock.now_ms() + ttl)
    }

    fn own_unwrap(&self, blob: &[u8]) -> Option<SymmetricKey> {
        std::iter::once(&self.keys)
            .chain(self.retired.iter())
            .find_map(|k| unwrap_key(blob, k).ok())
    }

    /// Authorizes `receiver` to read the listed columns of a dossier and
    /// deposits a key for them. Re-granting after a revoke re-deposits the
    /// last key actually used for that receiver, so ciphertext it still holds
    /// becomes readable again.
    pub fn grant(&mut self, dossier_id: u64, receiver: &str, columns: &[&str]) -> Result<AccessGrant> {
        let row = self.owned_row(dossier_id)?.clone();
        let allowed: BTreeSet<String> = columns.iter().map(|c| c.to_string()).collect();
        if !allowed.contains(row.pk_column()) {
            return Err(ClientError::MissingPkColumn(row.pk_column().to_string()));
        }
        if let Some(c) = allowed.iter().find(|c| row.get(c).is_none()) {
            return Err(ClientError::UnknownColumn(c.clone()));
        }
        let online = self.online_ready();
        let receiver_key = self.peer_key(receiver)?;
        let previous = self
            .state
            .sent_keys
            .get(&dossier_id)
            .and_then(|m| m.get(receiver))
            .and_then(|s| self.own_unwrap(&s.self_wrapped).map(|k| (s.version, k)));
        let (version, key) = match previous {
            Some(p) => p,
            None => (self.next_version(dossier_id), generate_row_key()?),
        };
        let rec = WrappedKeyRecord::signed(
            dossier_id,
            version,
            &self.user,
            receiver,
            self.expiry(),
            wrap_key(&key, &receiver_key)?,
            &self.keys,
        );
        let grant = AccessGrant { dossier_id, receiver: receiver.to_string(), allowed_columns: allowed, key_version: version };
        self.state.grants.entry(dossier_id).or_default().insert(receiver.to_string(), grant.clone());
        if online {
            let r = self.backend.deposit_key(&rec);
            self.queue_or(r, OutboxItem::Deposit(rec))?;
        } else {
            self.state.outbox.push(OutboxItem::Deposit(rec));
        }
        Ok(grant)
    }

    /// Sends the current version of a dossier to every grantee, each under
    /// a fresh key.
    pub fn send(&mut self, dossier_id: u64) -> Result<SendOutcome> {
        let row = self.owned_row(dossier_id)?.clone();
        let grants: Vec<AccessGrant> = self.grants(dossier_id).cloned().collect();
        if grants.is_empty() {
            return Err(ClientError::NoGrant { dossier_id, receiver: String::new() });
        }
        let online = self.online_ready();
        let mut batch = Vec::with_capacity(grants.len());
        for g in &grants {
            let receiver_key = match self.peer_key(&g.receiver) {
                Ok(k) => k,
                Err(ClientError::Sync(SyncError::Unreachable(_))) => self
                    .state
                    .pinned
                    .get(&g.receiver)
                    .and_then(|c| c.last())
                    .map(|l| l.key)
                    .ok_or_else(|| SyncError::Unreachable(format!("no key for {}", g.receiver)))?,
                Err(e) => return Err(e),
            };
            batch.push(self.seal_for(dossier_id, &row, g, &receiver_key)?);
        }
        let mut outcome = SendOutcome { receivers: batch.len(), queued: false, row_ids: Vec::new() };
        if online {
            let r = self.backend.publish(&batch);
            match self.queue_or(r, OutboxItem::Publish(batch))? {
                Some(ids) => outcome.row_ids = ids,
                None => outcome.queued = true,
            }
        } else {
            self.state.outbox.push(OutboxItem::Publish(batch));
            outcome.queued = true;
        }
        Ok(outcome)
    }

    fn seal_for(&mut self, dossier_id: u64, row: &Row, g: &AccessGrant, receiver_key: &PublicKey) -> Result<(WrappedKeyRecord, RowSubmission)> {
        let version = self.next_version(dossier_id);
        let key = generate_row_key()?;
        let projected = project(row, g)?;
        let ct = encrypt_row(&serialize_row(&projected), &key)?;
        self.stats.encryptions += 1;
        let rec = WrappedKeyRecord::signed(
            dossier_id,
            version,
            &self.user,
            &g.receiver,
            self.expiry(),
            wrap_key(&key, receiver_key)?,
            &self.keys,
        );
        let sub = RowSubmission::signed(dossier_id, version, &self.user, &g.receiver, ct.to_bytes(), &self.keys);
        let self_wrapped = wrap_key(&key, &self.keys.public())?;
        self.state
            .sent_keys
            .entry(dossier_id)
            .or_default()
            .insert(g.receiver.clone(), SentKey { version, self_wrapped });
        if let Some(gr) = self.state.grants.get_mut(&dossier_id).and_then(|m| m.get_mut(&g.receiver)) {
            gr.key_version = version;
        }
        Ok((rec, sub))
    }

    /// Withdraws a receiver's access. Returns false when there was no grant.
    pub fn revoke(&mut self, dossier_id: u64, receiver: &str) -> Result<bool> {
        if !self.state.dossiers.contains_key(&dossier_id) {
            return Err(ClientError::UnknownDossier(dossier_id));
        }
        let had = self.state.grants.get_mut(&dossier_id).and_then(|m| m.remove(receiver)).is_some();
        if !had {
            warn!(dossier_id, receiver, "revoke without grant");
            return Ok(false);
        }
        let req = RevokeRequest::signed(dossier_id, receiver, &self.user, &self.keys);
        let online = self.online_ready();
        if online {
            match self.backend.revoke(&req) {
                Ok(()) | Err(SyncError::NotFound(_)) => {}
                Err(SyncError::Unreachable(_)) => self.state.outbox.push(OutboxItem::Revoke(req)),
                Err(e) => return Err(e.into()),
            }
        } else {
            self.state.outbox.push(OutboxItem::Revoke(req));
        }
        Ok(true)
    }

    /// Serves queued resend requests. Requests without a grant are refused.
    /// Returns (served, refused).
    pub fn process_resend_requests(&mut self) -> Result<(Vec<ResendRequest>, Vec<ResendRequest>)> {
        let requests = self.backend.resend_requests()?;
        let mut served = Vec::new();
        let mut refused = Vec::new();
        for req in requests {
            let grant = self.state.grants.get(&req.dossier_id).and_then(|m| m.get(&req.receiver)).cloned();
            let (Some(g), Ok(row)) = (grant, self.owned_row(req.dossier_id).cloned()) else {
                refused.push(req);
                continue;
            };
            let key = self.peer_key(&g.receiver)?;
            let item = self.seal_for(req.dossier_id, &row, &g, &key)?;
            self.backend.publish(std::slice::from_ref(&item))?;
            served.push(req);
        }
        Ok((served, refused))
    }

    /// Compares the owner's grants with what the synchronizer holds.
    pub fn audit(&mut self) -> Result<Vec<AuditFinding>> {
        let listed: BTreeSet<(u64, String, u64)> = self
            .backend
            .list_keys()?
            .into_iter()
            .map(|k| (k.dossier_id, k.receiver, k.key_version))
            .collect();
        let expected: BTreeSet<(u64, String, u64)> = self
            .state
            .grants
            .values()
            .flat_map(|m| m.values())
            .map(|g| (g.dossier_id, g.receiver.clone(), g.key_version))
            .collect();
        let mut out: Vec<AuditFinding> = expected
            .difference(&listed)
            .map(|(d, r, v)| AuditFinding::MissingKey { dossier_id: *d, receiver: r.clone(), key_version: *v })
            .collect();
        out.extend(
            listed
                .difference(&expected)
                .map(|(d, r, v)| AuditFinding::UnexpectedKey { dossier_id: *d, receiver: r.clone(), key_version: *v }),
        );
        Ok(out)
    }

    // ------------------------------------------------------------------
    // Key rotation
    // ------------------------------------------------------------------

    /// Replaces the own key pair locally without telling anyone yet.
    pub fn rotate_keypair_local(&mut self) -> Result<KeyLink> {
        let new = generate_keypair()?;
        let link = KeyLink::endorse(&self.user, new.public(), &self.keys);
        // Keys sent as owner are re-wrapped for the new pair.
        for m in self.state.sent_keys.values_mut() {
            for s in m.values_mut() {
                if let Ok(k) = unwrap_key(&s.self_wrapped, &self.keys) {
                    s.self_wrapped = wrap_key(&k, &new.public())?;
                }
            }
        }
        let old = std::mem::replace(&mut self.keys, new);
        if self.config.retain_old_keys {
            self.retired.push(old);
        }
        self.state.pending_rotation = Some(link);
        Ok(link)
    }

    /// Publishes a locally rotated key.
    pub fn publish_rotation(&mut self) -> Result<()> {
        if let Some(link) = self.state.pending_rotation {
            self.backend.rotate_key(link, &self.keys)?;
            self.state.pending_rotation = None;
        }
        Ok(())
    }

    pub fn rotate_keypair(&mut self) -> Result<()> {
        self.rotate_keypair_local()?;
        self.publish_rotation()
    }

    pub fn retired_key_count(&self) -> usize {
        self.retired.len()
    }

    pub fn discard_retired_keys(&mut self) {
        self.retired.clear();
    }

    // ------------------------------------------------------------------
    // Receiver side
    // ------------------------------------------------------------------

    fn header_of(&self, dossier_id: u64) -> Option<(u64, Delivery)> {
        let h = *self.state.by_dossier.get(&dossier_id)?;
        self.state.deliveries.get(&h).map(|d| (h, d.clone()))
    }

    pub fn phase(&self, dossier_id: u64) -> ReceiverPhase {
        match self.header_of(dossier_id) {
            None => ReceiverPhase::Idle,
            Some((h, _)) if self.store.is_loaded(h) => ReceiverPhase::Decrypted,
            Some(_) if self.cache.contains_key(&dossier_id) => ReceiverPhase::HasKey,
            Some(_) => ReceiverPhase::HasCiphertext,
        }
    }

    fn record(&mut self, dossier_id: u64, from: ReceiverPhase, to: ReceiverPhase, cause: Cause) {
        self.trace.push(PhaseChange { dossier_id, from, to, cause });
    }

    /// Fetches pending rows, stores them still encrypted, and acknowledges
    /// them once stored. Returns the number of rows stored.
    pub fn receive(&mut self) -> Result<usize> {
        self.online_ready();
        let mut stored = 0;
        let mut ack: Vec<u64> = Vec::new();
        loop {
            let rows = self.backend.fetch_pending(&ack)?;
            ack.clear();
            if rows.is_empty() {
                break;
            }
            for p in rows {
                ack.push(p.id);
                let sub = &p.row;
                if sub.receiver != self.user {
                    warn!(id = p.id, "row addressed to someone else");
                    self.stats.rejected_rows += 1;
                    continue;
                }
                let sender = sub.sender.clone();
                let msg = sub.message();
                let sig = sub.signature;
                let verified = match self.verify_from(&sender, |k| crypto::verify(&msg, &sig, k)) {
                    Ok(v) => v,
                    Err(e) => {
                        // Leave this row and the rest unacknowledged.
                        ack.pop();
                        self.save()?;
                        return Err(e);
                    }
                };
                if !verified {
                    warn!(id = p.id, sender = %sender, "rejecting row with bad signature");
                    self.stats.rejected_rows += 1;
                    continue;
                }
                let Ok(ct) = Ciphertext::from_bytes(&sub.encrypted_row) else {
                    self.stats.rejected_rows += 1;
                    continue;
                };
                let header = self.backend.header_id(&p);
                let dossier_id = sub.dossier_id;
                let from = self.phase(dossier_id);
                if let Some((old_h, old)) = self.header_of(dossier_id) {
                    if old.owner != sender || old.key_version > sub.key_version {
                        debug!(dossier_id, "ignoring older or foreign delivery");
                        continue;
                    }
                    if old_h != header {
                        self.store.remove_shared(old_h)?;
                        self.state.drop_delivery(old_h);
                    }
                }
                self.cache.remove(&dossier_id);
                self.store.put_sealed(header, &ct)?;
                self.state.add_delivery(
                    header,
                    Delivery { owner: sender, dossier_id, key_version: sub.key_version },
                );
                self.record(dossier_id, from, ReceiverPhase::HasCiphertext, Cause::Receive);
                stored += 1;
            }
            self.save()?;
        }
        Ok(stored)
    }

    fn open_key(&mut self, d: &Delivery, rec: &WrappedKeyRecord) -> Result<SymmetricKey> {
        if rec.dossier_id != d.dossier_id
            || rec.key_version != d.key_version
            || rec.receiver != self.user
            || rec.sender != d.owner
        {
            return Err(ClientError::Integrity(format!("key record for dossier {} does not match", d.dossier_id)));
        }
        let msg = rec.message();
        let sig = rec.signature;
        if !self.verify_from(&d.owner, |k| crypto::verify(&msg, &sig, k))? {
            return Err(ClientError::Integrity(format!("key for dossier {} has a bad signature", d.dossier_id)));
        }
        self.own_unwrap(&rec.wrapped_key).ok_or(ClientError::KeyUnusable(d.dossier_id))
    }

    /// Fetches the key for a received dossier and decrypts it into memory.
    pub fn use_dossier(&mut self, dossier_id: u64) -> Result<Row> {
        let (header, delivery) = self.header_of(dossier_id).ok_or(ClientError::NotReceived(dossier_id))?;
        let from = self.phase(dossier_id);
        self.stats.key_fetches += 1;
        let fetched = self.backend.fetch_key(&delivery.owner, dossier_id, delivery.key_version);
        let key = match fetched {
            Ok(rec) => self.open_key(&delivery, &rec)?,
            Err(SyncError::Unreachable(m)) => match self.cache.get(&dossier_id) {
                Some((v, k)) if *v == delivery.key_version => k.clone(),
                _ => return Err(SyncError::Unreachable(m).into()),
            },
            Err(e) => {
                self.cache.remove(&dossier_id);
                let revoked = e == SyncError::KeyNotFound;
                let to = if revoked && self.config.revoke_policy == RevokePolicy::DeleteLocal {
                    self.store.remove_shared(header)?;
                    self.state.drop_delivery(header);
                    self.save()?;
                    ReceiverPhase::Idle
                } else {
                    self.store.reseal(header)?;
                    ReceiverPhase::HasCiphertext
                };
                if from != to || to == ReceiverPhase::HasCiphertext {
                    self.record(dossier_id, from, to, Cause::Use);
                }
                return Err(match e {
                    SyncError::Superseded => ClientError::KeyUnavailable(dossier_id),
                    other => other.into(),
                });
            }
        };
        if from == ReceiverPhase::Decrypted {
            if let Some(row) = self.store.shared_row(header) {
                self.cache.insert(dossier_id, (delivery.key_version, key));
                return Ok(row.clone());
            }
        }
        self.cache.insert(dossier_id, (delivery.key_version, key.clone()));
        self.record(dossier_id, from, ReceiverPhase::HasKey, Cause::Use);
        match self.store.unseal(header, &key) {
            Ok(row) => {
                let row = row.clone();
                self.record(dossier_id, ReceiverPhase::HasKey, ReceiverPhase::Decrypted, Cause::Use);
                Ok(row)
            }
            Err(e) => {
                self.cache.remove(&dossier_id);
                self.record(dossier_id, ReceiverPhase::HasKey, ReceiverPhase::HasCiphertext, Cause::Use);
                Err(e.into())
            }
        }
    }

    /// Asks the owner of a dossier to send it again.
    pub fn request_resend(&mut self, owner: &str, dossier_id: u64) -> Result<bool> {
        let r = self.backend.request_resend(owner, dossier_id);
        let queued = self
            .queue_or(r, OutboxItem::Resend { owner: owner.to_string(), dossier_id })?
            .is_none();
        Ok(!queued)
    }

    /// Simulates a process restart: writes the snapshot, drops everything
    /// volatile, and reopens the store. With `eager`, keys are fetched during
    /// open and every available shared row is decrypted.
    pub fn restart(&mut self, eager: bool) -> Result<OpenReport> {
        for (d, phase) in self.state.deliveries.values().map(|d| d.dossier_id).map(|d| (d, self.phase(d))).collect::<Vec<_>>() {
            if phase > ReceiverPhase::HasCiphertext {
                self.record(d, phase, ReceiverPhase::HasCiphertext, Cause::Restart);
            }
        }
        let placeholder = Store::open_memory(MemoryFiles::default(), &mut crate::rowstore::NoKeys)?.0;
        let old = std::mem::replace(&mut self.store, placeholder);
        let memory = old.memory_files().is_some();
        let paths = old.paths().map(|(s, j)| (s.to_path_buf(), j.to_path_buf()));
        let snapshot = old.shutdown()?;
        self.cache.clear();
        self.save()?;

        let deliveries = self.state.deliveries.clone();
        let policy = self.config.revoke_policy;
        let mut fetched: BTreeMap<u64, SymmetricKey> = BTreeMap::new();
        let mut fetch_count = 0;
        let mut resolver = |id: u64| -> KeyLookup {
            if !eager {
                return KeyLookup::Unavailable;
            }
            let Some(d) = deliveries.get(&id) else { return KeyLookup::Unavailable };
            fetch_count += 1;
            match self.backend.fetch_key(&d.owner, d.dossier_id, d.key_version) {
                Ok(rec) => match self.open_key(d, &rec) {
                    Ok(k) => {
                        fetched.insert(d.dossier_id, k.clone());
                        KeyLookup::Key(k)
                    }
                    Err(e) => {
                        warn!(id, error = %e, "cannot open key during restart");
                        KeyLookup::Unavailable
                    }
                },
                Err(SyncError::KeyNotFound) if policy == RevokePolicy::DeleteLocal => KeyLookup::Revoked,
                Err(_) => KeyLookup::Unavailable,
            }
        };
        let (store, report) = if memory {
            let files = MemoryFiles { snapshot: snapshot.render().into_bytes(), journal: Vec::new() };
            Store::open_memory(files, &mut resolver)?
        } else {
            let (s, j) = paths.expect("disk store has paths");
            Store::open(s, j, &mut resolver)?
        };
        self.stats.key_fetches += fetch_count;
        self.store = store;
        for id in &report.removed {
            self.state.drop_delivery(*id);
        }
        for id in &report.shared_loaded {
            if let Some(d) = self.state.deliveries.get(id).cloned() {
                if let Some(k) = fetched.remove(&d.dossier_id) {
                    self.cache.insert(d.dossier_id, (d.key_version, k));
                }
            }
        }
        self.save()?;
        Ok(report)
    }

    /// Writes the snapshot and closes the store.
    pub fn shutdown(self) -> Result<()> {
        self.save()?;
        self.store.shutdown()?;
        Ok(())
    }

    /// Writes the snapshot but keeps the client running.
    pub fn checkpoint(&mut self) -> Result<()> {
        self.save()?;
        self.store.checkpoint()?;
        Ok(())
    }

    /// Backend-independent summary of the store.
    pub fn logical_view(&self) -> LogicalView {
        let mut view = LogicalView::default();
        for row in self.store.rows() {
            let source = match row.origin() {
                Origin::Owned => RowSource::Owned,
                Origin::Shared(h) => match self.state.deliveries.get(&h) {
                    Some(d) => RowSource::Shared { owner: d.owner.clone(), dossier_id: d.dossier_id, key_version: d.key_version },
                    None => RowSource::Shared { owner: String::new(), dossier_id: 0, key_version: 0 },
                },
            };
            view.rows.insert((row.table().to_string(), row.pk().to_string()), (row.fields().to_vec(), source));
        }
        for (h, d) in &self.state.deliveries {
            if self.store.has_shared(*h) && !self.store.is_loaded(*h) {
                view.sealed.insert(d.clone());
            }
        }
        view
    }
}
