//! Records exchanged with a synchronizer and the errors it reports.
//!
//! Every record carries a detached signature over [`signing_bytes`], which
//! binds the record kind, both parties, the dossier, the key version and the
//! exact blob that travels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{self, hex_bytes, KeyPair, PublicKey, Signature};

pub type UserId = String;

pub const KIND_KEY: &str = "KEY";
pub const KIND_ROW: &str = "ROW";
pub const KIND_REVOKE: &str = "REVOKE";
pub const KIND_ROTATE: &str = "ROTATE";

fn push_field(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(bytes);
}

/// Canonical byte string that a sender signs.
pub fn signing_bytes(
    kind: &str,
    sender: &str,
    receiver: &str,
    dossier_id: u64,
    key_version: u64,
    expiry_ms: Option<u64>,
    blob: &[u8],
) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + blob.len());
    push_field(&mut out, kind.as_bytes());
    push_field(&mut out, sender.as_bytes());
    push_field(&mut out, receiver.as_bytes());
    out.extend_from_slice(&dossier_id.to_be_bytes());
    out.extend_from_slice(&key_version.to_be_bytes());
    match expiry_ms {
        Some(t) => {
            out.push(1);
            out.extend_from_slice(&t.to_be_bytes());
        }
        None => out.push(0),
    }
    push_field(&mut out, blob);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrappedKeyRecord {
    pub dossier_id: u64,
    pub key_version: u64,
    pub sender: UserId,
    pub receiver: UserId,
    pub expiry_ms: Option<u64>,
    #[serde(with = "hex_bytes")]
    pub wrapped_key: Vec<u8>,
    pub signature: Signature,
}

impl WrappedKeyRecord {
    pub fn signed(
        dossier_id: u64,
        key_version: u64,
        sender: &str,
        receiver: &str,
        expiry_ms: Option<u64>,
        wrapped_key: Vec<u8>,
        keys: &KeyPair,
    ) -> Self {
        let msg = signing_bytes(KIND_KEY, sender, receiver, dossier_id, key_version, expiry_ms, &wrapped_key);
        WrappedKeyRecord {
            dossier_id,
            key_version,
            sender: sender.to_string(),
            receiver: receiver.to_string(),
            expiry_ms,
            wrapped_key,
            signature: crypto::sign(&msg, keys),
        }
    }

    pub fn message(&self) -> Vec<u8> {
        signing_bytes(
            KIND_KEY,
            &self.sender,
            &self.receiver,
            self.dossier_id,
            self.key_version,
            self.expiry_ms,
            &self.wrapped_key,
        )
    }

    pub fn verify(&self, signer: &PublicKey) -> bool {
        crypto::verify(&self.message(), &self.signature, signer)
    }
}

/// A pending row as submitted by its owner, before the service assigns an id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowSubmission {
    pub dossier_id: u64,
    pub key_version: u64,
    pub sender: UserId,
    pub receiver: UserId,
    #[serde(with = "hex_bytes")]
    pub encrypted_row: Vec<u8>,
    pub signature: Signature,
}

impl RowSubmission {
    pub fn signed(
        dossier_id: u64,
        key_version: u64,
        sender: &str,
        receiver: &str,
        encrypted_row: Vec<u8>,
        keys: &KeyPair,
    ) -> Self {
        let msg = signing_bytes(KIND_ROW, sender, receiver, dossier_id, key_version, None, &encrypted_row);
        RowSubmission {
            dossier_id,
            key_version,
            sender: sender.to_string(),
            receiver: receiver.to_string(),
            encrypted_row,
            signature: crypto::sign(&msg, keys),
        }
    }

    pub fn message(&self) -> Vec<u8> {
        signing_bytes(
            KIND_ROW,
            &self.sender,
            &self.receiver,
            self.dossier_id,
            self.key_version,
            None,
            &self.encrypted_row,
        )
    }

    pub fn verify(&self, signer: &PublicKey) -> bool {
        crypto::verify(&self.message(), &self.signature, signer)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingRow {
    pub id: u64,
    pub submitted_at_ms: u64,
    #[serde(flatten)]
    pub row: RowSubmission,
}

/// Owner-signed request to delete every key for one receiver of a dossier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevokeRequest {
    pub dossier_id: u64,
    pub receiver: UserId,
    pub requester: UserId,
    pub signature: Signature,
}

impl RevokeRequest {
    pub fn signed(dossier_id: u64, receiver: &str, requester: &str, keys: &KeyPair) -> Self {
        let msg = signing_bytes(KIND_REVOKE, requester, receiver, dossier_id, 0, None, &[]);
        RevokeRequest {
            dossier_id,
            receiver: receiver.to_string(),
            requester: requester.to_string(),
            signature: crypto::sign(&msg, keys),
        }
    }

    pub fn verify(&self, signer: &PublicKey) -> bool {
        let msg = signing_bytes(KIND_REVOKE, &self.requester, &self.receiver, self.dossier_id, 0, None, &[]);
        crypto::verify(&msg, &self.signature, signer)
    }
}

/// One public key in a user's history. Every key after the first is endorsed
/// by its predecessor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyLink {
    pub key: PublicKey,
    pub endorsement: Option<Signature>,
}

pub fn rotation_bytes(user: &str, new_key: &PublicKey) -> Vec<u8> {
    signing_bytes(KIND_ROTATE, user, user, 0, 0, None, &new_key.to_bytes())
}

impl KeyLink {
    pub fn endorse(user: &str, new_key: PublicKey, previous: &KeyPair) -> KeyLink {
        KeyLink { key: new_key, endorsement: Some(crypto::sign(&rotation_bytes(user, &new_key), previous)) }
    }
}

/// Checks that every link is endorsed by the one before it.
pub fn chain_is_valid(user: &str, chain: &[KeyLink]) -> bool {
    !chain.is_empty()
        && chain.windows(2).all(|w| match &w[1].endorsement {
            Some(sig) => crypto::verify(&rotation_bytes(user, &w[1].key), sig, &w[0].key),
            None => false,
        })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserEntry {
    pub user_id: UserId,
    pub public_key: PublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ResendRequest {
    pub dossier_id: u64,
    pub receiver: UserId,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KeyListing {
    pub dossier_id: u64,
    pub receiver: UserId,
    pub key_version: u64,
}

/// Errors reported by a synchronizer backend. These cross the wire.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "code", content = "detail", rename_all = "snake_case")]
pub enum SyncError {
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("user {0} already registered")]
    DuplicateUser(UserId),
    #[error("bad credentials")]
    BadCredentials,
    #[error("session missing or expired")]
    SessionExpired,
    #[error("signature does not verify")]
    BadSignature,
    #[error("requester does not own dossier")]
    NotOwner,
    #[error("decrypting key not found")]
    KeyNotFound,
    #[error("decrypting key expired")]
    Expired,
    #[error("a newer key version superseded the requested one")]
    Superseded,
    #[error("stale key version")]
    Stale,
    #[error("not found: {0}")]
    NotFound(String),
    #[error("synchronizer unreachable: {0}")]
    Unreachable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("unsupported by this backend: {0}")]
    Unsupported(String),
    #[error("internal error: {0}")]
    Internal(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::generate_keypair;

    #[test]
    fn signing_bytes_are_unambiguous() {
        let a = signing_bytes(KIND_KEY, "ab", "c", 1, 2, None, b"x");
        let b = signing_bytes(KIND_KEY, "a", "bc", 1, 2, None, b"x");
        assert_ne!(a, b);
        let c = signing_bytes(KIND_ROW, "ab", "c", 1, 2, None, b"x");
        assert_ne!(a, c);
        assert_ne!(a, signing_bytes(KIND_KEY, "ab", "c", 1, 2, Some(0), b"x"));
    }

    #[test]
    fn forged_sender_fails_verification() {
        let owner = generate_keypair().unwrap();
        let mallory = generate_keypair().unwrap();
        let rec = WrappedKeyRecord::signed(7, 1, "alice", "bob", None, vec![1; 92], &mallory);
        assert!(!rec.verify(&owner.public()));
        assert!(rec.verify(&mallory.public()));
        let mut moved = rec.clone();
        moved.receiver = "carol".into();
        assert!(!moved.verify(&mallory.public()));
    }

    #[test]
    fn key_chain_requires_endorsements() {
        let k1 = generate_keypair().unwrap();
        let k2 = generate_keypair().unwrap();
        let k3 = generate_keypair().unwrap();
        let first = KeyLink { key: k1.public(), endorsement: None };
        let good = vec![first, KeyLink::endorse("bob", k2.public(), &k1)];
        assert!(chain_is_valid("bob", &good));
        let bad = vec![first, KeyLink::endorse("bob", k2.public(), &k3)];
        assert!(!chain_is_valid("bob", &bad));
        let other_user = vec![first, KeyLink::endorse("eve", k2.public(), &k1)];
        assert!(!chain_is_valid("bob", &other_user));
    }

    #[test]
    fn errors_serialize_with_codes() {
        let json = serde_json::to_string(&SyncError::KeyNotFound).unwrap();
        assert_eq!(json, r#"{"code":"key_not_found"}"#);
        let json = serde_json::to_string(&SyncError::UnknownUser("x".into())).unwrap();
        assert_eq!(json, r#"{"code":"unknown_user","detail":"x"}"#);
        let back: SyncError = serde_json::from_str(&json).unwrap();
        assert_eq!(back, SyncError::UnknownUser("x".into()));
    }

    #[test]
    fn pending_row_json_is_flat_hex() {
        let k = generate_keypair().unwrap();
        let sub = RowSubmission::signed(3, 1, "a", "b", vec![0x5D, 0xAA], &k);
        let row = PendingRow { id: 9, submitted_at_ms: 5, row: sub };
        let json = serde_json::to_value(&row).unwrap();
        assert_eq!(json["encrypted_row"], "5DAA");
        assert_eq!(json["id"], 9);
        let back: PendingRow = serde_json::from_value(json).unwrap();
        assert_eq!(back, row);
    }
}
