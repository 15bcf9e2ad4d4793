use crate::crypto::KeyPair;

use super::records::{
    KeyLink, KeyListing, PendingRow, ResendRequest, RevokeRequest, RowSubmission, SyncError,
    WrappedKeyRecord,
};

pub type SyncResult<T> = Result<T, SyncError>;

/// What a client needs from a synchronizer, whatever carries it.
pub trait Backend {
    /// Creates the account and publishes the first public key.
    fn register(&mut self, user: &str, keys: &KeyPair, password: &str) -> SyncResult<()>;

    /// Binds this backend to an existing account.
    fn login(&mut self, user: &str, keys: &KeyPair, password: &str) -> SyncResult<()>;

    /// Public-key history of a user, oldest first.
    fn key_chain(&mut self, user: &str) -> SyncResult<Vec<KeyLink>>;

    /// Publishes a new own public key. `new_keys` becomes the bound identity.
    fn rotate_key(&mut self, link: KeyLink, new_keys: &KeyPair) -> SyncResult<()>;

    fn deposit_key(&mut self, rec: &WrappedKeyRecord) -> SyncResult<()>;

    fn send_row(&mut self, sub: &RowSubmission) -> SyncResult<u64>;

    /// Deposits a key and its row for every entry. Returns the row ids.
    fn publish(&mut self, batch: &[(WrappedKeyRecord, RowSubmission)]) -> SyncResult<Vec<u64>> {
        let mut ids = Vec::with_capacity(batch.len());
        for (key, row) in batch {
            self.deposit_key(key)?;
            ids.push(self.send_row(row)?);
        }
        Ok(ids)
    }

    /// Acknowledges delivered rows, then lists the rows still pending.
    fn fetch_pending(&mut self, ack: &[u64]) -> SyncResult<Vec<PendingRow>>;

    /// The id under which a delivered row is stored locally.
    fn header_id(&self, row: &PendingRow) -> u64 {
        row.id
    }

    fn fetch_key(&mut self, owner: &str, dossier_id: u64, key_version: u64) -> SyncResult<WrappedKeyRecord>;

    fn revoke(&mut self, req: &RevokeRequest) -> SyncResult<()>;

    fn request_resend(&mut self, owner: &str, dossier_id: u64) -> SyncResult<()>;

    fn resend_requests(&mut self) -> SyncResult<Vec<ResendRequest>>;

    /// Keys this client has deposited and that are still held.
    fn list_keys(&mut self) -> SyncResult<Vec<KeyListing>>;

    /// Makes the own public key known to `peers` where the backend has no
    /// shared directory.
    fn introduce(&mut self, _peers: &[String]) -> SyncResult<()> {
        Ok(())
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn register(&mut self, user: &str, keys: &KeyPair, password: &str) -> SyncResult<()> {
        (**self).register(user, keys, password)
    }
    fn login(&mut self, user: &str, keys: &KeyPair, password: &str) -> SyncResult<()> {
        (**self).login(user, keys, password)
    }
    fn key_chain(&mut self, user: &str) -> SyncResult<Vec<KeyLink>> {
        (**self).key_chain(user)
    }
    fn rotate_key(&mut self, link: KeyLink, new_keys: &KeyPair) -> SyncResult<()> {
        (**self).rotate_key(link, new_keys)
    }
    fn deposit_key(&mut self, rec: &WrappedKeyRecord) -> SyncResult<()> {
        (**self).deposit_key(rec)
    }
    fn send_row(&mut self, sub: &RowSubmission) -> SyncResult<u64> {
        (**self).send_row(sub)
    }
    fn publish(&mut self, batch: &[(WrappedKeyRecord, RowSubmission)]) -> SyncResult<Vec<u64>> {
        (**self).publish(batch)
    }
    fn fetch_pending(&mut self, ack: &[u64]) -> SyncResult<Vec<PendingRow>> {
        (**self).fetch_pending(ack)
    }
    fn header_id(&self, row: &PendingRow) -> u64 {
        (**self).header_id(row)
    }
    fn fetch_key(&mut self, owner: &str, dossier_id: u64, key_version: u64) -> SyncResult<WrappedKeyRecord> {
        (**self).fetch_key(owner, dossier_id, key_version)
    }
    fn revoke(&mut self, req: &RevokeRequest) -> SyncResult<()> {
        (**self).revoke(req)
    }
    fn request_resend(&mut self, owner: &str, dossier_id: u64) -> SyncResult<()> {
        (**self).request_resend(owner, dossier_id)
    }
    fn resend_requests(&mut self) -> SyncResult<Vec<ResendRequest>> {
        (**self).resend_requests()
    }
    fn list_keys(&mut self) -> SyncResult<Vec<KeyListing>> {
        (**self).list_keys()
    }
    fn introduce(&mut self, peers: &[String]) -> SyncResult<()> {
        (**self).introduce(peers)
    }
}
