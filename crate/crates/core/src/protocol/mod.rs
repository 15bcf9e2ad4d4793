//! Client protocol: records on the wire, the backend abstraction, and the
//! client agent.

pub mod backend;
pub mod client;
pub mod records;

pub use backend::{Backend, SyncResult};
pub use client::{
    dossier_id_for, project, AccessGrant, AuditFinding, Cause, Client, ClientConfig, ClientError,
    ClientStats, Delivery, LogicalView, PhaseChange, ReceiverPhase, RevokePolicy, RowSource,
    SendOutcome,
};
pub use records::{
    KeyLink, KeyListing, PendingRow, ResendRequest, RevokeRequest, RowSubmission, SyncError,
    UserEntry, UserId, WrappedKeyRecord,
};
