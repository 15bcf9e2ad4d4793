//! Row-level end-to-end encrypted sharing between local stores, relayed by
//! an untrusted synchronizer or a mailbox.

pub mod bench;
pub mod clock;
pub mod crypto;
pub mod mailbox;
pub mod protocol;
pub mod rowstore;
pub mod service;
pub mod sim;
pub mod transport;
