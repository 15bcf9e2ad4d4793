//! Synchronization through a shared mailbox instead of a dedicated service.

pub mod client;
pub mod model;
pub mod server;

pub use client::{HandlerCounts, MailboxBackend, MailboxSnapshot, Subject};
pub use model::{build_queue, queue_size_model, steady_state_size, QueueParams};
pub use server::{MailMessage, MailServer};
