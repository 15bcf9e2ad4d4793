//! Analytic size of a mailbox queue, plus a builder that fills a mailbox
//! with exactly the messages the model counts.

use serde::{Deserialize, Serialize};

use super::server::{MailResult, MailServer};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueParams {
    /// Key messages kept from earlier synchronizations.
    pub read_keys: u64,
    /// Public-key messages from new collaborators.
    pub new_collaborators: u64,
    /// Dossiers that arrived since the last synchronization.
    pub received_dossiers: u64,
    /// Average number of collaborators per dossier.
    pub avg_collaborators: u64,
    pub public_key_size: u64,
    pub key_size: u64,
    pub dossier_size: u64,
}

/// Total body bytes of the queue.
pub fn queue_size_model(p: &QueueParams) -> u64 {
    p.read_keys * p.key_size
        + p.new_collaborators * p.public_key_size
        + p.received_dossiers * (p.public_key_size * p.avg_collaborators + p.dossier_size)
}

/// Steady-state size when a fraction of `dossiers` is shared.
pub fn steady_state_size(dossiers: u64, shared_fraction: f64, key_size: u64) -> f64 {
    dossiers as f64 * shared_fraction * key_size as f64
}

/// Fills `account`'s inbox with bodies of the modeled sizes, all sent by
/// `peer`. Both accounts must exist.
pub fn build_queue(server: &mut MailServer, account: &str, peer: &str, p: &QueueParams) -> MailResult<()> {
    let body = |n: u64| "0".repeat(n as usize);
    for d in 0..p.read_keys {
        let id = server.append(peer, account, &format!("DK{d}"), &body(p.key_size))?;
        server.mark_read(account, id)?;
    }
    for _ in 0..p.new_collaborators {
        server.append(peer, account, "PK", &body(p.public_key_size))?;
    }
    for i in 0..p.received_dossiers {
        let d = p.read_keys + i;
        for _ in 0..p.avg_collaborators {
            server.append(peer, account, &format!("DK{d}"), &body(p.public_key_size))?;
        }
        server.append(peer, account, &format!("PR{d}"), &body(p.dossier_size))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::Clock;

    #[test]
    fn all_zero_is_zero() {
        assert_eq!(queue_size_model(&QueueParams::default()), 0);
    }

    #[test]
    fn static_regime() {
        let p = QueueParams { read_keys: 2000, key_size: 32, ..Default::default() };
        // 2000 keys of 32 bytes each.
        assert_eq!(queue_size_model(&p), 64_000);
        assert_eq!(steady_state_size(10_000, 0.2, 32), 64_000.0);
    }

    #[test]
    fn mixed_regime() {
        let p = QueueParams {
            read_keys: 0,
            new_collaborators: 1,
            received_dossiers: 1,
            avg_collaborators: 3,
            public_key_size: 256,
            key_size: 32,
            dossier_size: 2000,
        };
        assert_eq!(queue_size_model(&p), 3024);
    }

    #[test]
    fn built_queue_matches_model() {
        let mut s = MailServer::new(Clock::manual(0)).with_iterations(1);
        s.create_account("a", "pw").unwrap();
        s.create_account("b", "pw").unwrap();
        let p = QueueParams {
            read_keys: 7,
            new_collaborators: 2,
            received_dossiers: 3,
            avg_collaborators: 2,
            public_key_size: 128,
            key_size: 32,
            dossier_size: 300,
        };
        build_queue(&mut s, "b", "a", &p).unwrap();
        assert_eq!(s.total_body_bytes(Some("b")) as u64, queue_size_model(&p));
    }
}
