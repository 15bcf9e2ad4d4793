//! Many clients against one synchronizer over TCP.

use std::sync::{Arc, Barrier};
use std::thread;
use std::time::Duration;

use dossier_core::clock::Clock;
use dossier_core::protocol::{Client, ClientConfig};
use dossier_core::rowstore::Row;
use dossier_core::service::wire::ServiceClient;
use dossier_core::service::{tcp, ServiceConfig, Synchronizer};
use dossier_core::transport::{shared, TcpTransport};

const PAIRS: usize = 6;
const DOSSIERS: usize = 8;

fn config() -> ServiceConfig {
    ServiceConfig { pbkdf2_iterations: 10, ..Default::default() }
}

fn connect(addr: std::net::SocketAddr, user: &str) -> Client<ServiceClient<TcpTransport>> {
    let backend = ServiceClient::new(TcpTransport::new(addr).unwrap());
    Client::register_in_memory(user, "pw", backend, ClientConfig::default()).unwrap()
}

#[test]
fn concurrent_owners_and_receivers() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("sync.journal");
    let svc = shared(Synchronizer::open(&journal, Clock::System, config()).unwrap());
    let server = tcp::spawn("127.0.0.1:0", svc.clone()).unwrap();
    let addr = server.local_addr();

    // Every receiver must exist before owners grant to it.
    let registered = Arc::new(Barrier::new(PAIRS * 2));
    let mut handles = Vec::new();
    for i in 0..PAIRS {
        let ready = registered.clone();
        handles.push(thread::spawn(move || {
            let mut owner = connect(addr, &format!("owner{i}"));
            ready.wait();
            let mut ids = Vec::new();
            for d in 0..DOSSIERS {
                let row = Row::new("t", [("id", format!("{i}-{d}")), ("v", format!("value {i} {d}"))]).unwrap();
                let id = owner.insert(row).unwrap();
                owner.grant(id, &format!("reader{i}"), &["id", "v"]).unwrap();
                owner.grant(id, &format!("reader{}", (i + 1) % PAIRS), &["id"]).unwrap();
                owner.send(id).unwrap();
                ids.push(id);
            }
            ids
        }));
    }
    let mut readers = Vec::new();
    for i in 0..PAIRS {
        let ready = registered.clone();
        readers.push(thread::spawn(move || {
            let mut reader = connect(addr, &format!("reader{i}"));
            ready.wait();
            let mut stored = 0;
            for _ in 0..400 {
                stored += reader.receive().unwrap();
                if stored == 2 * DOSSIERS {
                    break;
                }
                thread::sleep(Duration::from_millis(5));
            }
            let ids: Vec<u64> = reader.deliveries().map(|(_, d)| d.dossier_id).collect();
            let opened = ids.iter().filter(|d| reader.use_dossier(**d).is_ok()).count();
            (stored, opened)
        }));
    }
    for h in handles {
        assert_eq!(h.join().unwrap().len(), DOSSIERS);
    }
    for r in readers {
        assert_eq!(r.join().unwrap(), (2 * DOSSIERS, 2 * DOSSIERS));
    }
    server.stop();

    let digest = {
        let s = svc.lock().unwrap();
        assert_eq!(s.pending_count(), 0);
        s.storage_digest()
    };
    // The journal written under contention replays to the same state.
    let reopened = Synchronizer::open(&journal, Clock::System, config()).unwrap();
    assert_eq!(reopened.storage_digest(), digest);
}
