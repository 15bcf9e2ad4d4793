use dossier_core::clock::Clock;
use dossier_core::crypto;
use dossier_core::mailbox::{queue_size_model, MailServer, MailboxBackend, QueueParams, Subject};
use dossier_core::protocol::{Backend, Client, ClientConfig, LogicalView, ReceiverPhase};
use dossier_core::rowstore::Row;
use dossier_core::service::wire::ServiceClient;
use dossier_core::service::{tcp, ServiceConfig, Synchronizer};
use dossier_core::transport::{shared, LocalTransport, Shared, TcpTransport, Transport};

type MailClient = Client<MailboxBackend<LocalTransport<MailServer>>>;

fn mail_server() -> Shared<MailServer> {
    shared(MailServer::new(Clock::manual(0)).with_iterations(1))
}

fn mail_client(server: &Shared<MailServer>, user: &str, peers: &[&str]) -> MailClient {
    let mut backend = MailboxBackend::new(LocalTransport::new(server.clone()), Clock::manual(0));
    for p in peers {
        backend.add_collaborator(p);
    }
    Client::register_in_memory(user, "pw", backend, ClientConfig::default()).unwrap()
}

fn patient(pk: &str, name: &str) -> Row {
    Row::new("patients", [("id", pk), ("name", name), ("illness", "SECRET-XYZ")]).unwrap()
}

fn subjects_from(server: &Shared<MailServer>, from: &str) -> Vec<String> {
    server.lock().unwrap().all_messages().filter(|m| m.from == from).map(|m| m.subject.clone()).collect()
}

fn count_prefix(subjects: &[String], prefix: &str) -> usize {
    subjects.iter().filter(|s| s.starts_with(prefix)).count()
}

/// bob and carol introduce themselves to alice, who learns their keys.
fn three_party(server: &Shared<MailServer>) -> (MailClient, MailClient, MailClient) {
    let mut alice = mail_client(server, "alice", &[]);
    let mut bob = mail_client(server, "bob", &["alice"]);
    let mut carol = mail_client(server, "carol", &["alice"]);
    bob.backend_mut().announce().unwrap();
    carol.backend_mut().announce().unwrap();
    alice.receive().unwrap();
    (alice, bob, carol)
}

#[test]
fn first_sync_sends_public_keys_then_keys_then_rows() {
    let server = mail_server();
    let (mut alice, mut bob, mut carol) = three_party(&server);
    let d = alice.insert(patient("1", "Mario")).unwrap();
    alice.grant(d, "bob", &["id", "name"]).unwrap();
    alice.grant(d, "carol", &["id", "name"]).unwrap();
    alice.send(d).unwrap();
    let sent = subjects_from(&server, "alice");
    assert_eq!(count_prefix(&sent, "PK"), 2);
    assert_eq!(count_prefix(&sent, "DK"), 2);
    assert_eq!(count_prefix(&sent, "PR"), 2);
    // Public keys are the first messages alice ever sent.
    assert!(sent[..2].iter().all(|s| s == "PK"));

    for c in [&mut bob, &mut carol] {
        assert_eq!(c.receive().unwrap(), 1);
        assert_eq!(c.use_dossier(d).unwrap().get("name"), Some("Mario"));
    }

    // Steady state: no further public keys.
    alice.update(d, patient("1", "Mario R.")).unwrap();
    alice.send(d).unwrap();
    let sent = subjects_from(&server, "alice");
    assert_eq!(count_prefix(&sent, "PK"), 0, "public keys were consumed and not re-sent");
    assert_eq!(count_prefix(&sent, "PR"), 2);
    // Stale key messages are replaced, one per receiver remains.
    assert_eq!(count_prefix(&sent, "DK"), 2);

    // Nothing modified: a sync produces no messages.
    let before = server.lock().unwrap().message_count(None);
    alice.receive().unwrap();
    assert_eq!(server.lock().unwrap().message_count(None), before);
}

#[test]
fn receive_dispatches_by_subject() {
    let server = mail_server();
    let (mut alice, mut bob, _carol) = three_party(&server);
    // Empty mailbox for alice now: no-op.
    let before = alice.backend().counts();
    assert_eq!(alice.receive().unwrap(), 0);
    assert_eq!(alice.backend().counts(), before);

    let d1 = alice.insert(patient("1", "A")).unwrap();
    let d2 = alice.insert(patient("2", "B")).unwrap();
    for d in [d1, d2] {
        alice.grant(d, "bob", &["id"]).unwrap();
        alice.send(d).unwrap();
    }
    server.lock().unwrap().append("alice", "bob", "HELLO", "00").unwrap();
    bob.receive().unwrap();
    let c = bob.backend().counts();
    // One public key from alice (bob's own went the other way), two keys, two rows.
    assert_eq!((c.public_keys, c.keys, c.rows, c.skipped), (1, 2, 2, 1));
    let inbox = server.lock().unwrap().list("bob", "", false);
    let odd: Vec<_> = inbox.iter().filter(|m| m.subject == "HELLO").collect();
    assert_eq!(odd.len(), 1);
    assert!(!odd[0].read, "unknown subjects stay unread");
}

#[test]
fn public_key_messages_are_stored_then_deleted() {
    let server = mail_server();
    let mut alice = mail_client(&server, "alice", &[]);
    let mut bob = mail_client(&server, "bob", &["alice"]);
    bob.backend_mut().announce().unwrap();
    assert_eq!(server.lock().unwrap().list("alice", "PK", false).len(), 1);
    alice.receive().unwrap();
    assert!(server.lock().unwrap().list("alice", "PK", false).is_empty());
    let chain = alice.backend_mut().key_chain("bob").unwrap();
    assert_eq!(chain.last().unwrap().key, bob.public_key());

    // Rotation: a second PK overwrites the stored chain.
    bob.rotate_keypair().unwrap();
    alice.receive().unwrap();
    let chain = alice.backend_mut().key_chain("bob").unwrap();
    assert_eq!(chain.len(), 2);
    assert_eq!(chain.last().unwrap().key, bob.public_key());

    // A corrupt body is kept and logged.
    server.lock().unwrap().append("bob", "alice", "PK", "NOTHEX").unwrap();
    alice.receive().unwrap();
    assert_eq!(server.lock().unwrap().list("alice", "PK", false).len(), 1);
    assert_eq!(alice.backend().counts().failed, 1);
}

#[test]
fn key_messages_are_kept_and_rebuilt_after_restart() {
    let server = mail_server();
    let (mut alice, mut bob, mut carol) = three_party(&server);
    let d = alice.insert(patient("1", "Mario")).unwrap();
    alice.grant(d, "bob", &["id", "name"]).unwrap();
    alice.send(d).unwrap();

    let backend = bob.backend_mut();
    let rows = backend.receive_update().unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(backend.pr_list().len(), 1);
    assert!(backend.dk_map().contains_key(&d));
    let opened = backend.decrypt_pr_list();
    assert_eq!(opened.len(), 1);
    assert_eq!(opened[0].1.get("name"), Some("Mario"));
    backend.acknowledge(&[rows[0].id]).unwrap();
    let inbox = server.lock().unwrap().list("bob", "", false);
    assert_eq!(inbox.iter().map(|m| m.subject.as_str()).collect::<Vec<_>>(), vec![Subject::Key(d).render()]);

    backend.restart();
    assert!(backend.dk_map().is_empty());
    backend.receive_update().unwrap();
    assert_eq!(backend.dk_map()[&d].owner, "alice");

    // A key wrapped for bob is useless to carol.
    let dk = server.lock().unwrap().list("bob", "DK", false).remove(0);
    server.lock().unwrap().append("alice", "carol", &dk.subject, &dk.body).unwrap();
    let failed = carol.backend().counts().failed;
    carol.receive().unwrap();
    assert_eq!(carol.backend().counts().failed, failed + 1);
    assert!(carol.backend().dk_map().is_empty());
}

#[test]
fn row_without_key_stays_encrypted_in_the_list() {
    let server = mail_server();
    let (mut alice, mut bob, _carol) = three_party(&server);
    let d = alice.insert(patient("1", "Mario")).unwrap();
    alice.grant(d, "bob", &["id"]).unwrap();
    alice.send(d).unwrap();
    // Remove the key before bob syncs.
    server.lock().unwrap().delete_sent("alice", "bob", &Subject::Key(d).render()).unwrap();
    let backend = bob.backend_mut();
    backend.receive_update().unwrap();
    assert!(backend.decrypt_pr_list().is_empty());
    assert_eq!(backend.pr_list().len(), 1);
    assert!(backend.pr_list()[0].starts_with(&format!("${d}@")));
}

#[test]
fn only_key_messages_remain_after_a_full_receive() {
    let server = mail_server();
    let (mut alice, mut bob, mut carol) = three_party(&server);
    for i in 0..5 {
        let d = alice.insert(patient(&i.to_string(), "X")).unwrap();
        alice.grant(d, "bob", &["id", "name"]).unwrap();
        alice.grant(d, "carol", &["id"]).unwrap();
        alice.send(d).unwrap();
    }
    bob.receive().unwrap();
    carol.receive().unwrap();
    for user in ["bob", "carol"] {
        let inbox = server.lock().unwrap().list(user, "", false);
        assert_eq!(inbox.len(), 5);
        assert!(inbox.iter().all(|m| matches!(Subject::parse(&m.subject), Some(Subject::Key(_)))));
    }
}

#[test]
fn measured_queue_matches_the_model() {
    let server = mail_server();
    let (mut alice, mut bob, _carol) = three_party(&server);
    let n = 6u64;
    let mut ds = Vec::new();
    for i in 0..n {
        let d = alice.insert(patient(&format!("{i:02}"), "Fixed Name")).unwrap();
        alice.grant(d, "bob", &["id", "name"]).unwrap();
        ds.push(d);
    }
    for &d in &ds[..4] {
        alice.send(d).unwrap();
    }
    bob.receive().unwrap();
    for &d in &ds[4..] {
        alice.send(d).unwrap();
    }
    let inbox = server.lock().unwrap().list("bob", "", false);
    let key_size = inbox.iter().find(|m| m.subject.starts_with("DK")).unwrap().body.len() as u64;
    let row_size = inbox.iter().find(|m| m.subject.starts_with("PR")).unwrap().body.len() as u64;
    assert!(inbox.iter().filter(|m| m.subject.starts_with("DK")).all(|m| m.body.len() as u64 == key_size));
    assert!(inbox.iter().filter(|m| m.subject.starts_with("PR")).all(|m| m.body.len() as u64 == row_size));
    // Per inbox every arriving dossier brings exactly one wrapped key.
    let p = QueueParams {
        read_keys: 4,
        new_collaborators: 0,
        received_dossiers: 2,
        avg_collaborators: 1,
        public_key_size: key_size,
        key_size,
        dossier_size: row_size,
    };
    assert_eq!(server.lock().unwrap().total_body_bytes(Some("bob")) as u64, queue_size_model(&p));
    bob.receive().unwrap();
    let p = QueueParams { read_keys: n, received_dossiers: 0, ..p };
    assert_eq!(server.lock().unwrap().total_body_bytes(Some("bob")) as u64, queue_size_model(&p));
}

#[test]
fn revoke_deletes_own_messages() {
    let server = mail_server();
    let (mut alice, mut bob, _carol) = three_party(&server);
    let d = alice.insert(patient("1", "Mario")).unwrap();
    alice.grant(d, "bob", &["id", "name"]).unwrap();
    alice.send(d).unwrap();
    bob.receive().unwrap();
    bob.use_dossier(d).unwrap();
    assert!(alice.revoke(d, "bob").unwrap());
    assert!(server.lock().unwrap().list("bob", "", false).is_empty());
    bob.restart(false).unwrap();
    assert!(bob.use_dossier(d).unwrap_err().is_key_not_found());
    assert_eq!(bob.phase(d), ReceiverPhase::HasCiphertext);
    assert!(alice.backend_mut().list_keys().unwrap().is_empty());
}

#[test]
fn mailbox_over_tcp() {
    let server = mail_server();
    let handle = tcp::spawn("127.0.0.1:0", server.clone()).unwrap();
    let addr = handle.local_addr();
    let tcp_client = |user: &str, peers: &[&str]| {
        let mut backend: MailboxBackend<Box<dyn Transport>> =
            MailboxBackend::new(Box::new(TcpTransport::new(addr).unwrap()), Clock::manual(0));
        for p in peers {
            backend.add_collaborator(p);
        }
        Client::register_in_memory(user, "pw", backend, ClientConfig::default()).unwrap()
    };
    let mut alice = tcp_client("alice", &[]);
    let mut bob = tcp_client("bob", &["alice"]);
    bob.backend_mut().announce().unwrap();
    alice.receive().unwrap();
    let d = alice.insert(patient("7", "Over Tcp")).unwrap();
    alice.grant(d, "bob", &["id", "name"]).unwrap();
    alice.send(d).unwrap();
    assert_eq!(bob.receive().unwrap(), 1);
    assert_eq!(bob.use_dossier(d).unwrap().get("name"), Some("Over Tcp"));
    handle.stop();
}

#[test]
fn directory_backed_mailbox_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let server = shared(MailServer::open(dir.path(), Clock::manual(0)).unwrap().with_iterations(1));
    let (mut alice, mut bob, _carol) = three_party(&server);
    let d = alice.insert(patient("1", "Mario")).unwrap();
    alice.grant(d, "bob", &["id", "name"]).unwrap();
    alice.send(d).unwrap();
    bob.receive().unwrap();
    drop(server);
    let reopened = shared(MailServer::open(dir.path(), Clock::manual(0)).unwrap());
    let inbox = reopened.lock().unwrap().list("bob", "", false);
    assert_eq!(inbox.len(), 1);
    assert_eq!(inbox[0].subject, Subject::Key(d).render());
    let rec = dossier_core::mailbox::client::decode_key_message(&inbox[0]).unwrap();
    assert!(crypto::unwrap_key(&rec.wrapped_key, bob.keypair()).is_ok());
}

/// One history, two backends.
fn history<B: Backend>(alice: &mut Client<B>, bob: &mut Client<B>, carol: &mut Client<B>) -> (LogicalView, LogicalView) {
    let d1 = alice.insert(patient("1", "Mario")).unwrap();
    let d2 = alice.insert(patient("2", "Anna")).unwrap();
    let d3 = alice.insert(patient("3", "Luca")).unwrap();
    alice.grant(d1, "bob", &["id", "name"]).unwrap();
    alice.grant(d1, "carol", &["id"]).unwrap();
    alice.grant(d2, "bob", &["id", "illness"]).unwrap();
    alice.grant(d3, "carol", &["id", "name", "illness"]).unwrap();
    for d in [d1, d2, d3] {
        alice.send(d).unwrap();
    }
    bob.receive().unwrap();
    carol.receive().unwrap();
    bob.use_dossier(d1).unwrap();
    carol.use_dossier(d3).unwrap();
    alice.update(d1, patient("1", "Mario Rossi")).unwrap();
    alice.send(d1).unwrap();
    alice.revoke(d2, "bob").unwrap();
    bob.receive().unwrap();
    carol.receive().unwrap();
    bob.use_dossier(d1).unwrap();
    assert!(bob.use_dossier(d2).is_err());
    carol.use_dossier(d1).unwrap();
    alice.grant(d2, "carol", &["id"]).unwrap();
    alice.send(d2).unwrap();
    carol.receive().unwrap();
    carol.use_dossier(d2).unwrap();
    (bob.logical_view(), carol.logical_view())
}

#[test]
fn same_history_gives_same_stores_on_both_backends() {
    let svc = shared(Synchronizer::new(Clock::manual(0), ServiceConfig { pbkdf2_iterations: 10, ..Default::default() }));
    let service_client = |user: &str| {
        let backend = ServiceClient::new(LocalTransport::new(svc.clone()));
        Client::register_in_memory(user, "pw", backend, ClientConfig::default()).unwrap()
    };
    let (mut a, mut b, mut c) = (service_client("alice"), service_client("bob"), service_client("carol"));
    let via_service = history(&mut a, &mut b, &mut c);

    let server = mail_server();
    let (mut a, mut b, mut c) = three_party(&server);
    let via_mailbox = history(&mut a, &mut b, &mut c);

    assert_eq!(via_service, via_mailbox);
    assert_eq!(via_service.0.rows.len(), 1);
    assert_eq!(via_service.1.rows.len(), 3);
}
