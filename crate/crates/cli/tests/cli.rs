use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_dossier");

struct Server {
    child: Child,
    addr: String,
}

impl Server {
    fn start(extra: &[&str]) -> Server {
        let mut child = Command::new(BIN)
            .args(["serve", "--listen", "127.0.0.1:0", "--pbkdf2-iterations", "1"])
            .args(extra)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let addr = line.trim().strip_prefix("listening on ").expect("listening line").to_string();
        Server { child, addr }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn dossier(server: &str, profile: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .env("DOSSIER_SERVER", server)
        .env("DOSSIER_PROFILE", profile)
        .env_remove("DOSSIER_PASSWORD")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn share_use_and_revoke_over_tcp() {
    let server = Server::start(&[]);
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("alice"), tmp.path().join("bob"));
    let s = server.addr.as_str();
    ok(dossier(s, &a, &["register", "--user", "alice", "--password", "pw"]));
    ok(dossier(s, &b, &["register", "--user", "bob", "--password", "pw"]));

    let id = ok(dossier(s, &a, &["insert", "--table", "patients", "id=p1", "name=Ann", "note=TOPSECRET"]));
    let id = id.trim();
    ok(dossier(s, &a, &["grant", id, "bob", "--columns", "id,name"]));
    ok(dossier(s, &a, &["send", id]));
    ok(dossier(s, &b, &["receive"]));

    let used: Value = serde_json::from_str(&ok(dossier(s, &b, &["--json", "use", id]))).unwrap();
    assert_eq!(used["version"], 1);
    assert_eq!(used["command"], "use");
    assert_eq!(used["result"]["row"]["fields"]["name"], "Ann");
    assert!(used["result"]["row"]["fields"].get("note").is_none());

    let list = ok(dossier(s, &b, &["list"]));
    assert!(list.contains("from alice"), "{list}");
    assert!(!list.contains("Ann"), "list must not print shared plaintext: {list}");

    ok(dossier(s, &a, &["revoke", id, "bob"]));
    let denied = dossier(s, &b, &["use", id]);
    assert_eq!(denied.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&denied.stderr).contains("key-not-found"));
    assert!(denied.stdout.is_empty());
}

#[test]
fn mailbox_round_trip() {
    let server = Server::start(&["--backend", "mailbox"]);
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("alice"), tmp.path().join("bob"));
    let s = server.addr.as_str();
    ok(dossier(s, &a, &["register", "--backend", "mailbox", "--user", "alice", "--password", "pw"]));
    ok(dossier(s, &b, &["register", "--backend", "mailbox", "--user", "bob", "--password", "pw"]));
    ok(dossier(s, &a, &["mailbox-sync", "--introduce", "bob"]));
    ok(dossier(s, &b, &["mailbox-sync", "--introduce", "alice"]));
    let id = ok(dossier(s, &a, &["insert", "id=p1", "name=Ann"]));
    let id = id.trim();
    ok(dossier(s, &a, &["grant", id, "bob"]));
    ok(dossier(s, &a, &["send", id]));
    ok(dossier(s, &a, &["mailbox-sync"]));
    let sync: Value = serde_json::from_str(&ok(dossier(s, &b, &["--json", "mailbox-sync"]))).unwrap();
    assert_eq!(sync["result"]["stored"], 1);
    assert!(ok(dossier(s, &b, &["use", id])).contains("name=Ann"));
}

#[test]
fn second_bind_fails_cleanly() {
    let server = Server::start(&[]);
    let out = Command::new(BIN).args(["serve", "--listen", &server.addr]).output().unwrap();
    assert_eq!(out.status.code(), Some(9));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("dossier: io:"));
}

#[test]
fn unreachable_server_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    // Bind and drop to get a port with nothing listening.
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let out = dossier(&port.to_string(), tmp.path(), &["register", "--user", "x", "--password", "pw"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(BIN).args(["grant"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(BIN).env_remove("DOSSIER_PROFILE").args(["list"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(BIN).args(["scenario", "run", "no-such-scenario"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = dossier("127.0.0.1:1", tmp.path(), &["list"]);
    assert_eq!(out.status.code(), Some(9), "profile without remote.json");
}

#[test]
fn json_errors_carry_version_and_category() {
    let out = Command::new(BIN).args(["--json", "scenario", "run", "nope"]).output().unwrap();
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["version"], 1);
    assert_eq!(v["ok"], false);
    assert_eq!(v["error"]["category"], "usage");
}

#[test]
fn scenarios_run_from_the_command_line() {
    let names = ok(Command::new(BIN).args(["scenario", "list"]).output().unwrap());
    assert!(names.lines().any(|n| n == "redirection-attack"));
    let out = ok(Command::new(BIN).args(["scenario", "run", "cut-during-sync", "--seed", "3"]).output().unwrap());
    assert!(out.starts_with("PASS"), "{out}");
    let out = ok(Command::new(BIN).args(["scenario", "run", "rotation-race", "--mitigation", "retention"]).output().unwrap());
    assert!(out.starts_with("PASS rotation-race-retention"), "{out}");
    let out = ok(Command::new(BIN).args(["scenario", "run", "redirection-attack"]).output().unwrap());
    assert!(out.contains("0 plaintext hits"), "{out}");
}

#[test]
fn bench_run_emits_a_report() {
    let out = Command::new(BIN)
        .args(["--json", "bench", "run", "--dossiers", "1000", "--shared", "20", "--repeats", "1"])
        .output()
        .unwrap();
    let v: Value = serde_json::from_str(&ok(out)).unwrap();
    assert_eq!(v["version"], 1);
    let r = &v["result"];
    assert_eq!(r["shared"], 200);
    assert_eq!(r["encryptions"], 200);
    for phase in ["create", "populate", "share", "receive", "open"] {
        assert!(r["phases"][phase].as_f64().unwrap() >= 0.0);
    }
    assert!(r["overhead_pct"].is_number());
}

#[test]
fn bench_sweep_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("sweep.csv");
    ok(Command::new(BIN)
        .args(["bench", "sweep", "--sizes", "50,100", "--shared", "0,20", "--repeats", "1", "--out"])
        .arg(&csv)
        .output()
        .unwrap());
    let text = std::fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().count(), 5);
}
