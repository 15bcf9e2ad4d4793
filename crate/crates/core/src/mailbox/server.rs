//! In-process mailbox with IMAP-like operations. Optionally backed by a
//! directory: one subdirectory per account, one file per message.
//!
//! Message file layout:
//!
//! ```text
//! Id: 17
//! From: alice
//! To: bob
//! Subject: DK42
//! Read: 0
//! Arrived: 1700000000000
//!
//! <body>
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::warn;

use crate::clock::Clock;
use crate::crypto;
use crate::protocol::SyncError;
use crate::service::wire::{Request, Response};
use crate::transport::LineService;

pub type MailResult<T> = Result<T, SyncError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MailMessage {
    pub id: u64,
    pub from: String,
    pub to: String,
    pub subject: String,
    pub body: String,
    pub read: bool,
    pub arrived_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Account {
    #[serde(with = "crypto::hex_bytes")]
    salt: Vec<u8>,
    #[serde(with = "crypto::hex_bytes")]
    digest: Vec<u8>,
    iterations: u32,
}

#[derive(Debug, Clone)]
pub struct MailServer {
    accounts: BTreeMap<String, Account>,
    messages: BTreeMap<u64, MailMessage>,
    sessions: HashMap<String, String>,
    next_id: u64,
    clock: Clock,
    dir: Option<PathBuf>,
    iterations: u32,
}

fn valid_account(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name.len() <= 128
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-' | '@'))
}

fn io_err(e: io::Error) -> SyncError {
    SyncError::Internal(e.to_string())
}

impl MailServer {
    pub fn new(clock: Clock) -> Self {
        MailServer {
            accounts: BTreeMap::new(),
            messages: BTreeMap::new(),
            sessions: HashMap::new(),
            next_id: 1,
            clock,
            dir: None,
            iterations: 10_000,
        }
    }

    /// Iteration count for new account password digests.
    pub fn with_iterations(mut self, iterations: u32) -> Self {
        self.iterations = iterations.max(1);
        self
    }

    /// Loads every account and message under `dir`, creating it if needed.
    pub fn open(dir: impl AsRef<Path>, clock: Clock) -> io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut server = MailServer::new(clock);
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            let acct_path = entry.path().join("account.json");
            let Ok(text) = fs::read_to_string(&acct_path) else { continue };
            let account: Account = serde_json::from_str(&text).map_err(io::Error::other)?;
            server.accounts.insert(name, account);
            for f in fs::read_dir(entry.path())? {
                let p = f?.path();
                if p.extension().and_then(|e| e.to_str()) != Some("msg") {
                    continue;
                }
                match parse_message_file(&fs::read_to_string(&p)?) {
                    Some(m) => {
                        server.next_id = server.next_id.max(m.id + 1);
                        server.messages.insert(m.id, m);
                    }
                    None => warn!(path = %p.display(), "skipping unreadable message file"),
                }
            }
        }
        server.dir = Some(dir);
        Ok(server)
    }

    fn account_dir(&self, user: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(user))
    }

    fn message_path(&self, m: &MailMessage) -> Option<PathBuf> {
        self.account_dir(&m.to).map(|d| d.join(format!("{:020}.msg", m.id)))
    }

    fn persist_message(&self, m: &MailMessage) -> MailResult<()> {
        if let Some(path) = self.message_path(m) {
            write_atomic(&path, render_message_file(m).as_bytes()).map_err(io_err)?;
        }
        Ok(())
    }

    fn unpersist_message(&self, m: &MailMessage) -> MailResult<()> {
        if let Some(path) = self.message_path(m) {
            match fs::remove_file(path) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                Err(e) => return Err(io_err(e)),
            }
        }
        Ok(())
    }

    pub fn create_account(&mut self, user: &str, password: &str) -> MailResult<()> {
        if !valid_account(user) {
            return Err(SyncError::Protocol(format!("invalid account name {user:?}")));
        }
        if self.accounts.contains_key(user) {
            return Err(SyncError::DuplicateUser(user.to_string()));
        }
        let salt = crypto::random_bytes::<16>().map_err(|e| SyncError::Internal(e.to_string()))?.to_vec();
        let digest = crypto::password_digest(password, &salt, self.iterations).to_vec();
        let account = Account { salt, digest, iterations: self.iterations };
        if let Some(d) = self.account_dir(user) {
            fs::create_dir_all(&d).map_err(io_err)?;
            let text = serde_json::to_string(&account).map_err(|e| SyncError::Internal(e.to_string()))?;
            write_atomic(&d.join("account.json"), text.as_bytes()).map_err(io_err)?;
        }
        self.accounts.insert(user.to_string(), account);
        Ok(())
    }

    pub fn has_account(&self, user: &str) -> bool {
        self.accounts.contains_key(user)
    }

    pub fn login(&mut self, user: &str, password: &str) -> MailResult<String> {
        let acct = self.accounts.get(user).ok_or(SyncError::BadCredentials)?;
        if crypto::password_digest(password, &acct.salt, acct.iterations).as_slice() != acct.digest.as_slice() {
            return Err(SyncError::BadCredentials);
        }
        let token = crypto::random_token().map_err(|e| SyncError::Internal(e.to_string()))?;
        self.sessions.insert(token.clone(), user.to_string());
        Ok(token)
    }

    fn session_user(&self, token: Option<&str>) -> MailResult<String> {
        token.and_then(|t| self.sessions.get(t)).cloned().ok_or(SyncError::SessionExpired)
    }

    pub fn append(&mut self, from: &str, to: &str, subject: &str, body: &str) -> MailResult<u64> {
        if !self.accounts.contains_key(to) {
            return Err(SyncError::UnknownUser(to.to_string()));
        }
        let id = self.next_id;
        let m = MailMessage {
            id,
            from: from.to_string(),
            to: to.to_string(),
            subject: subject.to_string(),
            body: body.to_string(),
            read: false,
            arrived_ms: self.clock.now_ms(),
        };
        self.persist_message(&m)?;
        self.next_id += 1;
        self.messages.insert(id, m);
        Ok(id)
    }

    /// Messages in `account`'s inbox whose subject starts with `prefix`, in
    /// arrival order.
    pub fn list(&self, account: &str, prefix: &str, unread_only: bool) -> Vec<MailMessage> {
        self.messages
            .values()
            .filter(|m| m.to == account && m.subject.starts_with(prefix) && !(unread_only && m.read))
            .cloned()
            .collect()
    }

    /// Messages sent by `from`, optionally to one recipient, still on the server.
    pub fn list_sent(&self, from: &str, to: Option<&str>, prefix: &str) -> Vec<MailMessage> {
        self.messages
            .values()
            .filter(|m| m.from == from && to.is_none_or(|t| m.to == t) && m.subject.starts_with(prefix))
            .cloned()
            .collect()
    }

    fn own(&self, account: &str, id: u64) -> MailResult<&MailMessage> {
        match self.messages.get(&id) {
            Some(m) if m.to == account => Ok(m),
            _ => Err(SyncError::NotFound(format!("message {id}"))),
        }
    }

    /// Returns the message and flags it as read.
    pub fn fetch(&mut self, account: &str, id: u64) -> MailResult<MailMessage> {
        self.mark_read(account, id)?;
        Ok(self.messages[&id].clone())
    }

    pub fn mark_read(&mut self, account: &str, id: u64) -> MailResult<()> {
        if self.own(account, id)?.read {
            return Ok(());
        }
        let mut m = self.messages[&id].clone();
        m.read = true;
        self.persist_message(&m)?;
        self.messages.insert(id, m);
        Ok(())
    }

    pub fn delete(&mut self, account: &str, id: u64) -> MailResult<()> {
        self.own(account, id)?;
        let m = self.messages.remove(&id).expect("checked above");
        self.unpersist_message(&m)
    }

    /// Deletes every message from `from` to `to` with exactly `subject`.
    pub fn delete_sent(&mut self, from: &str, to: &str, subject: &str) -> MailResult<usize> {
        let ids: Vec<u64> = self
            .messages
            .values()
            .filter(|m| m.from == from && m.to == to && m.subject == subject)
            .map(|m| m.id)
            .collect();
        for id in &ids {
            let m = self.messages.remove(id).expect("listed above");
            self.unpersist_message(&m)?;
        }
        Ok(ids.len())
    }

    /// Sum of body lengths in one inbox, or across all inboxes.
    pub fn total_body_bytes(&self, account: Option<&str>) -> usize {
        self.messages.values().filter(|m| account.is_none_or(|a| m.to == a)).map(|m| m.body.len()).sum()
    }

    pub fn message_count(&self, account: Option<&str>) -> usize {
        self.messages.values().filter(|m| account.is_none_or(|a| m.to == a)).count()
    }

    /// Every message on the server, in arrival order.
    pub fn all_messages(&self) -> impl Iterator<Item = &MailMessage> {
        self.messages.values()
    }

    pub fn dispatch(&mut self, req: Request) -> MailResult<Value> {
        let p = &req.payload;
        let s = |k: &str| -> MailResult<String> {
            p.get(k)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| SyncError::Protocol(format!("missing field {k}")))
        };
        let n = |k: &str| -> MailResult<u64> {
            p.get(k).and_then(Value::as_u64).ok_or_else(|| SyncError::Protocol(format!("missing field {k}")))
        };
        let value = |v: Vec<MailMessage>| serde_json::to_value(v).map_err(|e| SyncError::Internal(e.to_string()));
        match req.op.as_str() {
            "register" => self.create_account(&s("user")?, &s("password")?).map(|_| Value::Null),
            "login" => self.login(&s("user")?, &s("password")?).map(Value::String),
            "has_account" => Ok(Value::Bool(self.has_account(&s("user")?))),
            op => {
                let me = self.session_user(req.session.as_deref())?;
                match op {
                    "append" => self.append(&me, &s("to")?, &s("subject")?, &s("body")?).map(|id| json!(id)),
                    "list" => {
                        let unread = p.get("unread_only").and_then(Value::as_bool).unwrap_or(false);
                        value(self.list(&me, &s("prefix").unwrap_or_default(), unread))
                    }
                    "list_sent" => {
                        let to = s("to").ok();
                        value(self.list_sent(&me, to.as_deref(), &s("prefix").unwrap_or_default()))
                    }
                    "fetch" => self.fetch(&me, n("id")?).and_then(|m| value(vec![m])),
                    "mark_read" => self.mark_read(&me, n("id")?).map(|_| Value::Null),
                    "delete" => self.delete(&me, n("id")?).map(|_| Value::Null),
                    "delete_sent" => self.delete_sent(&me, &s("to")?, &s("subject")?).map(|c| json!(c)),
                    other => Err(SyncError::Unsupported(other.to_string())),
                }
            }
        }
    }
}

impl LineService for MailServer {
    fn handle_line(&mut self, line: &str) -> String {
        let result = serde_json::from_str::<Request>(line)
            .map_err(|e| SyncError::Protocol(e.to_string()))
            .and_then(|req| self.dispatch(req));
        serde_json::to_string(&Response::from_result(result)).expect("responses serialize")
    }
}

fn render_message_file(m: &MailMessage) -> String {
    format!(
        "Id: {}\nFrom: {}\nTo: {}\nSubject: {}\nRead: {}\nArrived: {}\n\n{}",
        m.id,
        m.from,
        m.to,
        m.subject,
        u8::from(m.read),
        m.arrived_ms,
        m.body
    )
}

fn parse_message_file(text: &str) -> Option<MailMessage> {
    let (head, body) = text.split_once("\n\n")?;
    let mut fields = BTreeMap::new();
    for line in head.lines() {
        let (k, v) = line.split_once(": ")?;
        fields.insert(k, v);
    }
    Some(MailMessage {
        id: fields.get("Id")?.parse().ok()?,
        from: fields.get("From")?.to_string(),
        to: fields.get("To")?.to_string(),
        subject: fields.get("Subject")?.to_string(),
        read: *fields.get("Read")? == "1",
        arrived_ms: fields.get("Arrived")?.parse().ok()?,
        body: body.to_string(),
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn server() -> MailServer {
        let mut s = MailServer::new(Clock::manual(0)).with_iterations(1);
        s.create_account("alice", "pw").unwrap();
        s.create_account("bob", "pw").unwrap();
        s
    }

    #[test]
    fn append_then_list() {
        let mut s = server();
        let id = s.append("alice", "bob", "PK", "AB").unwrap();
        let l = s.list("bob", "", false);
        assert_eq!(l.len(), 1);
        assert_eq!(l[0].id, id);
        assert!(s.list("alice", "", false).is_empty());
    }

    #[test]
    fn delete_then_absent() {
        let mut s = server();
        let id = s.append("alice", "bob", "PK", "AB").unwrap();
        s.delete("bob", id).unwrap();
        assert!(s.list("bob", "", false).is_empty());
        assert!(matches!(s.delete("bob", id), Err(SyncError::NotFound(_))));
    }

    #[test]
    fn unread_filter_excludes_read() {
        let mut s = server();
        let a = s.append("alice", "bob", "DK1", "00").unwrap();
        let b = s.append("alice", "bob", "DK2", "00").unwrap();
        s.fetch("bob", a).unwrap();
        let ids: Vec<u64> = s.list("bob", "DK", true).iter().map(|m| m.id).collect();
        assert_eq!(ids, vec![b]);
        assert_eq!(s.list("bob", "DK", false).len(), 2);
    }

    #[test]
    fn list_is_in_arrival_order_and_filters_prefix() {
        let mut s = server();
        for subj in ["PR3", "DK3", "PR1", "PK"] {
            s.append("alice", "bob", subj, "00").unwrap();
        }
        let subjects: Vec<String> = s.list("bob", "PR", false).into_iter().map(|m| m.subject).collect();
        assert_eq!(subjects, vec!["PR3", "PR1"]);
    }

    #[test]
    fn other_inbox_is_not_reachable() {
        let mut s = server();
        let id = s.append("alice", "bob", "PK", "AB").unwrap();
        assert!(s.delete("alice", id).is_err());
        assert!(s.fetch("alice", id).is_err());
        assert_eq!(s.delete_sent("alice", "bob", "PK").unwrap(), 1);
        assert_eq!(s.message_count(None), 0);
    }

    #[test]
    fn unknown_recipient_is_refused() {
        let mut s = server();
        assert_eq!(s.append("alice", "carol", "PK", "AB"), Err(SyncError::UnknownUser("carol".into())));
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Clock::manual(5);
        let (a, b);
        {
            let mut s = MailServer::open(dir.path(), clock.clone()).unwrap().with_iterations(1);
            s.create_account("alice", "pw").unwrap();
            s.create_account("bob", "pw").unwrap();
            a = s.append("alice", "bob", "DK7", "ABCD").unwrap();
            b = s.append("bob", "alice", "PK", "EF").unwrap();
            s.fetch("bob", a).unwrap();
            let gone = s.append("alice", "bob", "PR7", "01").unwrap();
            s.delete("bob", gone).unwrap();
        }
        let mut s = MailServer::open(dir.path(), clock).unwrap();
        let bob = s.list("bob", "", false);
        assert_eq!(bob.len(), 1);
        assert_eq!(bob[0].id, a);
        assert!(bob[0].read);
        assert_eq!(bob[0].body, "ABCD");
        assert_eq!(s.list("alice", "PK", true)[0].id, b);
        assert!(s.login("bob", "pw").is_ok());
        assert!(s.login("bob", "nope").is_err());
        let next = s.append("alice", "bob", "PK", "00").unwrap();
        assert!(next > b);
    }

    #[test]
    fn wire_round_trip() {
        let mut s = server();
        let line = |op: &str, session: Option<&str>, payload: Value| {
            serde_json::to_string(&Request { op: op.into(), session: session.map(str::to_string), payload }).unwrap()
        };
        let r: Response = serde_json::from_str(&s.handle_line(&line("login", None, json!({"user":"bob","password":"pw"})))).unwrap();
        let token = r.payload.as_str().unwrap().to_string();
        let r: Response = serde_json::from_str(&s.handle_line(&line("list", Some(&token), json!({})))).unwrap();
        assert!(r.ok);
        let r: Response = serde_json::from_str(&s.handle_line(&line("list", None, json!({})))).unwrap();
        assert_eq!(r.error, Some(SyncError::SessionExpired));
    }
}
