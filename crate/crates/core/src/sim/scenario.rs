//! Scenario files and the runner that plays them over a [`SimNet`].
//!
//! One command per line, `#` starts a comment:
//!
//! ```text
//! scenario <name>
//! backend service|mailbox
//! clients <user>...
//! policy <user> keep|delete
//! retain <user>
//! net <user> up|down|cut-after <n>|redirect <endpoint>|latency <ms>
//! phase <label>
//! <user> insert <n>
//! <user> grant|revoke <peer> all|<i>
//! <user> send|update all|<i>
//! <user> use all|<owner> <i>
//! <user> receive|flush|restart|restart-eager|rotate|rotate-local|publish-rotation
//! <user> request-resend <owner> <i>
//! <user> serve-resends
//! <user> discard-retired
//! expect <user> last ok|unreachable|key-not-found|failed
//! expect <user> owned|shared|received|visible|outbox <n>
//! expect <user> can-use <owner> <i> yes|no
//! expect <user> online yes|no
//! expect pending <n>
//! ```
//!
//! `<i>` is the owner's i-th inserted dossier, counting from 0.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::distributions::Alphanumeric;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::debug;

use super::net::{NetControl, SimNet};
use super::scan::{scan_bytes, scan_dir, Hit, Sentinel};
use crate::clock::Clock;
use crate::mailbox::{MailServer, MailboxBackend};
use crate::protocol::{Backend, Client, ClientConfig, ClientError, RevokePolicy, RowSource};
use crate::rowstore::Row;
use crate::service::wire::ServiceClient;
use crate::service::{ServiceConfig, Synchronizer};

pub const SERVICE_ENDPOINT: &str = "sync";
pub const MAILBOX_ENDPOINT: &str = "mail";
pub const TABLE: &str = "dossiers";

/// Scenario files shipped with the crate.
pub const BUILTIN: &[(&str, &str)] = &[
    ("outage-before-sync", include_str!("scenarios/outage-before-sync.txt")),
    ("outage-after-sync", include_str!("scenarios/outage-after-sync.txt")),
    ("cut-during-sync", include_str!("scenarios/cut-during-sync.txt")),
    ("rotation-race", include_str!("scenarios/rotation-race.txt")),
    ("rotation-race-retention", include_str!("scenarios/rotation-race-retention.txt")),
    ("rotation-race-resend", include_str!("scenarios/rotation-race-resend.txt")),
    ("mailbox-outage", include_str!("scenarios/mailbox-outage.txt")),
];

pub fn builtin(name: &str) -> Option<&'static str> {
    BUILTIN.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("unknown scenario {0}")]
    UnknownScenario(String),
    #[error("line {line}: {reason}")]
    Setup { line: usize, reason: String },
    #[error("client error: {0}")]
    Client(#[from] ClientError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Service,
    Mailbox,
}

impl FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "service" => Ok(BackendKind::Service),
            "mailbox" => Ok(BackendKind::Mailbox),
            other => Err(format!("unknown backend {other}")),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Service => "service",
            BackendKind::Mailbox => "mailbox",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    All,
    One(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Insert(usize),
    Grant(String, Target),
    Revoke(String, Target),
    Send(Target),
    Update(Target),
    UseAll,
    Use(String, usize),
    Receive,
    Flush,
    Restart { eager: bool },
    Rotate,
    RotateLocal,
    PublishRotation,
    RequestResend(String, usize),
    ServeResends,
    DiscardRetired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Ok,
    Unreachable,
    KeyNotFound,
    Failed,
}

impl FromStr for Outcome {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ok" => Ok(Outcome::Ok),
            "unreachable" => Ok(Outcome::Unreachable),
            "key-not-found" => Ok(Outcome::KeyNotFound),
            "failed" => Ok(Outcome::Failed),
            other => Err(format!("unknown outcome {other}")),
        }
    }
}

impl Outcome {
    pub(crate) fn of<T>(r: &Result<T, ClientError>) -> Outcome {
        match r {
            Ok(_) => Outcome::Ok,
            Err(e) if e.is_unreachable() => Outcome::Unreachable,
            Err(e) if e.is_key_not_found() => Outcome::KeyNotFound,
            Err(_) => Outcome::Failed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Counter {
    Owned,
    Shared,
    Received,
    Visible,
    Outbox,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expectation {
    Last(String, Outcome),
    Count(String, Counter, usize),
    CanUse(String, String, usize, bool),
    Online(String, bool),
    Pending(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Backend(BackendKind),
    Clients(Vec<String>),
    Policy(String, RevokePolicy),
    Retain(String),
    Net(String, NetControl),
    Phase(String),
    Act(String, Action),
    Expect(Expectation),
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub commands: Vec<(usize, String, Command)>,
}

fn target(s: Option<&str>) -> Result<Target, String> {
    match s {
        Some("all") => Ok(Target::All),
        Some(n) => n.parse().map(Target::One).map_err(|_| format!("bad dossier index {n}")),
        None => Err("missing target".into()),
    }
}

fn number(s: Option<&str>) -> Result<usize, String> {
    s.ok_or("missing number")?.parse().map_err(|_| "bad number".to_string())
}

fn word(s: Option<&str>, what: &str) -> Result<String, String> {
    s.map(str::to_string).ok_or_else(|| format!("missing {what}"))
}

fn yes_no(s: Option<&str>) -> Result<bool, String> {
    match s {
        Some("yes") => Ok(true),
        Some("no") => Ok(false),
        _ => Err("expected yes or no".into()),
    }
}

fn parse_action(verb: &str, args: &mut std::str::SplitWhitespace<'_>) -> Result<Action, String> {
    Ok(match verb {
        "insert" => Action::Insert(number(args.next())?),
        "grant" => Action::Grant(word(args.next(), "peer")?, target(args.next())?),
        "revoke" => Action::Revoke(word(args.next(), "peer")?, target(args.next())?),
        "send" => Action::Send(target(args.next())?),
        "update" => Action::Update(target(args.next())?),
        "use" => match args.next() {
            Some("all") => Action::UseAll,
            Some(owner) => Action::Use(owner.to_string(), number(args.next())?),
            None => return Err("missing target".into()),
        },
        "receive" => Action::Receive,
        "flush" => Action::Flush,
        "restart" => Action::Restart { eager: false },
        "restart-eager" => Action::Restart { eager: true },
        "rotate" => Action::Rotate,
        "rotate-local" => Action::RotateLocal,
        "publish-rotation" => Action::PublishRotation,
        "request-resend" => Action::RequestResend(word(args.next(), "owner")?, number(args.next())?),
        "serve-resends" => Action::ServeResends,
        "discard-retired" => Action::DiscardRetired,
        other => return Err(format!("unknown action {other}")),
    })
}

fn parse_line(line: &str) -> Result<Option<Command>, String> {
    let mut w = line.split_whitespace();
    let Some(head) = w.next() else { return Ok(None) };
    let cmd = match head {
        "scenario" => return Ok(None),
        "backend" => Command::Backend(word(w.next(), "backend")?.parse()?),
        "clients" => {
            let names: Vec<String> = w.by_ref().map(str::to_string).collect();
            if names.is_empty() {
                return Err("no clients".into());
            }
            Command::Clients(names)
        }
        "policy" => {
            let user = word(w.next(), "user")?;
            let p = match w.next() {
                Some("keep") => RevokePolicy::KeepCached,
                Some("delete") => RevokePolicy::DeleteLocal,
                _ => return Err("expected keep or delete".into()),
            };
            Command::Policy(user, p)
        }
        "retain" => Command::Retain(word(w.next(), "user")?),
        "net" => {
            let user = word(w.next(), "user")?;
            let mut c = NetControl::up();
            match w.next() {
                Some("up") => {}
                Some("down") => c.drop_all = true,
                Some("cut-after") => c.drop_after_n_messages = Some(number(w.next())? as u64),
                Some("redirect") => c.redirect_to = Some(word(w.next(), "endpoint")?),
                Some("latency") => c.latency_ms = number(w.next())? as u64,
                _ => return Err("unknown net control".into()),
            }
            Command::Net(user, c)
        }
        "phase" => Command::Phase(w.by_ref().collect::<Vec<_>>().join(" ")),
        "expect" => {
            let subject = word(w.next(), "subject")?;
            if subject == "pending" {
                Command::Expect(Expectation::Pending(number(w.next())?))
            } else {
                let what = word(w.next(), "expectation")?;
                let e = match what.as_str() {
                    "last" => Expectation::Last(subject, word(w.next(), "outcome")?.parse()?),
                    "online" => Expectation::Online(subject, yes_no(w.next())?),
                    "can-use" => {
                        let owner = word(w.next(), "owner")?;
                        let i = number(w.next())?;
                        Expectation::CanUse(subject, owner, i, yes_no(w.next())?)
                    }
                    counter => {
                        let c = match counter {
                            "owned" => Counter::Owned,
                            "shared" => Counter::Shared,
                            "received" => Counter::Received,
                            "visible" => Counter::Visible,
                            "outbox" => Counter::Outbox,
                            other => return Err(format!("unknown expectation {other}")),
                        };
                        Expectation::Count(subject, c, number(w.next())?)
                    }
                };
                Command::Expect(e)
            }
        }
        user => {
            let verb = word(w.next(), "action")?;
            Command::Act(user.to_string(), parse_action(&verb, &mut w)?)
        }
    };
    if let Some(extra) = w.next() {
        return Err(format!("unexpected {extra}"));
    }
    Ok(Some(cmd))
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, SimError> {
        let mut name = String::new();
        let mut commands = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(n) = line.strip_prefix("scenario ") {
                name = n.trim().to_string();
                continue;
            }
            match parse_line(line) {
                Ok(Some(c)) => commands.push((i + 1, line.to_string(), c)),
                Ok(None) => {}
                Err(reason) => return Err(SimError::Parse { line: i + 1, reason }),
            }
        }
        if name.is_empty() {
            return Err(SimError::Parse { line: 1, reason: "missing scenario name".into() });
        }
        Ok(Scenario { name, commands })
    }

    pub fn backend(&self) -> BackendKind {
        self.commands
            .iter()
            .find_map(|(_, _, c)| match c {
                Command::Backend(b) => Some(*b),
                _ => None,
            })
            .unwrap_or(BackendKind::Service)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capability {
    /// Owned dossiers readable locally.
    pub owned: usize,
    /// Delivered dossiers that could be opened.
    pub shared: usize,
    pub delivered: usize,
    /// Whether the synchronizer answers.
    pub online: bool,
    pub outbox: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub label: String,
    pub clients: BTreeMap<String, Capability>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssertionOutcome {
    pub line: usize,
    pub text: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub backend: BackendKind,
    pub seed: u64,
    pub steps: usize,
    pub phases: Vec<PhaseReport>,
    pub assertions: Vec<AssertionOutcome>,
    /// Sentinels found where they must not be.
    pub leaks: Vec<Hit>,
    pub passed: bool,
}

pub type SimClient = Client<Box<dyn Backend>>;

/// Everything a scenario acts on.
pub struct World {
    pub kind: BackendKind,
    pub net: SimNet,
    pub clock: Clock,
    pub service: Option<Arc<Mutex<Synchronizer>>>,
    pub mail: Option<Arc<Mutex<MailServer>>>,
    pub clients: BTreeMap<String, SimClient>,
    /// Dossier ids per owner, in insertion order.
    pub dossiers: BTreeMap<String, Vec<u64>>,
    pub versions: BTreeMap<u64, u32>,
    pub sentinels: Vec<Sentinel>,
    pub last: BTreeMap<String, Outcome>,
    rng: ChaCha8Rng,
    seed: u64,
    dir: Option<PathBuf>,
}

impl World {
    /// A fresh network with one synchronizer of the given kind. With `dir`,
    /// every store, journal and mailbox lives in files below it.
    pub fn new(kind: BackendKind, seed: u64, dir: Option<&Path>) -> Result<World, SimError> {
        let clock = Clock::manual(1_000_000);
        let net = SimNet::new(seed, clock.clone());
        let config = ServiceConfig { pbkdf2_iterations: 10, ..Default::default() };
        let (mut service, mut mail) = (None, None);
        match kind {
            BackendKind::Service => {
                let s = match dir {
                    Some(d) => {
                        std::fs::create_dir_all(d.join("service"))?;
                        Synchronizer::open(d.join("service/sync.journal"), clock.clone(), config)
                            .map_err(|e| SimError::Io(std::io::Error::other(e.to_string())))?
                    }
                    None => Synchronizer::new(clock.clone(), config),
                };
                let s = Arc::new(Mutex::new(s));
                net.add_endpoint(SERVICE_ENDPOINT, s.clone());
                service = Some(s);
            }
            BackendKind::Mailbox => {
                let m = match dir {
                    Some(d) => MailServer::open(d.join("mail"), clock.clone())?,
                    None => MailServer::new(clock.clone()),
                };
                let m = Arc::new(Mutex::new(m.with_iterations(10)));
                net.add_endpoint(MAILBOX_ENDPOINT, m.clone());
                mail = Some(m);
            }
        }
        Ok(World {
            kind,
            net,
            clock,
            service,
            mail,
            clients: BTreeMap::new(),
            dossiers: BTreeMap::new(),
            versions: BTreeMap::new(),
            sentinels: Vec::new(),
            last: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            dir: dir.map(Path::to_path_buf),
        })
    }

    pub fn backend_for(&self, user: &str) -> Box<dyn Backend> {
        match self.kind {
            BackendKind::Service => Box::new(ServiceClient::new(self.net.link(user, SERVICE_ENDPOINT))),
            BackendKind::Mailbox => {
                Box::new(MailboxBackend::new(self.net.link(user, MAILBOX_ENDPOINT), self.clock.clone()))
            }
        }
    }

    pub fn profile_dir(&self, user: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("clients").join(user))
    }

    /// Registers every user, then lets them introduce themselves.
    pub fn add_clients(&mut self, users: &[String]) -> Result<(), SimError> {
        for u in users {
            let config = ClientConfig { clock: self.clock.clone(), ..Default::default() };
            let backend = self.backend_for(u);
            let c = match self.profile_dir(u) {
                Some(dir) => Client::register_profile(dir, u, "pw", backend, config)?,
                None => Client::register_in_memory(u, "pw", backend, config)?,
            };
            self.clients.insert(u.clone(), c);
        }
        let all: Vec<String> = self.clients.keys().cloned().collect();
        for u in users {
            let c = self.clients.get_mut(u).expect("just added");
            c.backend_mut().introduce(&all).map_err(ClientError::from)?;
        }
        // Contacts exchange keys once at setup.
        for u in users {
            let c = self.clients.get_mut(u).expect("just added");
            for peer in all.iter().filter(|p| *p != u) {
                if let Err(e) = c.peer_key(peer) {
                    debug!(user = %u, peer = %peer, error = %e, "no key at setup");
                }
            }
        }
        Ok(())
    }

    pub fn client(&mut self, user: &str) -> Result<&mut SimClient, String> {
        self.clients.get_mut(user).ok_or_else(|| format!("unknown client {user}"))
    }

    pub fn dossier(&self, owner: &str, i: usize) -> Result<u64, String> {
        self.dossiers
            .get(owner)
            .and_then(|v| v.get(i).copied())
            .ok_or_else(|| format!("{owner} has no dossier {i}"))
    }

    fn targets(&self, owner: &str, t: &Target) -> Result<Vec<u64>, String> {
        match t {
            Target::All => Ok(self.dossiers.get(owner).cloned().unwrap_or_default()),
            Target::One(i) => Ok(vec![self.dossier(owner, *i)?]),
        }
    }

    /// A row for `owner`'s i-th dossier carrying a fresh sentinel.
    pub fn make_row(&mut self, owner: &str, i: usize, version: u32) -> Row {
        let filler: String = (&mut self.rng).sample_iter(&Alphanumeric).take(24).map(char::from).collect();
        let value = format!("SENTINEL-{:08X}-{owner}-{i}-{version}", self.seed as u32);
        self.sentinels.push(Sentinel { value: value.clone(), owner: owner.to_string(), shared: false });
        Row::new(TABLE, [("id", format!("{owner}-{i}")), ("note", value), ("filler", filler)])
            .expect("generated rows are valid")
    }

    fn mark_shared(&mut self, owner: &str) {
        for s in self.sentinels.iter_mut().filter(|s| s.owner == owner) {
            s.shared = true;
        }
    }

    pub fn act(&mut self, user: &str, action: &Action) -> Result<Outcome, String> {
        let outcome = match action {
            Action::Insert(n) => {
                let start = self.dossiers.get(user).map_or(0, Vec::len);
                for i in start..start + n {
                    let row = self.make_row(user, i, 0);
                    let d = self.client(user)?.insert(row).map_err(|e| e.to_string())?;
                    self.dossiers.entry(user.to_string()).or_default().push(d);
                    self.versions.insert(d, 0);
                }
                Outcome::Ok
            }
            Action::Grant(peer, t) => {
                let mut out = Outcome::Ok;
                for d in self.targets(user, t)? {
                    let r = self.client(user)?.grant(d, peer, &["id", "note", "filler"]);
                    out = worst(out, Outcome::of(&r));
                }
                self.mark_shared(user);
                out
            }
            Action::Revoke(peer, t) => {
                let mut out = Outcome::Ok;
                for d in self.targets(user, t)? {
                    out = worst(out, Outcome::of(&self.client(user)?.revoke(d, peer)));
                }
                out
            }
            Action::Send(t) => {
                let mut out = Outcome::Ok;
                for d in self.targets(user, t)? {
                    let r = self.client(user)?.send(d);
                    let queued = matches!(&r, Ok(o) if o.queued);
                    out = worst(out, if queued { Outcome::Unreachable } else { Outcome::of(&r) });
                }
                out
            }
            Action::Update(t) => {
                let mut out = Outcome::Ok;
                let ids = self.targets(user, t)?;
                let all = self.dossiers.get(user).cloned().unwrap_or_default();
                for d in ids {
                    let i = all.iter().position(|x| *x == d).expect("own dossier");
                    let v = self.versions.get(&d).copied().unwrap_or(0) + 1;
                    self.versions.insert(d, v);
                    let row = self.make_row(user, i, v);
                    self.mark_shared(user);
                    out = worst(out, Outcome::of(&self.client(user)?.update(d, row)));
                }
                out
            }
            Action::UseAll => {
                let c = self.client(user)?;
                let ids: Vec<u64> = c.deliveries().map(|(_, d)| d.dossier_id).collect();
                let mut out = Outcome::Ok;
                for d in ids {
                    out = worst(out, Outcome::of(&c.use_dossier(d)));
                }
                out
            }
            Action::Use(owner, i) => {
                let d = self.dossier(owner, *i)?;
                Outcome::of(&self.client(user)?.use_dossier(d))
            }
            Action::Receive => Outcome::of(&self.client(user)?.receive()),
            Action::Flush => match self.client(user)?.flush_outbox() {
                Ok(0) => Outcome::Ok,
                Ok(_) => Outcome::Unreachable,
                Err(_) => Outcome::Failed,
            },
            Action::Restart { eager } => Outcome::of(&self.client(user)?.restart(*eager)),
            Action::Rotate => Outcome::of(&self.client(user)?.rotate_keypair()),
            Action::RotateLocal => Outcome::of(&self.client(user)?.rotate_keypair_local()),
            Action::PublishRotation => Outcome::of(&self.client(user)?.publish_rotation()),
            Action::RequestResend(owner, i) => {
                let d = self.dossier(owner, *i)?;
                match self.client(user)?.request_resend(owner, d) {
                    Ok(true) => Outcome::Ok,
                    Ok(false) => Outcome::Unreachable,
                    Err(e) if e.is_unreachable() => Outcome::Unreachable,
                    Err(_) => Outcome::Failed,
                }
            }
            Action::ServeResends => Outcome::of(&self.client(user)?.process_resend_requests()),
            Action::DiscardRetired => {
                self.client(user)?.discard_retired_keys();
                Outcome::Ok
            }
        };
        self.last.insert(user.to_string(), outcome);
        Ok(outcome)
    }

    fn online(&mut self, user: &str) -> Result<bool, String> {
        Ok(self.client(user)?.backend_mut().list_keys().is_ok())
    }

    /// Tries every delivered dossier. Leaves phases as `use` leaves them.
    fn openable(&mut self, user: &str) -> Result<(usize, usize), String> {
        let c = self.client(user)?;
        let ids: Vec<u64> = c.deliveries().map(|(_, d)| d.dossier_id).collect();
        let ok = ids.iter().filter(|d| c.use_dossier(**d).is_ok()).count();
        Ok((ok, ids.len()))
    }

    pub fn capability(&mut self, user: &str) -> Result<Capability, String> {
        let owned = {
            let c = self.client(user)?;
            let ids: Vec<u64> = c.owned_dossiers().map(|(d, _, _)| d).collect();
            ids.iter().filter(|d| c.owned_row(**d).is_ok()).count()
        };
        let (shared, delivered) = self.openable(user)?;
        let online = self.online(user)?;
        let outbox = self.client(user)?.outbox_len();
        Ok(Capability { owned, shared, delivered, online, outbox })
    }

    fn pending(&self) -> usize {
        if let Some(s) = &self.service {
            return s.lock().unwrap_or_else(|p| p.into_inner()).pending_count();
        }
        self.mail
            .as_ref()
            .map(|m| {
                m.lock().unwrap_or_else(|p| p.into_inner()).all_messages().filter(|m| m.subject.starts_with("PR")).count()
            })
            .unwrap_or(0)
    }

    pub fn check(&mut self, e: &Expectation) -> Result<(bool, String), String> {
        Ok(match e {
            Expectation::Last(user, want) => {
                let got = self.last.get(user).copied();
                (got == Some(*want), format!("last outcome {got:?}"))
            }
            Expectation::Count(user, counter, want) => {
                let got = match counter {
                    Counter::Owned => self.capability(user)?.owned,
                    Counter::Shared => self.openable(user)?.0,
                    Counter::Received => self.client(user)?.deliveries().count(),
                    Counter::Visible => {
                        let v = self.client(user)?.logical_view();
                        v.rows.values().filter(|(_, s)| matches!(s, RowSource::Shared { .. })).count() + v.sealed.len()
                    }
                    Counter::Outbox => self.client(user)?.outbox_len(),
                };
                (got == *want, format!("got {got}"))
            }
            Expectation::CanUse(user, owner, i, want) => {
                let d = self.dossier(owner, *i)?;
                let r = self.client(user)?.use_dossier(d);
                let detail = match &r {
                    Ok(_) => "opened".to_string(),
                    Err(e) => e.to_string(),
                };
                (r.is_ok() == *want, detail)
            }
            Expectation::Online(user, want) => {
                let got = self.online(user)?;
                (got == *want, format!("online {got}"))
            }
            Expectation::Pending(want) => {
                let got = self.pending();
                (got == *want, format!("got {got}"))
            }
        })
    }

    fn owner_of_path(&self, path: &Path) -> Option<String> {
        let clients = self.dir.as_ref()?.join("clients");
        let rel = path.strip_prefix(clients).ok()?;
        rel.components().next().map(|c| c.as_os_str().to_string_lossy().into_owned())
    }

    /// Sentinels in synchronizer storage, the capture, or any file that is
    /// not the owner's own.
    pub fn leaks(&mut self) -> Result<Vec<Hit>, SimError> {
        for c in self.clients.values_mut() {
            c.checkpoint()?;
        }
        let mut hits = Vec::new();
        for ex in self.net.capture() {
            let bytes = format!("{}\n{}", ex.request, ex.response);
            hits.extend(scan_bytes(&format!("capture:{}", ex.endpoint), bytes.as_bytes(), &self.sentinels));
        }
        if let Some(dir) = &self.dir {
            hits.extend(scan_dir(dir, &self.sentinels, |p| self.owner_of_path(p))?);
        } else {
            if let Some(s) = &self.service {
                let bytes = s.lock().unwrap_or_else(|p| p.into_inner()).storage_bytes();
                hits.extend(scan_bytes("service", &bytes, &self.sentinels));
            }
            if let Some(m) = &self.mail {
                let m = m.lock().unwrap_or_else(|p| p.into_inner());
                for msg in m.all_messages() {
                    hits.extend(scan_bytes(&format!("mail:{}", msg.id), msg.body.as_bytes(), &self.sentinels));
                }
            }
            for (user, c) in &self.clients {
                if let Some(files) = c.store().memory_files() {
                    let foreign: Vec<&Sentinel> = self.sentinels.iter().filter(|s| &s.owner != user).collect();
                    hits.extend(scan_bytes(&format!("{user}:snapshot"), &files.snapshot, foreign.iter().copied()));
                    hits.extend(scan_bytes(&format!("{user}:journal"), &files.journal, foreign.iter().copied()));
                }
            }
        }
        hits.sort();
        hits.dedup();
        Ok(hits)
    }
}

fn worst(a: Outcome, b: Outcome) -> Outcome {
    let rank = |o: Outcome| match o {
        Outcome::Ok => 0,
        Outcome::Unreachable => 1,
        Outcome::KeyNotFound => 2,
        Outcome::Failed => 3,
    };
    if rank(b) > rank(a) {
        b
    } else {
        a
    }
}

/// Plays a parsed scenario. Assertion failures are reported, not returned.
pub fn run(scenario: &Scenario, seed: u64, backend: BackendKind, dir: Option<&Path>) -> Result<ScenarioReport, SimError> {
    let mut world = World::new(backend, seed, dir)?;
    let mut report = ScenarioReport {
        name: scenario.name.clone(),
        backend,
        seed,
        steps: 0,
        phases: Vec::new(),
        assertions: Vec::new(),
        leaks: Vec::new(),
        passed: false,
    };
    for (line, text, cmd) in &scenario.commands {
        let setup = |reason: String| SimError::Setup { line: *line, reason };
        match cmd {
            Command::Backend(_) => {}
            Command::Clients(users) => world.add_clients(users)?,
            Command::Policy(user, p) => world.client(user).map_err(setup)?.config_mut().revoke_policy = *p,
            Command::Retain(user) => world.client(user).map_err(setup)?.config_mut().retain_old_keys = true,
            Command::Net(user, c) => world.net.set_control(user, c.clone()),
            Command::Phase(label) => {
                let users: Vec<String> = world.clients.keys().cloned().collect();
                let mut clients = BTreeMap::new();
                for u in users {
                    clients.insert(u.clone(), world.capability(&u).map_err(setup)?);
                }
                report.phases.push(PhaseReport { label: label.clone(), clients });
            }
            Command::Act(user, action) => {
                world.act(user, action).map_err(setup)?;
                report.steps += 1;
            }
            Command::Expect(e) => {
                let (passed, detail) = world.check(e).map_err(setup)?;
                report.assertions.push(AssertionOutcome { line: *line, text: text.clone(), passed, detail });
            }
        }
    }
    report.leaks = world.leaks()?;
    report.passed = report.leaks.is_empty() && report.assertions.iter().all(|a| a.passed);
    Ok(report)
}

/// Runs a built-in scenario on the backend it names.
pub fn run_scenario(name: &str, seed: u64) -> Result<ScenarioReport, SimError> {
    let text = builtin(name).ok_or_else(|| SimError::UnknownScenario(name.to_string()))?;
    let s = Scenario::parse(text)?;
    let backend = s.backend();
    run(&s, seed, backend, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mitigation {
    None,
    Retention,
    Resend,
}

/// A receiver rotates its key pair after the owner has wrapped with the old
/// public key.
pub fn run_key_rotation_race(seed: u64, mitigation: Mitigation) -> Result<ScenarioReport, SimError> {
    let name = match mitigation {
        Mitigation::None => "rotation-race",
        Mitigation::Retention => "rotation-race-retention",
        Mitigation::Resend => "rotation-race-resend",
    };
    run_scenario(name, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse() {
        for (name, text) in BUILTIN {
            let s = Scenario::parse(text).unwrap();
            assert_eq!(&s.name, name);
        }
    }

    #[test]
    fn parse_errors_carry_the_line() {
        let err = Scenario::parse("scenario x\nclients a\na fly\n").unwrap_err();
        assert!(matches!(err, SimError::Parse { line: 3, .. }), "{err}");
        assert!(Scenario::parse("clients a\n").is_err());
        assert!(Scenario::parse("scenario x\nnet a sideways\n").is_err());
        assert!(Scenario::parse("scenario x\nexpect a owned 1 2\n").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let s = Scenario::parse("# intro\nscenario x\n\nclients a b # two\nbackend mailbox\n").unwrap();
        assert_eq!(s.commands.len(), 2);
        assert_eq!(s.backend(), BackendKind::Mailbox);
    }
}
