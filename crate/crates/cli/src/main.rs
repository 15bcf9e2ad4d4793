//! `dossier`: operator front end for the synchronizer, clients, simulations
//! and benchmarks. See README for flags and exit codes.

mod exit;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use dossier_core::bench::{self, BenchConfig, Mode};
use dossier_core::clock::Clock;
use dossier_core::mailbox::{MailServer, MailboxBackend, MailboxSnapshot};
use dossier_core::protocol::{Backend, Client, ClientConfig};
use dossier_core::rowstore::Row;
use dossier_core::service::tcp;
use dossier_core::service::wire::ServiceClient;
use dossier_core::service::{ServiceConfig, Synchronizer};
use dossier_core::sim::{self, Mitigation, BUILTIN};
use dossier_core::transport::TcpTransport;

use exit::{Category, CliError};

/// Version of the `--json` output schema.
const JSON_VERSION: u32 = 1;
const REMOTE_FILE: &str = "remote.json";
const MAILBOX_FILE: &str = "mailbox.json";

#[derive(Parser)]
#[command(name = "dossier", version, about = "Encrypted row sharing through an untrusted synchronizer")]
struct Cli {
    /// Client profile directory.
    #[arg(long, global = true, env = "DOSSIER_PROFILE")]
    profile: Option<PathBuf>,
    /// Synchronizer or mailbox address, host:port.
    #[arg(long, global = true, env = "DOSSIER_SERVER")]
    server: Option<String>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum BackendArg {
    Service,
    Mailbox,
}

#[derive(Subcommand)]
enum Command {
    /// Run a synchronizer (or mail server) until killed.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7450")]
        listen: String,
        /// Directory for persistent state. In memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "service")]
        backend: BackendArg,
        #[arg(long)]
        pbkdf2_iterations: Option<u32>,
    },
    /// Create a user and a new profile.
    Register {
        #[arg(long)]
        user: String,
        #[arg(long, env = "DOSSIER_PASSWORD")]
        password: String,
        #[arg(long, value_enum, default_value = "service")]
        backend: BackendArg,
    },
    /// Insert an owned row. The first COL=VALUE pair is the primary key.
    Insert {
        #[arg(long, default_value = "dossiers")]
        table: String,
        #[arg(required = true, value_name = "COL=VALUE")]
        fields: Vec<String>,
    },
    /// Replace an owned row.
    Update {
        dossier: u64,
        #[arg(required = true, value_name = "COL=VALUE")]
        fields: Vec<String>,
    },
    /// Authorize a receiver and deposit a key.
    Grant {
        dossier: u64,
        receiver: String,
        /// Comma-separated columns. All columns when absent.
        #[arg(long, value_delimiter = ',')]
        columns: Vec<String>,
    },
    /// Send the current version of a dossier to every grantee.
    Send { dossier: u64 },
    /// Fetch pending rows. They stay encrypted until used.
    Receive,
    /// Decrypt and print a received dossier.
    Use { dossier: u64 },
    /// Withdraw a receiver's access.
    Revoke { dossier: u64, receiver: String },
    /// Ask an owner to send a dossier again, or serve such requests.
    Resend {
        owner: Option<String>,
        dossier: Option<u64>,
        /// Serve queued requests as the owner.
        #[arg(long, conflicts_with_all = ["owner", "dossier"])]
        serve: bool,
    },
    /// Owned and received dossiers.
    List,
    /// Compare grants with the keys the synchronizer holds.
    Audit,
    /// One mailbox round: introduce, announce, flush and receive.
    MailboxSync {
        /// Peers to send our public key to.
        #[arg(long, value_delimiter = ',')]
        introduce: Vec<String>,
    },
    /// Fault and adversary simulations.
    Scenario {
        #[command(subcommand)]
        command: ScenarioCommand,
    },
    /// Benchmarks.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// Names of the built-in scenarios.
    List,
    /// Run a built-in scenario, a scenario file, or `redirection-attack`.
    Run {
        name: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Keep every store, journal and mailbox as files under this directory.
        #[arg(long)]
        dir: Option<PathBuf>,
        /// For `rotation-race`: how the receiver copes with the rotation.
        #[arg(long, value_enum)]
        mitigation: Option<MitigationArg>,
    },
}

#[derive(Args, Clone)]
struct BenchArgs {
    #[arg(long, default_value_t = 2)]
    clients: usize,
    #[arg(long, default_value_t = 200)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    receivers: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Plain local database only.
    #[arg(long)]
    plain: bool,
}

impl BenchArgs {
    fn config(&self) -> BenchConfig {
        BenchConfig {
            num_clients: self.clients,
            dossier_size_bytes: self.size,
            receivers: self.receivers,
            repeats: self.repeats,
            seed: self.seed,
            mode: if self.plain { Mode::Plain } else { Mode::Encrypted },
            ..Default::default()
        }
    }
}

#[derive(Subcommand)]
enum BenchCommand {
    Run {
        #[arg(long, default_value_t = 1000)]
        dossiers: usize,
        /// Percentage of dossiers shared.
        #[arg(long, default_value_t = 20)]
        shared: u32,
        #[command(flatten)]
        args: BenchArgs,
    },
    /// Every size at every percentage, as CSV.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "1000,10000,100000")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "20,40")]
        shared: Vec<u32>,
        /// CSV destination. Standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        args: BenchArgs,
    },
}

#[derive(Serialize, Deserialize)]
struct Remote {
    server: String,
    backend: BackendArg,
}

/// What a command produced: a JSON value and its human rendering.
struct Output {
    value: Value,
    text: String,
}

impl Output {
    fn new(value: Value, text: impl Into<String>) -> Self {
        Output { value, text: text.into() }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env("DOSSIER_LOG"))
        .with_writer(io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { Category::Usage.code() } else { 0 };
            e.print().ok();
            return ExitCode::from(code as u8);
        }
    };
    let json = cli.json;
    let name = command_name(&cli.command);
    match run(cli) {
        Ok(out) => {
            if json {
                let v = json!({ "version": JSON_VERSION, "command": name, "ok": true, "result": out.value });
                emit(&v.to_string());
            } else if !out.text.is_empty() {
                emit(&out.text);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            if json {
                let v = json!({
                    "version": JSON_VERSION,
                    "command": name,
                    "ok": false,
                    "error": { "category": e.category.name(), "message": e.message },
                });
                eprintln!("{v}");
            } else {
                eprintln!("dossier: {e}");
            }
            ExitCode::from(e.category.code() as u8)
        }
    }
}

/// Writes one line to stdout. A closed pipe is not an error worth a panic.
fn emit(line: &str) {
    let _ = writeln!(io::stdout().lock(), "{line}");
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Serve { .. } => "serve",
        Command::Register { .. } => "register",
        Command::Insert { .. } => "insert",
        Command::Update { .. } => "update",
        Command::Grant { .. } => "grant",
        Command::Send { .. } => "send",
        Command::Receive => "receive",
        Command::Use { .. } => "use",
        Command::Revoke { .. } => "revoke",
        Command::Resend { .. } => "resend",
        Command::List => "list",
        Command::Audit => "audit",
        Command::MailboxSync { .. } => "mailbox-sync",
        Command::Scenario { .. } => "scenario",
        Command::Bench { .. } => "bench",
    }
}

fn run(cli: Cli) -> CliResult<Output> {
    match cli.command {
        Command::Serve { listen, data, backend, pbkdf2_iterations } => serve(&listen, data, backend, pbkdf2_iterations),
        Command::Register { user, password, backend } => {
            let dir = profile_dir(&cli.profile)?;
            let server = cli.server.ok_or_else(|| CliError::usage("--server or DOSSIER_SERVER is required"))?;
            register(&dir, &server, backend, &user, &password)
        }
        Command::Scenario { command } => scenario(command),
        Command::Bench { command } => bench_command(command),
        command => {
            let dir = profile_dir(&cli.profile)?;
            let remote = load_remote(&dir, cli.server)?;
            with_client(&dir, &remote, command)
        }
    }
}

fn profile_dir(p: &Option<PathBuf>) -> CliResult<PathBuf> {
    p.clone().ok_or_else(|| CliError::usage("--profile or DOSSIER_PROFILE is required"))
}

fn load_remote(dir: &Path, server: Option<String>) -> CliResult<Remote> {
    let path = dir.join(REMOTE_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| CliError::new(Category::Io, format!("{}: {e}", path.display())))?;
    let mut remote: Remote = serde_json::from_str(&text)?;
    if let Some(s) = server {
        remote.server = s;
    }
    Ok(remote)
}

fn transport(server: &str) -> CliResult<TcpTransport> {
    TcpTransport::new(server).map_err(|e| CliError::usage(format!("bad server address {server}: {e}")))
}

fn client_config() -> ClientConfig {
    ClientConfig { clock: Clock::System, ..Default::default() }
}

fn serve(listen: &str, data: Option<PathBuf>, backend: BackendArg, iterations: Option<u32>) -> CliResult<Output> {
    let handle = match backend {
        BackendArg::Service => {
            let mut config = ServiceConfig::default();
            if let Some(i) = iterations {
                config.pbkdf2_iterations = i;
            }
            let s = match &data {
                Some(d) => {
                    fs::create_dir_all(d)?;
                    Synchronizer::open(d.join("sync.journal"), Clock::System, config)
                        .map_err(|e| CliError::new(Category::Io, e.to_string()))?
                }
                None => Synchronizer::new(Clock::System, config),
            };
            tcp::spawn(listen, Arc::new(Mutex::new(s)))?
        }
        BackendArg::Mailbox => {
            let mut m = match &data {
                Some(d) => MailServer::open(d, Clock::System)?,
                None => MailServer::new(Clock::System),
            };
            if let Some(i) = iterations {
                m = m.with_iterations(i);
            }
            tcp::spawn(listen, Arc::new(Mutex::new(m)))?
        }
    };
    // Tests and scripts read the bound address from this line.
    println!("listening on {}", handle.local_addr());
    io::stdout().flush()?;
    handle.join();
    Ok(Output::new(Value::Null, ""))
}

fn register(dir: &Path, server: &str, backend: BackendArg, user: &str, password: &str) -> CliResult<Output> {
    let t = transport(server)?;
    let key = match backend {
        BackendArg::Service => {
            let c = Client::register_profile(dir, user, password, ServiceClient::new(t), client_config())?;
            c.public_key()
        }
        BackendArg::Mailbox => {
            let c = Client::register_profile(dir, user, password, MailboxBackend::new(t, Clock::System), client_config())?;
            save_mailbox(dir, c.backend().snapshot())?;
            c.public_key()
        }
    };
    let remote = Remote { server: server.to_string(), backend };
    fs::write(dir.join(REMOTE_FILE), serde_json::to_vec_pretty(&remote)?)?;
    let key_id = key.key_id().to_string();
    Ok(Output::new(json!({ "user": user, "key_id": key_id }), format!("registered {user} (key {key_id})")))
}

fn save_mailbox(dir: &Path, snapshot: &MailboxSnapshot) -> CliResult<()> {
    fs::write(dir.join(MAILBOX_FILE), serde_json::to_vec(snapshot)?)?;
    Ok(())
}

fn with_client(dir: &Path, remote: &Remote, command: Command) -> CliResult<Output> {
    let t = transport(&remote.server)?;
    match remote.backend {
        BackendArg::Service => {
            let mut c = Client::open_profile(dir, ServiceClient::new(t), client_config())?;
            let out = client_command(&mut c, command);
            c.shutdown()?;
            out
        }
        BackendArg::Mailbox => {
            let snapshot: MailboxSnapshot = match fs::read(dir.join(MAILBOX_FILE)) {
                Ok(bytes) => serde_json::from_slice(&bytes)?,
                Err(e) if e.kind() == io::ErrorKind::NotFound => MailboxSnapshot::default(),
                Err(e) => return Err(e.into()),
            };
            let backend = MailboxBackend::new(t, Clock::System).with_snapshot(snapshot);
            let mut c = Client::open_profile(dir, backend, client_config())?;
            let out = match command {
                Command::MailboxSync { introduce } => mailbox_sync(&mut c, &introduce),
                other => client_command(&mut c, other),
            };
            save_mailbox(dir, c.backend().snapshot())?;
            c.shutdown()?;
            out
        }
    }
}

fn parse_fields(fields: &[String]) -> CliResult<Vec<(String, String)>> {
    fields
        .iter()
        .map(|f| {
            f.split_once('=')
                .map(|(c, v)| (c.to_string(), v.to_string()))
                .ok_or_else(|| CliError::usage(format!("expected COL=VALUE, got {f:?}")))
        })
        .collect()
}

fn row_json(row: &Row) -> Value {
    let fields: serde_json::Map<String, Value> =
        row.fields().iter().map(|(c, v)| (c.clone(), Value::String(v.clone()))).collect();
    json!({ "table": row.table(), "fields": fields })
}

fn row_text(row: &Row) -> String {
    row.fields().iter().map(|(c, v)| format!("{c}={v}")).collect::<Vec<_>>().join("\n")
}

fn client_command<B: Backend>(c: &mut Client<B>, command: Command) -> CliResult<Output> {
    Ok(match command {
        Command::Insert { table, fields } => {
            let row = Row::new(table, parse_fields(&fields)?).map_err(|e| CliError::usage(e.to_string()))?;
            let d = c.insert(row)?;
            Output::new(json!({ "dossier_id": d }), d.to_string())
        }
        Command::Update { dossier, fields } => {
            let table = c.owned_row(dossier)?.table().to_string();
            let row = Row::new(table, parse_fields(&fields)?).map_err(|e| CliError::usage(e.to_string()))?;
            c.update(dossier, row)?;
            Output::new(json!({ "dossier_id": dossier }), format!("updated {dossier}"))
        }
        Command::Grant { dossier, receiver, columns } => {
            let columns: Vec<String> = if columns.is_empty() {
                c.owned_row(dossier)?.columns().map(str::to_string).collect()
            } else {
                columns
            };
            let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
            let g = c.grant(dossier, &receiver, &cols)?;
            Output::new(
                json!({ "dossier_id": dossier, "receiver": receiver, "key_version": g.key_version, "columns": columns }),
                format!("granted {receiver} on {dossier} ({})", columns.join(",")),
            )
        }
        Command::Send { dossier } => {
            let o = c.send(dossier)?;
            let text = if o.queued {
                format!("queued {dossier} for {} receivers", o.receivers)
            } else {
                format!("sent {dossier} to {} receivers", o.receivers)
            };
            Output::new(json!({ "dossier_id": dossier, "receivers": o.receivers, "queued": o.queued, "row_ids": o.row_ids }), text)
        }
        Command::Receive => {
            let n = c.receive()?;
            Output::new(json!({ "stored": n }), format!("received {n}"))
        }
        Command::Use { dossier } => {
            let row = c.use_dossier(dossier)?;
            Output::new(json!({ "dossier_id": dossier, "row": row_json(&row) }), row_text(&row))
        }
        Command::Revoke { dossier, receiver } => {
            let had = c.revoke(dossier, &receiver)?;
            Output::new(
                json!({ "dossier_id": dossier, "receiver": receiver, "revoked": had }),
                if had { format!("revoked {receiver} on {dossier}") } else { format!("{receiver} had no grant on {dossier}") },
            )
        }
        Command::Resend { serve: true, .. } => {
            let (served, refused) = c.process_resend_requests()?;
            Output::new(
                json!({ "served": served.len(), "refused": refused.len() }),
                format!("served {} refused {}", served.len(), refused.len()),
            )
        }
        Command::Resend { owner: Some(owner), dossier: Some(d), .. } => {
            let sent = c.request_resend(&owner, d)?;
            Output::new(json!({ "owner": owner, "dossier_id": d, "queued": !sent }), format!("requested {d} from {owner}"))
        }
        Command::Resend { .. } => return Err(CliError::usage("resend needs OWNER DOSSIER or --serve")),
        Command::List => {
            let owned: Vec<Value> =
                c.owned_dossiers().map(|(d, t, pk)| json!({ "dossier_id": d, "table": t, "pk": pk })).collect();
            let received: Vec<Value> = c
                .deliveries()
                .map(|(_, d)| json!({ "dossier_id": d.dossier_id, "owner": d.owner, "key_version": d.key_version }))
                .collect();
            let mut text = String::new();
            for o in &owned {
                text.push_str(&format!("owned    {} {}/{}\n", o["dossier_id"], o["table"].as_str().unwrap_or(""), o["pk"].as_str().unwrap_or("")));
            }
            for r in &received {
                text.push_str(&format!("received {} from {}\n", r["dossier_id"], r["owner"].as_str().unwrap_or("")));
            }
            Output::new(json!({ "owned": owned, "received": received }), text.trim_end().to_string())
        }
        Command::Audit => {
            let findings = c.audit()?;
            let text = if findings.is_empty() { "no findings".to_string() } else { format!("{findings:?}") };
            Output::new(serde_json::to_value(&findings)?, text)
        }
        Command::MailboxSync { .. } => {
            return Err(CliError::usage("mailbox-sync needs a profile registered with --backend mailbox"))
        }
        Command::Serve { .. } | Command::Register { .. } | Command::Scenario { .. } | Command::Bench { .. } => {
            unreachable!("handled before a client is opened")
        }
    })
}

fn mailbox_sync(c: &mut Client<MailboxBackend<TcpTransport>>, introduce: &[String]) -> CliResult<Output> {
    if !introduce.is_empty() {
        c.backend_mut().introduce(introduce)?;
    }
    let announced = c.backend_mut().announce()?;
    let outbox = c.flush_outbox()?;
    let stored = c.receive()?;
    let counts = c.backend().counts();
    Ok(Output::new(
        json!({ "announced": announced, "outbox": outbox, "stored": stored, "counts": counts }),
        format!("announced {announced}, outbox {outbox}, stored {stored}"),
    ))
}

fn scenario(command: ScenarioCommand) -> CliResult<Output> {
    match command {
        ScenarioCommand::List => {
            let mut names: Vec<&str> = BUILTIN.iter().map(|(n, _)| *n).collect();
            names.push("redirection-attack");
            Ok(Output::new(json!(names), names.join("\n")))
        }
        ScenarioCommand::Run { name, seed, dir, mitigation } => {
            if name == "redirection-attack" {
                let r = sim::run_redirection_attack(seed)?;
                let text = format!(
                    "{} redirection-attack seed {seed}: {} exchanges, {} plaintext hits, {} of {} keys opened",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.exchanges_captured,
                    r.plaintext_hits.len(),
                    r.wrapped_keys_opened,
                    r.wrapped_keys_seen
                );
                return finish_scenario(r.passed, serde_json::to_value(&r)?, text);
            }
            let name = match (name.as_str(), mitigation) {
                ("rotation-race", Some(m)) => match Mitigation::from(m) {
                    Mitigation::None => "rotation-race".to_string(),
                    Mitigation::Retention => "rotation-race-retention".to_string(),
                    Mitigation::Resend => "rotation-race-resend".to_string(),
                },
                (_, Some(_)) => return Err(CliError::usage("--mitigation applies to rotation-race only")),
                _ => name,
            };
            let text = match sim::builtin(&name) {
                Some(t) => t.to_string(),
                None if Path::new(&name).is_file() => fs::read_to_string(&name)?,
                None => return Err(sim::SimError::UnknownScenario(name).into()),
            };
            let s = sim::Scenario::parse(&text)?;
            if let Some(d) = &dir {
                fs::create_dir_all(d)?;
            }
            let r = sim::run(&s, seed, s.backend(), dir.as_deref())?;
            let mut lines = vec![format!(
                "{} {} ({}) seed {seed}: {} steps, {} leaks",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.backend,
                r.steps,
                r.leaks.len()
            )];
            for a in &r.assertions {
                lines.push(format!("  {} line {}: {} ({})", if a.passed { "ok  " } else { "FAIL" }, a.line, a.text, a.detail));
            }
            finish_scenario(r.passed, serde_json::to_value(&r)?, lines.join("\n"))
        }
    }
}

/// A failed scenario still prints its report, then exits nonzero.
fn finish_scenario(passed: bool, value: Value, text: String) -> CliResult<Output> {
    if passed {
        return Ok(Output::new(value, text));
    }
    emit(&text);
    Err(CliError::new(Category::Integrity, "scenario assertions failed"))
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MitigationArg {
    None,
    Retention,
    Resend,
}

impl From<MitigationArg> for Mitigation {
    fn from(m: MitigationArg) -> Self {
        match m {
            MitigationArg::None => Mitigation::None,
            MitigationArg::Retention => Mitigation::Retention,
            MitigationArg::Resend => Mitigation::Resend,
        }
    }
}

fn bench_command(command: BenchCommand) -> CliResult<Output> {
    match command {
        BenchCommand::Run { dossiers, shared, args } => {
            let config = BenchConfig { num_dossiers: dossiers, pct_shared: shared, ..args.config() };
            let r = bench::run(&config)?;
            let p = &r.phases;
            let text = format!(
                "dossiers {} shared {} ({}%)\ncreate {:.1} ms\npopulate {:.1} ms\nshare {:.1} ms\nreceive {:.1} ms\nopen {:.1} ms\ntotal {:.1} ms\nplain {:.1} ms\noverhead {:.1}%\nencryptions {} decryptions {}",
                dossiers, r.shared, shared, p.create, p.populate, p.share, p.receive, p.open, r.total_ms, r.plain_total_ms,
                r.overhead_pct, r.encryptions, r.decryptions
            );
            Ok(Output::new(serde_json::to_value(&r)?, text))
        }
        BenchCommand::Sweep { sizes, shared, out, args } => {
            let configs = bench::grid(&sizes, &shared, &args.config());
            let reports = match &out {
                Some(path) => bench::sweep(&configs, fs::File::create(path)?)?,
                None => bench::sweep(&configs, io::stdout())?,
            };
            let text = match &out {
                Some(path) => format!("wrote {} rows to {}", reports.len(), path.display()),
                None => String::new(),
            };
            Ok(Output::new(serde_json::to_value(&reports)?, text))
        }
    }
}
