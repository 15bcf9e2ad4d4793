//! Timed create, populate, share, receive and open phases, run once with
//! encryption and sharing and once as a plain local database holding the same
//! number of rows.

use std::io;
use std::time::{Duration, Instant};

use rand::distributions::Alphanumeric;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::protocol::{Client, ClientConfig, ClientError};
use crate::rowstore::{MemoryFiles, NoKeys, Row, Store, StoreError};
use crate::service::wire::ServiceClient;
use crate::service::{ServiceConfig, Synchronizer};
use crate::transport::{shared, LocalTransport};

const TABLE: &str = "dossiers";
const COLUMNS: [&str; 2] = ["id", "body"];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Encrypted,
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub num_dossiers: usize,
    pub num_clients: usize,
    pub pct_shared: u32,
    pub dossier_size_bytes: usize,
    /// Receivers per shared dossier.
    pub receivers: usize,
    pub mode: Mode,
    pub repeats: usize,
    pub seed: u64,
    /// Password hashing cost on the synchronizer.
    pub pbkdf2_iterations: u32,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            num_dossiers: 1000,
            num_clients: 2,
            pct_shared: 20,
            dossier_size_bytes: 200,
            receivers: 1,
            mode: Mode::Encrypted,
            repeats: 3,
            seed: 1,
            pbkdf2_iterations: ServiceConfig::default().pbkdf2_iterations,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Config(m.to_string()));
        if self.pct_shared > 100 {
            return bad("pct_shared must be at most 100");
        }
        if self.pct_shared > 0 && self.num_clients < 2 {
            return bad("sharing needs at least two clients");
        }
        if self.pct_shared > 0 && (self.receivers == 0 || self.receivers >= self.num_clients) {
            return bad("receivers must be between 1 and num_clients - 1");
        }
        if self.repeats == 0 {
            return bad("repeats must be positive");
        }
        Ok(())
    }

    pub fn shared_count(&self) -> usize {
        (self.num_dossiers * self.pct_shared as usize + 50) / 100
    }
}

/// Phase durations in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Phases {
    pub create: f64,
    pub populate: f64,
    pub share: f64,
    pub receive: f64,
    pub open: f64,
}

impl Phases {
    pub fn total(&self) -> f64 {
        self.create + self.populate + self.share + self.receive + self.open
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub shared: usize,
    /// Phases of the run with the median total.
    pub phases: Phases,
    pub total_ms: f64,
    /// Median total of the plain run with the same final row count.
    pub plain_total_ms: f64,
    pub overhead_pct: f64,
    /// Row encryptions during the share phase.
    pub encryptions: u64,
    /// Row decryptions during the open phase.
    pub decryptions: u64,
    pub opened: usize,
}

struct RunResult {
    phases: Phases,
    encryptions: u64,
    decryptions: u64,
    opened: usize,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

fn rows(config: &BenchConfig, count: usize) -> impl Iterator<Item = Row> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let size = config.dossier_size_bytes;
    (0..count).map(move |i| {
        let body: String = (&mut rng).sample_iter(&Alphanumeric).take(size).map(char::from).collect();
        Row::new(TABLE, [("id", format!("d{i:07}")), ("body", body)]).expect("generated rows are valid")
    })
}

/// A local database and nothing else.
fn run_plain(config: &BenchConfig, count: usize) -> Result<RunResult, BenchError> {
    let mut phases = Phases::default();
    let t = Instant::now();
    let (mut store, _) = Store::open_memory(MemoryFiles::default(), &mut NoKeys)?;
    store.create_table(TABLE, &COLUMNS)?;
    phases.create = ms(t.elapsed());
    let t = Instant::now();
    for row in rows(config, count) {
        store.insert(row)?;
    }
    store.checkpoint()?;
    phases.populate = ms(t.elapsed());
    Ok(RunResult { phases, encryptions: 0, decryptions: 0, opened: 0 })
}

fn run_encrypted(config: &BenchConfig) -> Result<RunResult, BenchError> {
    let shared_count = config.shared_count();
    if shared_count == 0 {
        // Nothing to share: the same work as the plain database.
        return run_plain(config, config.num_dossiers);
    }
    let mut phases = Phases::default();
    let t = Instant::now();
    let clock = Clock::System;
    let service = shared(Synchronizer::new(
        clock.clone(),
        ServiceConfig { pbkdf2_iterations: config.pbkdf2_iterations, ..Default::default() },
    ));
    let client_config = ClientConfig { clock, ..Default::default() };
    let mut clients = Vec::with_capacity(config.num_clients);
    for i in 0..config.num_clients {
        let backend = ServiceClient::new(LocalTransport::new(service.clone()));
        clients.push(Client::register_in_memory(&format!("client{i}"), "pw", backend, client_config.clone())?);
    }
    clients[0].create_table(TABLE, &COLUMNS)?;
    phases.create = ms(t.elapsed());

    let t = Instant::now();
    let mut ids = Vec::with_capacity(config.num_dossiers);
    for row in rows(config, config.num_dossiers) {
        ids.push(clients[0].insert(row)?);
    }
    clients[0].checkpoint()?;
    phases.populate = ms(t.elapsed());

    let (owner, rest) = clients.split_first_mut().expect("at least one client");
    let t = Instant::now();
    let before = owner.stats().encryptions;
    let names: Vec<String> = rest[..config.receivers].iter().map(|c| c.user().to_string()).collect();
    for d in &ids[..shared_count] {
        for r in &names {
            owner.grant(*d, r, &COLUMNS)?;
        }
        owner.send(*d)?;
    }
    let encryptions = owner.stats().encryptions - before;
    phases.share = ms(t.elapsed());

    let receivers = &mut rest[..config.receivers];
    let t = Instant::now();
    for r in receivers.iter_mut() {
        r.receive()?;
    }
    phases.receive = ms(t.elapsed());

    let t = Instant::now();
    let before: u64 = receivers.iter().map(|r| r.stats().decryptions).sum();
    let mut opened = 0;
    for r in receivers.iter_mut() {
        let delivered: Vec<u64> = r.deliveries().map(|(_, d)| d.dossier_id).collect();
        for d in delivered {
            r.use_dossier(d)?;
            opened += 1;
        }
    }
    let decryptions = receivers.iter().map(|r| r.stats().decryptions).sum::<u64>() - before;
    phases.open = ms(t.elapsed());
    Ok(RunResult { phases, encryptions, decryptions, opened })
}

fn median_run(mut runs: Vec<RunResult>) -> RunResult {
    runs.sort_by(|a, b| a.phases.total().total_cmp(&b.phases.total()));
    let mid = runs.len() / 2;
    runs.swap_remove(mid)
}

/// Runs a configuration `repeats` times and reports the median run. An
/// encrypted configuration is compared with a plain database holding the
/// same final number of rows.
pub fn run(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    config.validate()?;
    let shared = config.shared_count();
    let plain_rows = config.num_dossiers + shared;
    let mut plain = Vec::new();
    let mut measured = Vec::new();
    for _ in 0..config.repeats {
        match config.mode {
            Mode::Encrypted => {
                plain.push(run_plain(config, plain_rows)?);
                measured.push(run_encrypted(config)?);
            }
            Mode::Plain => plain.push(run_plain(config, plain_rows)?),
        }
    }
    let plain = median_run(plain);
    let run = if measured.is_empty() { None } else { Some(median_run(measured)) };
    let plain_total_ms = plain.phases.total();
    let run = run.unwrap_or(plain);
    let total_ms = run.phases.total();
    let overhead_pct = if plain_total_ms > 0.0 { (total_ms - plain_total_ms) / plain_total_ms * 100.0 } else { 0.0 };
    Ok(BenchReport {
        config: config.clone(),
        shared,
        phases: run.phases,
        total_ms,
        plain_total_ms,
        overhead_pct,
        encryptions: run.encryptions,
        decryptions: run.decryptions,
        opened: run.opened,
    })
}

pub const CSV_HEADER: [&str; 19] = [
    "num_dossiers",
    "num_clients",
    "pct_shared",
    "dossier_size_bytes",
    "receivers",
    "mode",
    "repeats",
    "seed",
    "shared",
    "create_ms",
    "populate_ms",
    "share_ms",
    "receive_ms",
    "open_ms",
    "total_ms",
    "plain_total_ms",
    "overhead_pct",
    "encryptions",
    "decryptions",
];

/// Runs every configuration and writes one CSV row per report.
pub fn sweep<W: io::Write>(configs: &[BenchConfig], out: W) -> Result<Vec<BenchReport>, BenchError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    let mut reports = Vec::with_capacity(configs.len());
    for c in configs {
        let r = run(c)?;
        let mode = match c.mode {
            Mode::Encrypted => "encrypted",
            Mode::Plain => "plain",
        };
        let p = &r.phases;
        w.write_record([
            c.num_dossiers.to_string(),
            c.num_clients.to_string(),
            c.pct_shared.to_string(),
            c.dossier_size_bytes.to_string(),
            c.receivers.to_string(),
            mode.to_string(),
            c.repeats.to_string(),
            c.seed.to_string(),
            r.shared.to_string(),
            format!("{:.3}", p.create),
            format!("{:.3}", p.populate),
            format!("{:.3}", p.share),
            format!("{:.3}", p.receive),
            format!("{:.3}", p.open),
            format!("{:.3}", r.total_ms),
            format!("{:.3}", r.plain_total_ms),
            format!("{:.2}", r.overhead_pct),
            r.encryptions.to_string(),
            r.decryptions.to_string(),
        ])?;
        w.flush()?;
        reports.push(r);
    }
    Ok(reports)
}

/// The standard grid: each size at each sharing percentage.
pub fn grid(sizes: &[usize], pcts: &[u32], base: &BenchConfig) -> Vec<BenchConfig> {
    sizes
        .iter()
        .flat_map(|n| pcts.iter().map(move |p| BenchConfig { num_dossiers: *n, pct_shared: *p, ..base.clone() }))
        .collect()
}

/// Least-squares line through the points: (slope, intercept, r squared).
pub fn linear_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|(_, y)| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, pct: u32) -> BenchConfig {
        BenchConfig { num_dossiers: n, pct_shared: pct, repeats: 1, pbkdf2_iterations: 10, ..Default::default() }
    }

    #[test]
    fn counters_follow_the_cost_model() {
        let r = run(&BenchConfig { receivers: 2, num_clients: 3, ..small(50, 40) }).unwrap();
        assert_eq!(r.shared, 20);
        assert_eq!(r.encryptions, 40);
        assert_eq!(r.decryptions, 40);
        assert!((r.total_ms - r.phases.total()).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(run(&BenchConfig { pct_shared: 101, ..small(10, 0) }).is_err());
        assert!(run(&BenchConfig { num_clients: 1, ..small(10, 20) }).is_err());
        assert!(run(&BenchConfig { receivers: 2, ..small(10, 20) }).is_err());
    }

    #[test]
    fn plain_mode_has_no_crypto() {
        let r = run(&BenchConfig { mode: Mode::Plain, ..small(40, 20) }).unwrap();
        assert_eq!((r.encryptions, r.decryptions, r.overhead_pct), (0, 0, 0.0));
        assert_eq!(r.phases.share, 0.0);
    }

    #[test]
    fn fit_of_a_line_is_exact() {
        let (m, b, r2) = linear_fit(&[(1.0, 3.0), (2.0, 5.0), (4.0, 9.0)]);
        assert!((m - 2.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }
}
