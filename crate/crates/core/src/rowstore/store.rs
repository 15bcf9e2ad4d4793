//! In-memory table store persisted as a snapshot plus an append-only journal.
//!
//! Owned rows are written as plaintext statements. Shared rows are only ever
//! written as `$id@HEX` lines holding the ciphertext they were delivered in;
//! the store never re-encrypts and never writes their plaintext.
//!
//! On open the snapshot is replayed, then the journal. Encrypted lines are
//! collected by id (last write wins) and each is offered to a
//! [`KeyResolver`] exactly once, after replay.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;
use tracing::warn;

use super::script::{
    deserialize_row, parse_script_line, Origin, Row, RowError, ScriptError, ScriptLine, Statement,
};
use crate::crypto::{decrypt_row, Ciphertext, CryptoError, SymmetricKey};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("{file} line {line}: {source}")]
    Parse { file: &'static str, line: usize, source: ScriptError },
    #[error("table {table} already exists")]
    TableExists { table: String },
    #[error("row columns do not match table {table}")]
    ColumnMismatch { table: String },
    #[error("duplicate primary key {pk:?} in {table}")]
    DuplicateKey { table: String, pk: String },
    #[error("no row with primary key {pk:?} in {table}")]
    MissingKey { table: String, pk: String },
    #[error("row {pk:?} in {table} is shared and read-only")]
    NotOwned { table: String, pk: String },
    #[error("no shared entry {0}")]
    UnknownShared(u64),
    #[error("shared entry {0}: {1}")]
    Crypto(u64, CryptoError),
    #[error("shared entry {0} does not hold a row: {1}")]
    BadPayload(u64, ScriptError),
    #[error(transparent)]
    Row(#[from] RowError),
    #[error("store is not memory-backed")]
    NotForkable,
}

/// Outcome of a key lookup for one encrypted line.
#[derive(Debug, Clone)]
pub enum KeyLookup {
    Key(SymmetricKey),
    /// Keep the line encrypted and untouched.
    Unavailable,
    /// Access was revoked and the caller wants the line dropped.
    Revoked,
}

pub trait KeyResolver {
    fn resolve(&mut self, id: u64) -> KeyLookup;
}

impl<F: FnMut(u64) -> KeyLookup> KeyResolver for F {
    fn resolve(&mut self, id: u64) -> KeyLookup {
        self(id)
    }
}

/// Resolver for plain mode: every encrypted line stays encrypted.
pub struct NoKeys;

impl KeyResolver for NoKeys {
    fn resolve(&mut self, _id: u64) -> KeyLookup {
        KeyLookup::Unavailable
    }
}

/// File contents for a store that lives entirely in memory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryFiles {
    pub snapshot: Vec<u8>,
    pub journal: Vec<u8>,
}

#[derive(Debug)]
enum Files {
    Disk { snapshot: PathBuf, journal_path: PathBuf, journal: File },
    Memory(MemoryFiles),
}

/// What a snapshot consists of, as written by [`Store::shutdown`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreFile {
    pub schema_statements: Vec<String>,
    pub data_lines: Vec<ScriptLine>,
}

impl StoreFile {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.schema_statements {
            out.push_str(s);
            out.push('\n');
        }
        for l in &self.data_lines {
            out.push_str(&l.render());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpenReport {
    pub owned_rows: usize,
    pub shared_loaded: Vec<u64>,
    pub sealed: Vec<u64>,
    pub removed: Vec<u64>,
    pub quarantined: Vec<(u64, String)>,
    pub torn_journal_tail: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StoreStats {
    pub decryptions: u64,
    pub journal_appends: u64,
}

#[derive(Debug, Clone)]
struct SharedEntry {
    hex: String,
    /// (table, pk) when the plaintext is loaded in memory.
    loaded: Option<(String, String)>,
}

#[derive(Debug)]
pub struct Store {
    tables: BTreeMap<String, BTreeMap<String, Row>>,
    schema: Vec<(String, Vec<String>)>,
    shared: BTreeMap<u64, SharedEntry>,
    quarantined: BTreeSet<u64>,
    files: Files,
    stats: StoreStats,
}

fn read_if_exists(path: &Path) -> io::Result<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}

impl Store {
    pub fn open(
        snapshot: impl AsRef<Path>,
        journal: impl AsRef<Path>,
        resolver: &mut dyn KeyResolver,
    ) -> Result<(Store, OpenReport), StoreError> {
        let snapshot = snapshot.as_ref().to_path_buf();
        let journal_path = journal.as_ref().to_path_buf();
        let snap_bytes = read_if_exists(&snapshot)?;
        let journal_bytes = read_if_exists(&journal_path)?;
        let file = OpenOptions::new().create(true).append(true).open(&journal_path)?;
        let files = Files::Disk { snapshot, journal_path, journal: file };
        Self::load(files, &snap_bytes, &journal_bytes, resolver)
    }

    pub fn open_memory(
        files: MemoryFiles,
        resolver: &mut dyn KeyResolver,
    ) -> Result<(Store, OpenReport), StoreError> {
        let snap = files.snapshot.clone();
        let journal = files.journal.clone();
        Self::load(Files::Memory(files), &snap, &journal, resolver)
    }

    fn load(
        files: Files,
        snap: &[u8],
        journal: &[u8],
        resolver: &mut dyn KeyResolver,
    ) -> Result<(Store, OpenReport), StoreError> {
        let mut store = Store {
            tables: BTreeMap::new(),
            schema: Vec::new(),
            shared: BTreeMap::new(),
            quarantined: BTreeSet::new(),
            files,
            stats: StoreStats::default(),
        };
        let mut report = OpenReport::default();
        store.replay("snapshot", snap, false)?;
        report.torn_journal_tail = store.replay("journal", journal, true)?;

        let ids: Vec<u64> = store.shared.keys().copied().collect();
        for id in ids {
            match resolver.resolve(id) {
                KeyLookup::Key(key) => match store.unseal(id, &key) {
                    Ok(_) => report.shared_loaded.push(id),
                    Err(e) => {
                        warn!(id, error = %e, "quarantining encrypted line");
                        store.quarantined.insert(id);
                        report.quarantined.push((id, e.to_string()));
                    }
                },
                KeyLookup::Unavailable => report.sealed.push(id),
                KeyLookup::Revoked => {
                    store.remove_shared(id)?;
                    report.removed.push(id);
                }
            }
        }
        report.owned_rows = store
            .tables
            .values()
            .flat_map(|t| t.values())
            .filter(|r| r.origin() == Origin::Owned)
            .count();
        Ok((store, report))
    }

    /// Applies every line of one file. Returns whether a torn final line was
    /// skipped (journal only).
    fn replay(&mut self, file: &'static str, bytes: &[u8], tolerate_torn: bool) -> Result<bool, StoreError> {
        let text = String::from_utf8_lossy(bytes);
        let complete = text.ends_with('\n') || text.is_empty();
        let lines: Vec<&str> = text.lines().collect();
        for (i, line) in lines.iter().enumerate() {
            if line.is_empty() {
                continue;
            }
            let last = i + 1 == lines.len();
            let parsed = parse_script_line(line).and_then(|sl| match sl {
                ScriptLine::PlainStatement(s) => Statement::parse(&s).map(Some),
                ScriptLine::EncryptedRow { id, hex_payload } => {
                    self.set_shared(id, hex_payload);
                    Ok(None)
                }
            });
            match parsed {
                Ok(Some(stmt)) => self.apply_replayed(stmt),
                Ok(None) => {}
                Err(_) if tolerate_torn && last && !complete => {
                    warn!(file, line = i + 1, "ignoring torn journal tail");
                    return Ok(true);
                }
                Err(source) => return Err(StoreError::Parse { file, line: i + 1, source }),
            }
        }
        Ok(false)
    }

    /// Replay is idempotent so a journal that overlaps its snapshot is
    /// harmless.
    fn apply_replayed(&mut self, stmt: Statement) {
        match stmt {
            Statement::CreateTable { table, columns } => {
                if !self.schema.iter().any(|(t, _)| *t == table) {
                    self.schema.push((table.clone(), columns));
                }
                self.tables.entry(table).or_default();
            }
            Statement::Insert(row) => {
                self.tables
                    .entry(row.table().to_string())
                    .or_default()
                    .insert(row.pk().to_string(), row);
            }
            Statement::Delete { table, pk, .. } => {
                if let Some(t) = self.tables.get_mut(&table) {
                    t.remove(&pk);
                }
            }
            Statement::DeleteShared(id) => {
                self.drop_shared_in_memory(id);
            }
        }
    }

    fn set_shared(&mut self, id: u64, hex: String) {
        self.drop_shared_in_memory(id);
        self.shared.insert(id, SharedEntry { hex, loaded: None });
    }

    fn drop_shared_in_memory(&mut self, id: u64) {
        if let Some(entry) = self.shared.remove(&id) {
            if let Some((table, pk)) = entry.loaded {
                if let Some(t) = self.tables.get_mut(&table) {
                    t.remove(&pk);
                }
            }
        }
        self.quarantined.remove(&id);
    }

    fn append(&mut self, line: &str) -> Result<(), StoreError> {
        self.stats.journal_appends += 1;
        match &mut self.files {
            Files::Disk { journal, .. } => {
                let mut buf = Vec::with_capacity(line.len() + 1);
                buf.extend_from_slice(line.as_bytes());
                buf.push(b'\n');
                journal.write_all(&buf)?;
                journal.flush()?;
            }
            Files::Memory(m) => {
                m.journal.extend_from_slice(line.as_bytes());
                m.journal.push(b'\n');
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Owned rows
    // ------------------------------------------------------------------

    pub fn create_table(&mut self, table: &str, columns: &[&str]) -> Result<(), StoreError> {
        if self.schema.iter().any(|(t, _)| t == table) {
            return Err(StoreError::TableExists { table: table.to_string() });
        }
        // Validate identifiers through the row constructor.
        Row::new(table, columns.iter().map(|c| (*c, "")))?;
        let columns: Vec<String> = columns.iter().map(|c| c.to_string()).collect();
        let stmt = Statement::CreateTable { table: table.to_string(), columns: columns.clone() };
        self.append(&stmt.render())?;
        self.schema.push((table.to_string(), columns));
        self.tables.entry(table.to_string()).or_default();
        Ok(())
    }

    fn check_columns(&self, row: &Row) -> Result<(), StoreError> {
        if let Some((_, cols)) = self.schema.iter().find(|(t, _)| t == row.table()) {
            if !row.columns().eq(cols.iter().map(String::as_str)) {
                return Err(StoreError::ColumnMismatch { table: row.table().to_string() });
            }
        }
        Ok(())
    }

    pub fn insert(&mut self, row: Row) -> Result<(), StoreError> {
        let row = row.with_origin(Origin::Owned);
        self.check_columns(&row)?;
        if self.get(row.table(), row.pk()).is_some() {
            return Err(StoreError::DuplicateKey {
                table: row.table().to_string(),
                pk: row.pk().to_string(),
            });
        }
        self.append(&Statement::Insert(row.clone()).render())?;
        self.tables.entry(row.table().to_string()).or_default().insert(row.pk().to_string(), row);
        Ok(())
    }

    pub fn update(&mut self, row: Row) -> Result<(), StoreError> {
        let row = row.with_origin(Origin::Owned);
        self.check_columns(&row)?;
        self.require_owned(row.table(), row.pk())?;
        // One line, so a torn journal never leaves the row deleted. Replayed
        // inserts overwrite.
        self.append(&Statement::Insert(row.clone()).render())?;
        self.tables.entry(row.table().to_string()).or_default().insert(row.pk().to_string(), row);
        Ok(())
    }

    pub fn delete(&mut self, table: &str, pk: &str) -> Result<Row, StoreError> {
        let pk_column = self.require_owned(table, pk)?.pk_column().to_string();
        let del = Statement::Delete { table: table.to_string(), pk_column, pk: pk.to_string() };
        self.append(&del.render())?;
        Ok(self.tables.get_mut(table).and_then(|t| t.remove(pk)).expect("checked above"))
    }

    fn require_owned(&self, table: &str, pk: &str) -> Result<&Row, StoreError> {
        match self.get(table, pk) {
            None => Err(StoreError::MissingKey { table: table.to_string(), pk: pk.to_string() }),
            Some(r) if r.origin() != Origin::Owned => {
                Err(StoreError::NotOwned { table: table.to_string(), pk: pk.to_string() })
            }
            Some(r) => Ok(r),
        }
    }

    pub fn get(&self, table: &str, pk: &str) -> Option<&Row> {
        self.tables.get(table).and_then(|t| t.get(pk))
    }

    /// Rows of one table in primary-key order, owned and loaded shared alike.
    pub fn scan<'a>(&'a self, table: &str) -> impl Iterator<Item = &'a Row> + 'a {
        self.tables.get(table).into_iter().flat_map(|t| t.values())
    }

    pub fn rows(&self) -> impl Iterator<Item = &Row> {
        self.tables.values().flat_map(|t| t.values())
    }

    pub fn table_names(&self) -> impl Iterator<Item = &str> {
        self.tables.keys().map(String::as_str)
    }

    // ------------------------------------------------------------------
    // Shared rows
    // ------------------------------------------------------------------

    /// Stores a delivered ciphertext under `id`, replacing any previous entry
    /// with the same id. The row stays encrypted until [`Store::unseal`].
    pub fn put_sealed(&mut self, id: u64, ct: &Ciphertext) -> Result<(), StoreError> {
        let line = ScriptLine::EncryptedRow { id, hex_payload: ct.to_hex() };
        self.append(&line.render())?;
        let ScriptLine::EncryptedRow { hex_payload, .. } = line else { unreachable!() };
        self.set_shared(id, hex_payload);
        Ok(())
    }

    /// Decrypts a shared entry and loads its row into memory.
    pub fn unseal(&mut self, id: u64, key: &SymmetricKey) -> Result<&Row, StoreError> {
        let entry = self.shared.get(&id).ok_or(StoreError::UnknownShared(id))?;
        if let Some((table, pk)) = entry.loaded.clone() {
            return Ok(self.get(&table, &pk).expect("loaded shared row present"));
        }
        let ct = Ciphertext::from_hex(&entry.hex).map_err(|e| StoreError::Crypto(id, e))?;
        self.stats.decryptions += 1;
        let plain = decrypt_row(&ct, key).map_err(|e| StoreError::Crypto(id, e))?;
        let row = deserialize_row(&plain)
            .map_err(|e| StoreError::BadPayload(id, e))?
            .with_origin(Origin::Shared(id));
        let table = row.table().to_string();
        let pk = row.pk().to_string();
        if self.get(&table, &pk).is_some() {
            return Err(StoreError::DuplicateKey { table, pk });
        }
        self.tables.entry(table.clone()).or_default().insert(pk.clone(), row);
        self.quarantined.remove(&id);
        self.shared.get_mut(&id).expect("entry checked").loaded = Some((table.clone(), pk.clone()));
        Ok(self.get(&table, &pk).expect("just inserted"))
    }

    /// Drops the plaintext of a shared row from memory; the ciphertext stays.
    pub fn reseal(&mut self, id: u64) -> Result<(), StoreError> {
        let entry = self.shared.get_mut(&id).ok_or(StoreError::UnknownShared(id))?;
        if let Some((table, pk)) = entry.loaded.take() {
            if let Some(t) = self.tables.get_mut(&table) {
                t.remove(&pk);
            }
        }
        Ok(())
    }

    pub fn remove_shared(&mut self, id: u64) -> Result<(), StoreError> {
        if !self.shared.contains_key(&id) {
            return Err(StoreError::UnknownShared(id));
        }
        self.append(&Statement::DeleteShared(id).render())?;
        self.drop_shared_in_memory(id);
        Ok(())
    }

    pub fn has_shared(&self, id: u64) -> bool {
        self.shared.contains_key(&id)
    }

    pub fn is_loaded(&self, id: u64) -> bool {
        self.shared.get(&id).is_some_and(|e| e.loaded.is_some())
    }

    pub fn shared_row(&self, id: u64) -> Option<&Row> {
        let (table, pk) = self.shared.get(&id)?.loaded.as_ref()?;
        self.get(table, pk)
    }

    pub fn shared_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.shared.keys().copied()
    }

    pub fn quarantined(&self) -> impl Iterator<Item = u64> + '_ {
        self.quarantined.iter().copied()
    }

    pub fn stats(&self) -> StoreStats {
        self.stats
    }

    // ------------------------------------------------------------------
    // Persistence
    // ------------------------------------------------------------------

    /// The snapshot as it would be written now.
    pub fn store_file(&self) -> StoreFile {
        let schema_statements = self
            .schema
            .iter()
            .map(|(t, c)| Statement::CreateTable { table: t.clone(), columns: c.clone() }.render())
            .collect();
        let mut data_lines = Vec::new();
        for row in self.rows() {
            match row.origin() {
                Origin::Owned => {
                    data_lines.push(ScriptLine::PlainStatement(Statement::Insert(row.clone()).render()))
                }
                Origin::Shared(id) => data_lines.push(ScriptLine::EncryptedRow {
                    id,
                    hex_payload: self.shared[&id].hex.clone(),
                }),
            }
        }
        for (id, entry) in &self.shared {
            if entry.loaded.is_none() {
                data_lines.push(ScriptLine::EncryptedRow { id: *id, hex_payload: entry.hex.clone() });
            }
        }
        StoreFile { schema_statements, data_lines }
    }

    /// Writes a fresh snapshot and truncates the journal. The journal is only
    /// truncated once the new snapshot is durable.
    pub fn checkpoint(&mut self) -> Result<StoreFile, StoreError> {
        let file = self.store_file();
        let text = file.render();
        match &mut self.files {
            Files::Disk { snapshot, journal, .. } => {
                let tmp = snapshot.with_extension("tmp");
                {
                    let mut f = File::create(&tmp)?;
                    f.write_all(text.as_bytes())?;
                    f.sync_all()?;
                }
                fs::rename(&tmp, &*snapshot)?;
                journal.set_len(0)?;
                journal.sync_all()?;
            }
            Files::Memory(m) => {
                m.snapshot = text.into_bytes();
                m.journal.clear();
            }
        }
        Ok(file)
    }

    pub fn shutdown(mut self) -> Result<StoreFile, StoreError> {
        self.checkpoint()
    }

    /// Current file contents of a memory-backed store.
    pub fn memory_files(&self) -> Option<&MemoryFiles> {
        match &self.files {
            Files::Memory(m) => Some(m),
            Files::Disk { .. } => None,
        }
    }

    /// Independent copy of a memory-backed store.
    pub fn fork(&self) -> Result<Store, StoreError> {
        let Files::Memory(m) = &self.files else {
            return Err(StoreError::NotForkable);
        };
        Ok(Store {
            tables: self.tables.clone(),
            schema: self.schema.clone(),
            shared: self.shared.clone(),
            quarantined: self.quarantined.clone(),
            files: Files::Memory(m.clone()),
            stats: self.stats,
        })
    }

    /// Paths of a disk-backed store.
    pub fn paths(&self) -> Option<(&Path, &Path)> {
        match &self.files {
            Files::Disk { snapshot, journal_path, .. } => Some((snapshot, journal_path)),
            Files::Memory(_) => None,
        }
    }
}
