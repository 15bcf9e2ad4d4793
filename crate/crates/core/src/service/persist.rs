//! Service database file: a version header line followed by one JSON event per
//! line. Opening replays the events; compaction rewrites the file as a single
//! snapshot event.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;
use tracing::warn;

use super::Event;

pub const HEADER: &str = "DOSSIER-SYNC 1";

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("unsupported database header {0:?}")]
    Header(String),
    #[error("line {line}: {source}")]
    Event { line: usize, source: serde_json::Error },
}

#[derive(Debug)]
pub(crate) struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    pub(crate) fn open(path: &Path) -> Result<(Journal, Vec<Event>), PersistError> {
        let mut events = Vec::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            let lines: Vec<String> = reader.lines().collect::<Result<_, _>>()?;
            let raw = fs::read(path)?;
            let complete = raw.last().map_or(true, |b| *b == b'\n');
            match lines.first() {
                Some(h) if h == HEADER => {}
                None => {}
                Some(h) => return Err(PersistError::Header(h.clone())),
            }
            for (i, line) in lines.iter().enumerate().skip(1) {
                if line.is_empty() {
                    continue;
                }
                match serde_json::from_str(line) {
                    Ok(e) => events.push(e),
                    Err(_) if i + 1 == lines.len() && !complete => {
                        warn!(line = i + 1, "ignoring torn database tail");
                    }
                    Err(source) => return Err(PersistError::Event { line: i + 1, source }),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok((Journal { path: path.to_path_buf(), file }, events))
    }

    pub(crate) fn append(&mut self, event: &Event) -> Result<(), PersistError> {
        let mut line = serde_json::to_vec(event).expect("events serialize");
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        Ok(())
    }

    pub(crate) fn rewrite(&mut self, snapshot: &Event) -> Result<(), PersistError> {
        let tmp = self.path.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(HEADER.as_bytes())?;
            f.write_all(b"\n")?;
            f.write_all(&serde_json::to_vec(snapshot).expect("events serialize"))?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &self.path)?;
        self.file = OpenOptions::new().append(true).open(&self.path)?;
        Ok(())
    }
}
