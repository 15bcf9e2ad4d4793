//! Exit codes and error categories.
//!
//! | code | category        |
//! |------|-----------------|
//! | 0    | ok              |
//! | 1    | internal        |
//! | 2    | usage           |
//! | 3    | key-not-found   |
//! | 4    | unreachable     |
//! | 5    | auth            |
//! | 6    | not-found       |
//! | 7    | conflict        |
//! | 8    | integrity       |
//! | 9    | io              |

use std::fmt;

use dossier_core::bench::BenchError;
use dossier_core::protocol::{ClientError, SyncError};
use dossier_core::rowstore::StoreError;
use dossier_core::sim::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Internal,
    Usage,
    KeyNotFound,
    Unreachable,
    Auth,
    NotFound,
    Conflict,
    Integrity,
    Io,
}

impl Category {
    pub fn code(self) -> i32 {
        match self {
            Category::Internal => 1,
            Category::Usage => 2,
            Category::KeyNotFound => 3,
            Category::Unreachable => 4,
            Category::Auth => 5,
            Category::NotFound => 6,
            Category::Conflict => 7,
            Category::Integrity => 8,
            Category::Io => 9,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Internal => "internal",
            Category::Usage => "usage",
            Category::KeyNotFound => "key-not-found",
            Category::Unreachable => "unreachable",
            Category::Auth => "auth",
            Category::NotFound => "not-found",
            Category::Conflict => "conflict",
            Category::Integrity => "integrity",
            Category::Io => "io",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        CliError { category, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError::new(Category::Usage, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.category.name(), self.message)
    }
}

fn sync_category(e: &SyncError) -> Category {
    match e {
        SyncError::KeyNotFound | SyncError::Expired => Category::KeyNotFound,
        SyncError::Unreachable(_) => Category::Unreachable,
        SyncError::BadCredentials | SyncError::SessionExpired | SyncError::BadSignature | SyncError::NotOwner => {
            Category::Auth
        }
        SyncError::UnknownUser(_) | SyncError::NotFound(_) => Category::NotFound,
        SyncError::DuplicateUser(_) | SyncError::Superseded | SyncError::Stale => Category::Conflict,
        SyncError::Protocol(_) | SyncError::Unsupported(_) | SyncError::Internal(_) => Category::Internal,
    }
}

fn store_category(e: &StoreError) -> Category {
    match e {
        StoreError::Io(_) => Category::Io,
        StoreError::DuplicateKey { .. } | StoreError::TableExists { .. } => Category::Conflict,
        StoreError::ColumnMismatch { .. } | StoreError::Row(_) => Category::Usage,
        StoreError::MissingKey { .. } | StoreError::UnknownShared(_) => Category::NotFound,
        StoreError::NotOwned { .. } => Category::Conflict,
        _ => Category::Integrity,
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        let category = match &e {
            ClientError::Sync(s) => sync_category(s),
            ClientError::Store(s) => store_category(s),
            ClientError::Crypto(_) | ClientError::Integrity(_) | ClientError::KeyUnusable(_) => Category::Integrity,
            ClientError::KeyUnavailable(_) => Category::KeyNotFound,
            ClientError::KeyMismatch(_) => Category::Auth,
            ClientError::UnknownDossier(_) | ClientError::NotReceived(_) | ClientError::NoGrant { .. } => {
                Category::NotFound
            }
            ClientError::DuplicateDossier(_) | ClientError::StillShared(_) => Category::Conflict,
            ClientError::MissingPkColumn(_) | ClientError::UnknownColumn(_) => Category::Usage,
            ClientError::Profile(_) | ClientError::Io(_) => Category::Io,
        };
        CliError::new(category, e.to_string())
    }
}

impl From<SyncError> for CliError {
    fn from(e: SyncError) -> Self {
        CliError::new(sync_category(&e), e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Client(c) => c.into(),
            SimError::Parse { .. } | SimError::UnknownScenario(_) => CliError::usage(e.to_string()),
            SimError::Io(io) => io.into(),
            SimError::Setup { .. } => CliError::new(Category::Internal, e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Config(m) => CliError::usage(m),
            BenchError::Client(c) => c.into(),
            BenchError::Io(io) => CliError::new(Category::Io, io.to_string()),
            other => CliError::new(Category::Internal, other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(Category::Io, e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new(Category::Io, e.to_string())
    }
}
