//! Local row database: a line-oriented script format and the store built on it.

mod script;
mod store;

pub use script::{
    deserialize_row, parse_script_line, render_encrypted_line, serialize_row, Origin, Row,
    RowError, ScriptError, ScriptLine, Statement,
};
pub use store::{
    KeyLookup, KeyResolver, MemoryFiles, NoKeys, OpenReport, Store, StoreError, StoreFile,
    StoreStats,
};
