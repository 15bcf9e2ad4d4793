//! Line grammar of the snapshot and journal files.
//!
//! Every line is either a plaintext statement or an encrypted row:
//!
//! ```text
//! CREATE TABLE students(id,name);
//! INSERT INTO students(id,name) VALUES('12','Alice');
//! $27@5F3C25EE5738DAAAED5DA06A80F305A93C95A
//! DELETE FROM students WHERE id='12';
//! DELETE SHARED 27;
//! ```
//!
//! Encrypted lines are `'$' digits '@' upper-hex`. Values are rendered single
//! quoted; a quote is doubled, and backslash, newline and carriage return are
//! backslash-escaped so a statement never spans lines. Bare numeric literals
//! are accepted when reading.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{check_upper_hex, Ciphertext};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScriptError {
    #[error("empty line")]
    Empty,
    #[error("malformed encrypted-row header: {0}")]
    MalformedHeader(String),
    #[error("invalid hex payload: {0}")]
    InvalidHex(String),
    #[error("malformed statement at column {at}: {reason}")]
    Statement { at: usize, reason: String },
    #[error("invalid row: {0}")]
    Row(#[from] RowError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RowError {
    #[error("invalid identifier {0:?}")]
    Identifier(String),
    #[error("a row needs at least its primary-key column")]
    NoColumns,
    #[error("duplicate column {0:?}")]
    DuplicateColumn(String),
}

/// Where a row came from. Shared rows remember the header id they were
/// delivered under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    Owned,
    Shared(u64),
}

/// One table row. The first field is the primary key.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Row {
    table: String,
    pk: String,
    fields: Vec<(String, String)>,
    origin: Origin,
}

pub(crate) fn valid_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl Row {
    /// Builds an owned row; the first field is the primary key.
    pub fn new<T, C, V>(table: T, fields: impl IntoIterator<Item = (C, V)>) -> Result<Row, RowError>
    where
        T: Into<String>,
        C: Into<String>,
        V: Into<String>,
    {
        let table = table.into();
        if !valid_identifier(&table) {
            return Err(RowError::Identifier(table));
        }
        let fields: Vec<(String, String)> =
            fields.into_iter().map(|(c, v)| (c.into(), v.into())).collect();
        if fields.is_empty() {
            return Err(RowError::NoColumns);
        }
        for (i, (col, _)) in fields.iter().enumerate() {
            if !valid_identifier(col) {
                return Err(RowError::Identifier(col.clone()));
            }
            if fields[..i].iter().any(|(c, _)| c == col) {
                return Err(RowError::DuplicateColumn(col.clone()));
            }
        }
        let pk = fields[0].1.clone();
        Ok(Row { table, pk, fields, origin: Origin::Owned })
    }

    pub fn table(&self) -> &str {
        &self.table
    }

    pub fn pk(&self) -> &str {
        &self.pk
    }

    pub fn pk_column(&self) -> &str {
        &self.fields[0].0
    }

    pub fn fields(&self) -> &[(String, String)] {
        &self.fields
    }

    pub fn columns(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|(c, _)| c.as_str())
    }

    pub fn get(&self, column: &str) -> Option<&str> {
        self.fields.iter().find(|(c, _)| c == column).map(|(_, v)| v.as_str())
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn with_origin(mut self, origin: Origin) -> Row {
        self.origin = origin;
        self
    }

    /// Keeps only the listed columns, in row order. The primary key is kept
    /// by the caller's contract.
    pub(crate) fn retain_columns(&self, keep: impl Fn(&str) -> bool) -> Row {
        let fields: Vec<_> = self.fields.iter().filter(|(c, _)| keep(c)).cloned().collect();
        Row { table: self.table.clone(), pk: self.pk.clone(), fields, origin: self.origin }
    }
}

// ----------------------------------------------------------------------------
// Script lines
// ----------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptLine {
    PlainStatement(String),
    EncryptedRow { id: u64, hex_payload: String },
}

impl ScriptLine {
    pub fn render(&self) -> String {
        match self {
            ScriptLine::PlainStatement(s) => s.clone(),
            ScriptLine::EncryptedRow { id, hex_payload } => format!("${id}@{hex_payload}"),
        }
    }
}

/// Classifies one line of a snapshot or journal.
///
/// The payload alphabet is checked here; payload length is checked when the
/// line is decoded into a ciphertext.
pub fn parse_script_line(line: &str) -> Result<ScriptLine, ScriptError> {
    if line.is_empty() {
        return Err(ScriptError::Empty);
    }
    let Some(rest) = line.strip_prefix('$') else {
        return Ok(ScriptLine::PlainStatement(line.to_string()));
    };
    let Some((digits, payload)) = rest.split_once('@') else {
        return Err(ScriptError::MalformedHeader("missing '@'".into()));
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ScriptError::MalformedHeader(format!("id {digits:?} is not decimal")));
    }
    let id: u64 = digits
        .parse()
        .map_err(|_| ScriptError::MalformedHeader(format!("id {digits} out of range")))?;
    if payload.is_empty() {
        return Err(ScriptError::InvalidHex("empty payload".into()));
    }
    check_upper_hex(payload).map_err(|e| ScriptError::InvalidHex(e.to_string()))?;
    Ok(ScriptLine::EncryptedRow { id, hex_payload: payload.to_string() })
}

pub fn render_encrypted_line(id: u64, ct: &Ciphertext) -> String {
    format!("${id}@{}", ct.to_hex())
}

// ----------------------------------------------------------------------------
// Statements
// ----------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Statement {
    CreateTable { table: String, columns: Vec<String> },
    Insert(Row),
    Delete { table: String, pk_column: String, pk: String },
    DeleteShared(u64),
}

fn quote_into(out: &mut String, value: &str) {
    out.push('\'');
    for c in value.chars() {
        match c {
            '\'' => out.push_str("''"),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out.push('\'');
}

impl Statement {
    pub fn render(&self) -> String {
        let mut out = String::new();
        match self {
            Statement::CreateTable { table, columns } => {
                let _ = write!(out, "CREATE TABLE {table}({});", columns.join(","));
            }
            Statement::Insert(row) => {
                let cols: Vec<&str> = row.columns().collect();
                let _ = write!(out, "INSERT INTO {}({}) VALUES(", row.table, cols.join(","));
                for (i, (_, v)) in row.fields.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    quote_into(&mut out, v);
                }
                out.push_str(");");
            }
            Statement::Delete { table, pk_column, pk } => {
                let _ = write!(out, "DELETE FROM {table} WHERE {pk_column}=");
                quote_into(&mut out, pk);
                out.push(';');
            }
            Statement::DeleteShared(id) => {
                let _ = write!(out, "DELETE SHARED {id};");
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Statement, ScriptError> {
        let mut p = Parser { src: text, pos: 0 };
        let stmt = if p.eat("CREATE TABLE ") {
            let table = p.ident()?;
            p.expect("(")?;
            let columns = p.ident_list()?;
            p.expect(")")?;
            Statement::CreateTable { table, columns }
        } else if p.eat("INSERT INTO ") {
            let table = p.ident()?;
            p.expect("(")?;
            let columns = p.ident_list()?;
            p.expect(") VALUES(")?;
            let mut values = vec![p.value()?];
            while p.eat(",") {
                values.push(p.value()?);
            }
            p.expect(")")?;
            if values.len() != columns.len() {
                return Err(p.error("column and value counts differ"));
            }
            Statement::Insert(Row::new(table, columns.into_iter().zip(values))?)
        } else if p.eat("DELETE FROM ") {
            let table = p.ident()?;
            p.expect(" WHERE ")?;
            let pk_column = p.ident()?;
            p.expect("=")?;
            let pk = p.quoted()?;
            Statement::Delete { table, pk_column, pk }
        } else if p.eat("DELETE SHARED ") {
            let start = p.pos;
            while p.peek().is_some_and(|c| c.is_ascii_digit()) {
                p.pos += 1;
            }
            let id = p.src[start..p.pos].parse().map_err(|_| p.error("expected shared id"))?;
            Statement::DeleteShared(id)
        } else {
            return Err(p.error("unknown statement"));
        };
        p.expect(";")?;
        if p.pos != text.len() {
            return Err(p.error("trailing characters"));
        }
        Ok(stmt)
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, reason: &str) -> ScriptError {
        ScriptError::Statement { at: self.pos, reason: reason.to_string() }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn eat(&mut self, lit: &str) -> bool {
        if self.src[self.pos..].starts_with(lit) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, lit: &str) -> Result<(), ScriptError> {
        if self.eat(lit) {
            Ok(())
        } else {
            Err(self.error(&format!("expected {lit:?}")))
        }
    }

    fn ident(&mut self) -> Result<String, ScriptError> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_alphanumeric() || c == '_') {
            self.pos += 1;
        }
        let id = &self.src[start..self.pos];
        if valid_identifier(id) {
            Ok(id.to_string())
        } else {
            Err(self.error("expected identifier"))
        }
    }

    fn ident_list(&mut self) -> Result<Vec<String>, ScriptError> {
        let mut out = vec![self.ident()?];
        while self.eat(",") {
            out.push(self.ident()?);
        }
        Ok(out)
    }

    /// A quoted string or a bare numeric literal.
    fn value(&mut self) -> Result<String, ScriptError> {
        if self.peek() == Some('\'') {
            return self.quoted();
        }
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit() || c == '-' || c == '.') {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("expected value"));
        }
        Ok(self.src[start..self.pos].to_string())
    }

    fn quoted(&mut self) -> Result<String, ScriptError> {
        self.expect("'")?;
        let mut out = String::new();
        let mut chars = self.src[self.pos..].char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '\'' => {
                    if self.src[self.pos + i + 1..].starts_with('\'') {
                        chars.next();
                        out.push('\'');
                    } else {
                        self.pos += i + 1;
                        return Ok(out);
                    }
                }
                '\\' => match chars.next() {
                    Some((_, '\\')) => out.push('\\'),
                    Some((_, 'n')) => out.push('\n'),
                    Some((_, 'r')) => out.push('\r'),
                    _ => {
                        self.pos += i;
                        return Err(self.error("bad escape"));
                    }
                },
                c => out.push(c),
            }
        }
        Err(self.error("unterminated value"))
    }
}

/// Canonical single-line text of a row.
pub fn serialize_row(row: &Row) -> Vec<u8> {
    Statement::Insert(row.clone()).render().into_bytes()
}

/// Inverse of [`serialize_row`]. The result is an owned row; callers set the
/// origin.
pub fn deserialize_row(bytes: &[u8]) -> Result<Row, ScriptError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| ScriptError::Statement { at: 0, reason: "not UTF-8".into() })?;
    match Statement::parse(text)? {
        Statement::Insert(row) => Ok(row),
        _ => Err(ScriptError::Statement { at: 0, reason: "not an INSERT".into() }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encrypted_line_from_figure() {
        let line = "$27@5F3C25EE5738DAAAED5DA06A80F305A93C95A";
        assert_eq!(
            parse_script_line(line).unwrap(),
            ScriptLine::EncryptedRow {
                id: 27,
                hex_payload: "5F3C25EE5738DAAAED5DA06A80F305A93C95A".into()
            }
        );
    }

    #[test]
    fn plain_insert_line() {
        let line = "INSERT INTO students(id,name) VALUES(12,'Alice');";
        assert_eq!(
            parse_script_line(line).unwrap(),
            ScriptLine::PlainStatement(line.to_string())
        );
    }

    #[test]
    fn malformed_headers_are_rejected() {
        for bad in ["$45@ZZ", "$@ABCD", "$x1@AB", "$12AB", "$12@", "$99999999999999999999@AB", "$3@ab"] {
            assert!(parse_script_line(bad).is_err(), "{bad}");
        }
        assert_eq!(parse_script_line(""), Err(ScriptError::Empty));
    }

    #[test]
    fn boundary_id_roundtrips() {
        let ct = Ciphertext { nonce: [1; 12], body: vec![0xAB, 0x00], tag: [2; 16] };
        for id in [0, 27, u64::MAX] {
            let line = render_encrypted_line(id, &ct);
            assert!(line.starts_with(&format!("${id}@")));
            assert!(!line.contains('\n'));
            assert_eq!(
                parse_script_line(&line).unwrap(),
                ScriptLine::EncryptedRow { id, hex_payload: ct.to_hex() }
            );
        }
    }

    #[test]
    fn row_statement_shape() {
        let row = Row::new("students", [("id", "12"), ("name", "Alice")]).unwrap();
        assert_eq!(
            String::from_utf8(serialize_row(&row)).unwrap(),
            "INSERT INTO students(id,name) VALUES('12','Alice');"
        );
        assert_eq!(row.pk(), "12");
        assert_eq!(row.pk_column(), "id");
    }

    #[test]
    fn awkward_values_roundtrip() {
        let row = Row::new("t", [("k", "a'b"), ("v", "line1\nline2\r\\'';),(")]).unwrap();
        let bytes = serialize_row(&row);
        assert!(!bytes.contains(&b'\n'));
        assert_eq!(deserialize_row(&bytes).unwrap(), row);
    }

    #[test]
    fn bare_numeric_values_parse() {
        let row = deserialize_row(b"INSERT INTO students(id,name) VALUES(12,'Alice');").unwrap();
        assert_eq!(row.pk(), "12");
        assert_eq!(row.get("name"), Some("Alice"));
    }

    #[test]
    fn statements_roundtrip() {
        let stmts = [
            Statement::CreateTable { table: "t".into(), columns: vec!["a".into(), "b".into()] },
            Statement::Delete { table: "t".into(), pk_column: "a".into(), pk: "x'y".into() },
            Statement::DeleteShared(42),
        ];
        for s in stmts {
            assert_eq!(Statement::parse(&s.render()).unwrap(), s);
        }
    }

    #[test]
    fn invalid_rows() {
        assert_eq!(Row::new("t", Vec::<(&str, &str)>::new()), Err(RowError::NoColumns));
        assert!(matches!(Row::new("bad name", [("a", "1")]), Err(RowError::Identifier(_))));
        assert!(matches!(Row::new("t", [("a", "1"), ("a", "2")]), Err(RowError::DuplicateColumn(_))));
    }
}
