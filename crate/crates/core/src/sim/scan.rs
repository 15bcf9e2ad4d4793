//! Searches stored or captured bytes for marker strings planted in rows.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crypto;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentinel {
    pub value: String,
    pub owner: String,
    pub shared: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Hit {
    pub location: String,
    pub sentinel: String,
    /// Found as uppercase hex rather than raw text.
    pub hex: bool,
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Every sentinel found in `bytes`, raw or hex encoded.
pub fn scan_bytes<'a>(location: &str, bytes: &[u8], sentinels: impl IntoIterator<Item = &'a Sentinel>) -> Vec<Hit> {
    let mut hits = Vec::new();
    for s in sentinels {
        if contains(bytes, s.value.as_bytes()) {
            hits.push(Hit { location: location.to_string(), sentinel: s.value.clone(), hex: false });
        }
        if contains(bytes, crypto::hex_encode(s.value.as_bytes()).as_bytes()) {
            hits.push(Hit { location: location.to_string(), sentinel: s.value.clone(), hex: true });
        }
    }
    hits
}

/// All regular files below `dir`, sorted by path.
pub fn files_under(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let entry = entry?;
            let ty = entry.file_type()?;
            if ty.is_dir() {
                stack.push(entry.path());
            } else if ty.is_file() {
                out.push(entry.path());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Sentinels found in files below `dir` that do not belong there.
/// `owner_of` names the user whose private area a path is in, if any.
pub fn scan_dir(dir: &Path, sentinels: &[Sentinel], owner_of: impl Fn(&Path) -> Option<String>) -> io::Result<Vec<Hit>> {
    let mut bad = Vec::new();
    for path in files_under(dir)? {
        let bytes = fs::read(&path)?;
        let owner = owner_of(&path);
        let foreign = sentinels.iter().filter(|s| owner.as_deref() != Some(s.owner.as_str()));
        bad.extend(scan_bytes(&path.display().to_string(), &bytes, foreign));
    }
    Ok(bad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_raw_and_hex() {
        let s = Sentinel { value: "MARK-1".into(), owner: "a".into(), shared: true };
        assert_eq!(scan_bytes("x", b"..MARK-1..", [&s]).len(), 1);
        let hex = crypto::hex_encode(b"zzMARK-1zz");
        let hits = scan_bytes("x", hex.as_bytes(), [&s]);
        assert_eq!(hits.len(), 1);
        assert!(hits[0].hex);
        assert!(scan_bytes("x", b"MARK-2", [&s]).is_empty());
    }

    #[test]
    fn owner_files_are_exempt() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("a")).unwrap();
        fs::create_dir_all(dir.path().join("b")).unwrap();
        fs::write(dir.path().join("a/store"), "MARK-1").unwrap();
        fs::write(dir.path().join("b/store"), "MARK-1").unwrap();
        let s = vec![Sentinel { value: "MARK-1".into(), owner: "a".into(), shared: false }];
        let root = dir.path().to_path_buf();
        let hits = scan_dir(dir.path(), &s, |p| {
            p.strip_prefix(&root).ok()?.components().next().map(|c| c.as_os_str().to_string_lossy().into_owned())
        })
        .unwrap();
        assert_eq!(hits.len(), 1);
        assert!(hits[0].location.ends_with("b/store"));
    }
}
