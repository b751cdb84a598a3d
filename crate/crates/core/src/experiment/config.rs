//! Flat `key = value` configuration files with dotted section names.
//!
//! ```text
//! # comment
//! method = hmc
//! method.hmc.step_size = 1e-4
//! ```
//!
//! Keys are unique. The config hash is the SHA-256 of the sorted `key=value` lines, so
//! comments, whitespace and key order do not change it.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{BnnError, Result};

#[derive(Debug, Clone)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| BnnError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
                return Err(BnnError::Config(format!("line {}: invalid key {k:?}", n + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(BnnError::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
        }
        Ok(Self {
            entries,
            used: RefCell::default(),
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| BnnError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sorted `key=value` lines, one per entry.
    pub fn canonical(&self) -> String {
        self.entries.iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k}={v}");
            s
        })
    }

    /// First 16 hex digits of the SHA-256 of [`ConfigFile::canonical`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        let v = self.entries.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(v)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| v.parse().map_err(|_| BnnError::Config(format!("{key} = {v:?} is not a valid value"))))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| BnnError::Config(format!("missing required key {key}")))
    }

    /// Keys never read through this handle.
    pub fn unused_keys(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.entries.keys().filter(|k| !used.contains(*k)).cloned().collect()
    }

    pub fn reject_unused(&self) -> Result<()> {
        match self.unused_keys().as_slice() {
            [] => Ok(()),
            keys => Err(BnnError::Config(format!("unknown keys: {}", keys.join(", ")))),
        }
    }
}
