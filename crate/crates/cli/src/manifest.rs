use std::fs;
use std::io::Read;
use std::path::Path;

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

/// Ordered `key = value` record of everything a command resolved.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunManifest {
    entries: Vec<(String, String)>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let mut m = Self::default();
        m.set("command", command);
        m.set("version", concat!("graphpool ", env!("CARGO_PKG_VERSION")));
        let secs = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        m.set("timestamp", secs);
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# graphpool run manifest\n");
        for (k, v) in &self.entries {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once(" = ").or_else(|| line.split_once('=')) else {
                bail!("manifest line {}: expected `key = value`", i + 1);
            };
            m.set(k.trim(), v.trim());
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text)
    }

    /// Records a SHA-256 of every `{name}_*.txt` file in `dir`.
    pub fn add_checksums(&mut self, dir: &Path, name: &str) -> Result<()> {
        let prefix = format!("{name}_");
        let mut files: Vec<_> = fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|f| f.to_str())
                    .is_some_and(|f| f.starts_with(&prefix) && f.ends_with(".txt"))
            })
            .collect();
        files.sort();
        for p in files {
            let mut hasher = Sha256::new();
            let mut buf = Vec::new();
            fs::File::open(&p)?.read_to_end(&mut buf)?;
            hasher.update(&buf);
            let digest: String = hasher
                .finalize()
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect();
            let fname = p.file_name().and_then(|f| f.to_str()).unwrap_or_default();
            self.set(&format!("sha256.{fname}"), digest);
        }
        Ok(())
    }
}
