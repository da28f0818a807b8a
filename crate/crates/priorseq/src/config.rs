//! Flat key-value run configuration ("section.key value" lines) with
//! command-line overrides, plus run manifests tying every artifact to the
//! config hash, seed, and input file hashes that produced it.

use crate::error::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// Flat dotted-key configuration. Later sources win: defaults, then the
/// config file, then explicit overrides.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    map: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key value` or `key = value` lines; `#` starts a comment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = KvConfig::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = match line.split_once('=') {
                Some((k, v)) => (k.trim(), v.trim()),
                None => line.split_once(char::is_whitespace).map_or_else(
                    || (line, ""),
                    |(k, v)| (k.trim(), v.trim()),
                ),
            };
            if key.is_empty() || value.is_empty() {
                return Err(Error::Malformed {
                    line: i + 1,
                    msg: format!("expected `key value`, found `{raw}`"),
                });
            }
            config.map.insert(key.to_string(), value.to_string());
        }
        Ok(config)
    }

    /// Applies `key=value` override strings (command-line `--set`).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| {
                Error::Config(format!("override `{o}` is not of the form key=value"))
            })?;
            self.set(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.get(key).unwrap_or(default)
    }

    pub fn required(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required config key `{key}`")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("config key `{key}` has invalid value `{v}`"))),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        self.parse(key, default)
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        self.parse(key, default)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        self.parse(key, default)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        self.parse(key, default)
    }

    /// Canonical single-string rendering, used for the manifest hash.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Reproducibility record written next to every artifact.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: &KvConfig) -> Self {
        Manifest {
            command: command.to_string(),
            seed,
            config_sha256: sha256_hex(config.canonical().as_bytes()),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes `manifest-<command>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(format!("manifest-{}.json", self.command));
        let json = serde_json::to_string_pretty(self).map_err(Error::from)?;
        std::fs::write(path, json)?;
        Ok(())
    }
}

/// Worker count: explicit flag, then PRIORSEQ_THREADS, then 1.
pub fn resolve_threads(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("PRIORSEQ_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(1)
    .max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_both_line_forms_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(
            &path,
            "# run settings\nseed 7\nrl.k = 10\nrl.lr 0.00005  # anneal later\n",
        )
        .unwrap();
        let c = KvConfig::load(&path).unwrap();
        assert_eq!(c.u64_or("seed", 0).unwrap(), 7);
        assert_eq!(c.usize_or("rl.k", 1).unwrap(), 10);
        assert!((c.f64_or("rl.lr", 0.0).unwrap() - 5e-5).abs() < 1e-15);
        assert_eq!(c.usize_or("absent", 3).unwrap(), 3);
    }

    #[test]
    fn overrides_win_and_bad_values_error() {
        let mut c = KvConfig::new();
        c.set("rl.k", "10");
        c.apply_overrides(&["rl.k=4".to_string()]).unwrap();
        assert_eq!(c.usize_or("rl.k", 0).unwrap(), 4);
        c.set("rl.k", "ten");
        assert!(c.usize_or("rl.k", 0).is_err());
        assert!(c.apply_overrides(&["no-equals".to_string()]).is_err());
        assert!(c.required("missing").is_err());
    }

    #[test]
    fn canonical_form_is_sorted_and_hashable() {
        let mut a = KvConfig::new();
        a.set("b.key", "2");
        a.set("a.key", "1");
        let mut b = KvConfig::new();
        b.set("a.key", "1");
        b.set("b.key", "2");
        assert_eq!(a.canonical(), b.canonical());
        assert_eq!(
            sha256_hex(a.canonical().as_bytes()),
            sha256_hex(b.canonical().as_bytes())
        );
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, "data").unwrap();
        let config = KvConfig::new();
        let mut m = Manifest::new("synth", 9, &config);
        m.add_input(&input).unwrap();
        m.add_output(&dir.path().join("out.bin"));
        m.write(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("manifest-synth.json")).unwrap();
        assert!(text.contains("\"seed\": 9"));
        assert!(text.contains("in.txt"));
    }

    #[test]
    fn thread_resolution_order() {
        assert_eq!(resolve_threads(Some(4)), 4);
        assert_eq!(resolve_threads(Some(0)), 1);
    }
}
