//! Layered configuration: built-in defaults, then a data or checkpoint
//! config, then `--config`, then command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hoi_core::config::RunConfig;

pub const DATA_CONFIG: &str = "config.txt";

pub struct Layered {
    pub cfg: RunConfig,
    sources: BTreeMap<&'static str, &'static str>,
}

impl Layered {
    pub fn new() -> Self {
        Self {
            cfg: RunConfig::default(),
            sources: BTreeMap::new(),
        }
    }

    fn record(&mut self, before: &RunConfig, source: &'static str) {
        for ((k, old), (_, new)) in before.entries().into_iter().zip(self.cfg.entries()) {
            if old != new {
                self.sources.insert(k, source);
            }
        }
    }

    /// Applies a `key=value` file; keys the file sets are tagged `source`.
    pub fn apply_file(&mut self, path: &Path, source: &'static str) -> Result<()> {
        let before = self.cfg.clone();
        let keys = self
            .cfg
            .apply_file(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        self.record(&before, source);
        for k in keys {
            if let Some((name, _)) = self.cfg.entries().into_iter().find(|(n, _)| *n == k.replace('-', "_")) {
                self.sources.insert(name, source);
            }
        }
        Ok(())
    }

    pub fn apply_pairs(&mut self, pairs: &[(String, String)], source: &'static str) -> Result<()> {
        let before = self.cfg.clone();
        for (k, v) in pairs {
            self.cfg.set(k, v)?;
        }
        self.record(&before, source);
        Ok(())
    }

    pub fn banner(&self, command: &str) -> String {
        let mut s = format!("hoi {command}: configuration (cli > file > data/checkpoint > default)\n");
        for (k, v) in self.cfg.entries() {
            let src = self.sources.get(k).copied().unwrap_or("default");
            s.push_str(&format!("  {k:<20} = {v:<12} [{src}]\n"));
        }
        s
    }
}

/// Splits `KEY=VALUE` arguments of `--set`.
pub fn parse_sets(raw: &[String]) -> Result<Vec<(String, String)>, String> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| format!("--set expects KEY=VALUE, got `{s}`"))
        })
        .collect()
}

pub fn data_file(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}
