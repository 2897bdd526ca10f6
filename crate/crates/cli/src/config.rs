//! File-backed configuration for `relrec train`.

use std::path::{Path, PathBuf};

use anyhow::Context;
use relrec::TrainConfig;
use serde::Deserialize;

use crate::Usage;

/// Paths plus a `[train]` table mirroring [`TrainConfig`]. Relative paths
/// resolve against the directory holding the file.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub graph: Option<PathBuf>,
    pub triples: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    /// Checkpoint destination.
    pub out: Option<PathBuf>,
    /// Training log CSV; `<out>.log.csv` when absent.
    pub log: Option<PathBuf>,
    /// Held-out test pairs; `<out>.test.tsv` when absent.
    pub test_pairs: Option<PathBuf>,
    pub train: TrainConfig,
}

impl CliConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: CliConfig =
            toml::from_str(&text).map_err(|e| Usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.graph,
            &mut cfg.triples,
            &mut cfg.pairs,
            &mut cfg.out,
            &mut cfg.log,
            &mut cfg.test_pairs,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// `path` with `suffix` appended to its file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}
