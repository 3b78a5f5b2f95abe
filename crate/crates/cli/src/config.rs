//! The TOML run document. Command-line flags override anything set here.
//!
//! ```toml
//! jobs = 4
//!
//! [scenario]
//! pool_per_class = 200
//! [scenario.dataset]
//! class_separation = 3.0
//!
//! [attack]
//! per_class_budget = 4
//! label_mode = "hard"
//!
//! [sweep]
//! per_class_budgets = [1, 2, 4, 8]
//! seeds = [0, 1, 2]
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use extraction_lab::scenario::ScenarioSpec;
use extraction_lab::AspkdConfig;
use serde::{Deserialize, Serialize};

use crate::sweep::SweepSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioSpec,
    pub attack: AspkdConfig,
    pub sweep: SweepSpec,
    /// Seeds for `ablate`.
    pub seeds: Vec<u64>,
    pub jobs: usize,
    /// `local` or a service base URL.
    pub oracle: String,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioSpec::default(),
            attack: AspkdConfig::default(),
            sweep: SweepSpec::default(),
            seeds: (0..5).collect(),
            jobs: 1,
            oracle: "local".to_owned(),
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).context("parsing run config")
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Defaults, or the document at `path` when given.
    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}

/// Where teacher answers come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleSource {
    Local,
    Remote(String),
}

impl std::str::FromStr for OracleSource {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        if s == "local" {
            Ok(Self::Local)
        } else if s.starts_with("http://") || s.starts_with("https://") {
            Ok(Self::Remote(s.to_owned()))
        } else {
            bail!("--oracle must be `local` or an http(s) URL, got {s:?}")
        }
    }
}

/// `5` means seeds `0..5`; `a..b` a half-open range; `3,7,9` an explicit list.
pub fn parse_seeds(s: &str) -> anyhow::Result<Vec<u64>> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if a >= b {
            bail!("empty seed range {s}");
        }
        return Ok((a..b).collect());
    }
    if s.contains(',') {
        return s
            .split(',')
            .map(|p| p.trim().parse::<u64>().with_context(|| format!("bad seed {p:?}")))
            .collect();
    }
    let count: u64 = s.parse().with_context(|| format!("bad seed count {s:?}"))?;
    if count == 0 {
        bail!("seed count must be >= 1");
    }
    Ok((0..count).collect())
}

/// Comma-separated positive integers.
pub fn parse_budgets(s: &str) -> anyhow::Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().with_context(|| format!("bad budget {p:?}")))
        .collect()
}
